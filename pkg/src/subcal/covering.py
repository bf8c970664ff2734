"""Distinguisher classes, empirical L1 covers and shattering checks."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from . import _backend
from .mixture_model import ExpFamilyComponent, MixtureModel, sufficient_statistic

KINDS = ("discriminant_indicator", "posterior", "constant", "tabulated")
# Relative slack on the L1 budget so that e.g. distance 1 passes radius (1/T')*T'.
_COVER_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class Distinguisher:
    """A weighting function from features to [0, 1]."""

    kind: str
    model: MixtureModel | None = None
    g: int = 0
    c: float = 0.0
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distinguisher kind {self.kind!r}")
        if self.kind in ("discriminant_indicator", "posterior"):
            if self.model is None or not 0 <= self.g < self.model.k:
                raise ValueError("model-based distinguisher needs a model and a valid group index")
        if self.kind == "constant" and not 0.0 <= self.c <= 1.0:
            raise ValueError("constant must lie in [0, 1]")
        if self.kind == "tabulated":
            v = np.asarray(self.values, dtype=float)
            if v.ndim != 1 or np.any((v < 0) | (v > 1)):
                raise ValueError("tabulated values must be a vector in [0, 1]")
            object.__setattr__(self, "values", v)

    @classmethod
    def indicator(cls, model: MixtureModel, g: int) -> "Distinguisher":
        return cls("discriminant_indicator", model, g)

    @classmethod
    def posterior_of(cls, model: MixtureModel, g: int) -> "Distinguisher":
        return cls("posterior", model, g)

    @classmethod
    def constant(cls, c: float = 1.0) -> "Distinguisher":
        return cls("constant", c=float(c))

    @property
    def d(self) -> int | None:
        return self.model.d if self.model is not None else None

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1 and (self.d is None or x.size == self.d)
        X = x.reshape(1, -1) if single else x
        out = evaluate_distinguishers([self], X)[:, 0]
        return float(out[0]) if single else out

    def to_json(self) -> dict:
        doc: dict = {"kind": self.kind}
        if self.model is not None:
            doc["model"] = self.model.to_json()
            doc["g"] = self.g
        if self.kind == "constant":
            doc["c"] = self.c
        if self.kind == "tabulated":
            doc["values"] = self.values.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict, _models: dict | None = None) -> "Distinguisher":
        model = None
        if "model" in doc:
            key = json.dumps(doc["model"], sort_keys=True)
            if _models is not None and key in _models:
                model = _models[key]
            else:
                model = MixtureModel.from_json(doc["model"])
                if _models is not None:
                    _models[key] = model
        vals = np.asarray(doc["values"], dtype=float) if "values" in doc else None
        return cls(doc["kind"], model, int(doc.get("g", 0)), float(doc.get("c", 0.0)), vals)


def _batched_scores(models: list[MixtureModel], X: np.ndarray) -> np.ndarray:
    """log-joint scores of many same-family models, shape (n, n_models, k).

    Accumulates one sufficient-statistic coordinate at a time, the same
    operation order as ``MixtureModel.log_joint_scores``, so each model's
    slice is bitwise equal to its own scores.
    """
    tx = sufficient_statistic(models[0].family, X)
    thetas = np.concatenate([m._natural[0] for m in models], axis=0)  # (sum k, P)
    offsets = np.concatenate([m._natural[1] for m in models])
    acc = tx[:, 0:1] * thetas[None, :, 0]
    tmp = np.empty_like(acc)
    for j in range(1, thetas.shape[1]):
        np.multiply(tx[:, j:j + 1], thetas[None, :, j], out=tmp)
        acc += tmp
    acc += offsets[None, :]
    return acc.reshape(X.shape[0], len(models), models[0].k)


def evaluate_distinguishers(distinguishers: Sequence[Distinguisher], X) -> np.ndarray:
    """Matrix of values, shape (n, len(distinguishers)).

    Model-based rows are grouped by (family, k) and scored in one pass; the
    results coincide with ``model.discriminant`` / ``model.posterior``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n = X.shape[0]
    out = np.empty((n, len(distinguishers)))
    groups: dict[tuple, dict[int, int]] = {}
    models: dict[int, MixtureModel] = {}
    for dist in distinguishers:
        if dist.model is not None:
            key = (dist.model.family, dist.model.k, dist.model.d)
            slot = groups.setdefault(key, {})
            if id(dist.model) not in slot:
                slot[id(dist.model)] = len(slot)
                models[id(dist.model)] = dist.model
    disc: dict[tuple, list] = {}
    post: dict[tuple, np.ndarray] = {}
    need_post = {(d.model.family, d.model.k, d.model.d) for d in distinguishers if d.kind == "posterior"}
    need_disc = {(d.model.family, d.model.k, d.model.d) for d in distinguishers
                 if d.kind == "discriminant_indicator"}
    if n:
        for key, slot in groups.items():
            ms = [models[i] for i in slot]
            if ms[0].d != X.shape[1]:
                raise ValueError(f"feature dimension {X.shape[1]} does not match model dimension {ms[0].d}")
            if key in need_post:
                sc = _batched_scores(ms, X)
                post[key] = np.exp(sc - logsumexp(sc, axis=2, keepdims=True))
            if key in need_disc:
                disc[key] = ms
    rows: dict[tuple, list] = {}
    for j, dist in enumerate(distinguishers):
        if dist.kind == "constant":
            out[:, j] = dist.c
        elif dist.kind == "tabulated":
            if dist.values.size != n:
                raise ValueError("tabulated distinguisher is only defined on its own sample")
            out[:, j] = dist.values
        else:
            key = (dist.model.family, dist.model.k, dist.model.d)
            rows.setdefault((dist.kind,) + key, []).append((j, groups[key][id(dist.model)], dist.g))
    if n:
        for (kind, *key), lst in rows.items():
            js, cols, gs = (np.asarray(a) for a in zip(*lst))
            if kind == "discriminant_indicator":
                ms = disc[tuple(key)]
                tx = np.ascontiguousarray(sufficient_statistic(key[0], X))
                thetas = np.ascontiguousarray(np.concatenate([m._natural[0] for m in ms], axis=0))
                offsets = np.concatenate([m._natural[1] for m in ms])
                _backend.kernels.indicator_matrix(tx, thetas, offsets, int(key[1]), cols.astype(np.int64),
                                                  gs.astype(np.int64), out, js.astype(np.int64))
            else:
                out[:, js] = post[tuple(key)][:, cols, gs]
    return out


# ---------------------------------------------------------------- candidate family

@dataclass(frozen=True)
class CandidateFamily:
    """Box of plausible mixture parameters from which M candidates are drawn.

    ``mean_lo``/``mean_hi`` bound each coordinate of every component mean
    (Poisson rates for the Poisson family); ``var_lo``/``var_hi`` bound the
    component variances (covariance eigenvalues for full Gaussians); weights
    are drawn as w_floor + (1 - k*w_floor) * Dirichlet(1).
    """

    family: str
    k: int
    mean_lo: np.ndarray
    mean_hi: np.ndarray
    var_lo: float = 1.0
    var_hi: float = 1.0
    w_floor: float = 0.05
    M: int = 500
    seed: int = 0

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.mean_lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.mean_hi, dtype=float))
        object.__setattr__(self, "mean_lo", lo)
        object.__setattr__(self, "mean_hi", hi)
        if lo.shape != hi.shape or np.any(~(hi > lo)):
            raise ValueError("degenerate mean box")
        if not (self.var_hi >= self.var_lo > 0):
            raise ValueError("degenerate variance range")
        if self.M < 1 or self.k < 1:
            raise ValueError("need M >= 1 and k >= 1")
        if not 0 <= self.w_floor < 1.0 / self.k:
            raise ValueError("weight floor must lie in [0, 1/k)")
        if self.family == "poisson_product" and lo.min() <= 0:
            raise ValueError("Poisson rate box must be positive")

    @property
    def d(self) -> int:
        return self.mean_lo.size

    @classmethod
    def from_data(cls, X: np.ndarray, k: int, family: str = "gaussian_isotropic", M: int = 500,
                  seed: int = 0, w_floor: float = 0.05, q: float = 0.05) -> "CandidateFamily":
        """Ranges read off a sample: per-coordinate quantile box and
        [0.25, 1.5] times the average per-coordinate variance."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        lo = np.quantile(X, q, axis=0)
        hi = np.quantile(X, 1 - q, axis=0)
        v = float(X.var(axis=0).mean())
        if family == "poisson_product":
            lo = np.maximum(lo, 0.1)
            hi = np.maximum(hi, lo + 0.5)
        if not v > 0:
            raise ValueError("degenerate sample: zero variance")
        return cls(family, k, lo, hi, 0.25 * v, 1.5 * v, w_floor, M, seed)

    def sample(self) -> list[MixtureModel]:
        rng = np.random.default_rng(self.seed)
        d, k = self.d, self.k
        out = []
        for _ in range(self.M):
            w = self.w_floor + (1 - k * self.w_floor) * rng.dirichlet(np.ones(k))
            w = w / w.sum()
            comps = []
            for _g in range(k):
                mu = rng.uniform(self.mean_lo, self.mean_hi)
                if self.family == "gaussian_isotropic":
                    comps.append(ExpFamilyComponent.isotropic(mu, rng.uniform(self.var_lo, self.var_hi)))
                elif self.family == "gaussian_full":
                    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
                    ev = rng.uniform(self.var_lo, self.var_hi, size=d)
                    cov = (q * ev) @ q.T
                    comps.append(ExpFamilyComponent.gaussian(mu, 0.5 * (cov + cov.T)))
                else:
                    comps.append(ExpFamilyComponent.poisson(mu))
            out.append(MixtureModel(w, tuple(comps), None, w_min=min(self.w_floor, float(w.min()))))
        return out


def build_distinguisher_class(family: CandidateFamily, mode: str,
                              include_truth: MixtureModel | None = None) -> list[Distinguisher]:
    """M*k distinguishers, candidate c group g at index c*k + g; the true
    model's k rows are appended last when ``include_truth`` is given."""
    if mode not in ("dce", "lce"):
        raise ValueError("mode must be 'dce' or 'lce'")
    make = Distinguisher.indicator if mode == "dce" else Distinguisher.posterior_of
    out = [make(m, g) for m in family.sample() for g in range(family.k)]
    if include_truth is not None:
        out.extend(make(include_truth, g) for g in range(include_truth.k))
    return out


# ---------------------------------------------------------------- covers

@dataclass
class Cover:
    selected: np.ndarray
    eps: float
    n_sample: int
    distinguishers: list = field(default_factory=list)
    mode: str = ""
    truth_included: bool = False

    def __len__(self) -> int:
        return int(self.selected.size)

    @property
    def members(self) -> list:
        return [self.distinguishers[i] for i in self.selected]

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "eps": self.eps,
            "n_sample": self.n_sample,
            "truth_included": self.truth_included,
            "selected": self.selected.tolist(),
            "distinguishers": [d.to_json() for d in self.distinguishers],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Cover":
        cache: dict = {}
        dists = [Distinguisher.from_json(d, cache) for d in doc["distinguishers"]]
        return cls(np.asarray(doc["selected"], dtype=np.int64), float(doc["eps"]), int(doc["n_sample"]),
                   dists, doc.get("mode", ""), bool(doc.get("truth_included", False)))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "Cover":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _as_table(functions) -> np.ndarray:
    F = np.asarray(functions, dtype=float)
    if F.ndim != 2:
        raise ValueError("functions must be a (n_functions, n_points) table")
    return F


def cover_radius(F: np.ndarray, selected: np.ndarray) -> np.ndarray:
    """Per-function mean-L1 distance to the nearest selected function."""
    F = _as_table(F)
    if F.shape[1] == 0:
        return np.zeros(F.shape[0])
    return cdist(F, F[selected], metric="cityblock").min(axis=1) / F.shape[1]


def exact_cover(functions, eps: float) -> Cover:
    """Literal enumeration of all labelings in {0, eps, ..., 1}^T; for each one,
    the lowest-index function within eps/2 of it on every point is kept."""
    F = _as_table(functions)
    T = F.shape[1]
    inv = 1.0 / eps
    levels = int(round(inv))
    if T > 8 or abs(inv - levels) > 1e-9 or levels > 4 or levels < 1:
        raise ValueError("exact cover needs T <= 8 and eps = 1/j with j <= 4")
    grid = np.arange(levels + 1) / levels
    labelings = grid[np.array(list(itertools.product(range(levels + 1), repeat=T)), dtype=int).reshape(-1, T)]
    chosen = set()
    for lab in labelings:
        ok = np.all(np.abs(F - lab) <= eps / 2 + 1e-12, axis=1)
        if ok.any():
            chosen.add(int(np.argmax(ok)))
    return Cover(np.asarray(sorted(chosen), dtype=np.int64), eps, T)


def greedy_cover(functions, eps: float, forced: Sequence[int] = ()) -> Cover:
    """Scan functions in order, keeping any function farther than eps (mean L1)
    from everything kept so far; ``forced`` rows are kept first unconditionally."""
    F = np.ascontiguousarray(_as_table(functions))
    n, T = F.shape
    if T < 1:
        raise ValueError("need at least one sample point")
    forced = [int(i) for i in forced]
    rest = np.setdiff1d(np.arange(n), forced, assume_unique=False)
    order = np.concatenate([np.asarray(forced, dtype=np.int64), rest.astype(np.int64)])
    budget = eps * T * (1 + _COVER_SLACK)
    sel = _backend.kernels.greedy_cover(F, budget, order, len(forced))
    return Cover(np.asarray(sel, dtype=np.int64), eps, T)


@dataclass
class VerifyResult:
    passed: bool
    worst_gap: float
    worst_index: int
    radius: float

    def to_json(self) -> dict:
        return {"passed": self.passed, "worst_gap": self.worst_gap, "worst_index": self.worst_index,
                "radius": self.radius}


def verify_table(F_holdout: np.ndarray, selected: np.ndarray, eps: float, factor: float = 4.0) -> VerifyResult:
    gaps = cover_radius(F_holdout, selected)
    i = int(np.argmax(gaps)) if gaps.size else -1
    worst = float(gaps[i]) if gaps.size else 0.0
    radius = factor * eps
    return VerifyResult(worst <= radius * (1 + _COVER_SLACK), worst, i, radius)


def verify_cover(cover: Cover, functions: Sequence[Distinguisher], holdout, eps: float | None = None,
                 factor: float = 4.0) -> VerifyResult:
    """Check every function is within factor*eps of the cover on held-out points."""
    eps = cover.eps if eps is None else eps
    F = evaluate_distinguishers(functions, holdout).T
    return verify_table(F, cover.selected, eps, factor)


# ---------------------------------------------------------------- shattering

def _threshold_candidates(col: np.ndarray, max_thresholds: int) -> np.ndarray:
    u = np.unique(col)
    if u.size < 2:
        return np.zeros(0)
    mids = 0.5 * (u[:-1] + u[1:])
    if mids.size > max_thresholds:
        idx = np.unique(np.round(np.linspace(0, mids.size - 1, max_thresholds)).astype(int))
        mids = mids[idx]
    return mids


def _shatters(V: np.ndarray, cand: list[np.ndarray]) -> bool:
    """Whether some threshold vector realises every above/below pattern on the columns of V."""
    m = V.shape[1]

    def rec(j: int, cells: list[np.ndarray]) -> bool:
        if j == m - 1:
            col = V[:, j]
            mins = max(col[c].min() for c in cells)
            maxs = min(col[c].max() for c in cells)
            return mins < maxs
        for r in cand[j]:
            above = V[:, j] > r
            nxt = []
            for c in cells:
                a, b = c[above[c]], c[~above[c]]
                if a.size == 0 or b.size == 0:
                    break
                nxt.extend((a, b))
            else:
                if rec(j + 1, nxt):
                    return True
        return False

    return rec(0, [np.arange(V.shape[0])])


def is_pseudo_shattered(values: np.ndarray, points: Sequence[int], max_thresholds: int = 32) -> bool:
    V = _as_table(values)[:, list(points)]
    if V.shape[1] == 0:
        return True
    cand = [_threshold_candidates(V[:, j], max_thresholds) for j in range(V.shape[1])]
    if any(c.size == 0 for c in cand):
        return False
    return _shatters(V, cand)


def empirical_shatter_dim(values, max_thresholds: int = 32) -> int:
    """Largest m such that some m of the points are pseudo-shattered by the rows.

    ``values`` is a (n_functions, n_points) table with n_points <= 12.
    """
    V = _as_table(values)
    n = V.shape[1]
    if n > 12:
        raise ValueError("at most 12 candidate points")
    best = 0
    for size in range(1, n + 1):
        if any(is_pseudo_shattered(V, pts, max_thresholds) for pts in itertools.combinations(range(n), size)):
            best = size
        else:
            break
    return best
