"""Endogenous-subgroups generative model.

Features are drawn from a k-component mixture of exponential-family
densities; the binary label depends on the features only, never on the
component that generated them.  Every density is handled in the natural
parameterisation

    log f(x) = log h(x) + <theta, T(x)> - A(theta)

so posteriors, discriminants and likelihood ratios all reduce to affine
functions of the sufficient statistic T(x).  Moment parameters (mean,
covariance, rates) are the stored representation; natural parameters are
derived from them on demand.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, NamedTuple

import numpy as np
from scipy.special import expit, gammaln, logsumexp

FAMILIES = ("gaussian_full", "gaussian_isotropic", "poisson_product")
LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_W_MIN = 0.05


class ModelError(ValueError):
    """Invalid model parameters."""


def _as_2d(x: np.ndarray, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    x = np.atleast_2d(x) if x.ndim else x.reshape(1, 1)
    if single and d == 1 and x.shape[0] == 1 and x.shape[1] != 1:
        # a 1-d vector of scalars for a 1-d family
        x = x.reshape(-1, 1)
        single = False
    if x.shape[1] != d:
        raise ValueError(f"feature dimension {x.shape[1]} does not match model dimension {d}")
    return x, single


def _rowdot(tx: np.ndarray, theta: np.ndarray) -> np.ndarray:
    # Column-by-column accumulation keeps each row's result independent of
    # how many rows are evaluated together (chunked and batch paths agree bitwise).
    out = tx[:, 0] * theta[0]
    for j in range(1, theta.shape[0]):
        out = out + tx[:, j] * theta[j]
    return out


# ---------------------------------------------------------------------------
# Components
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianParams:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ModelError("covariance shape does not match mean")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ModelError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ModelError("covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def from_natural(cls, theta: np.ndarray, d: int) -> "GaussianParams":
        """Invert the full-covariance natural parameterisation."""
        theta = np.asarray(theta, dtype=float)
        eta1 = theta[:d]
        iu = np.triu_indices(d)
        prec = np.zeros((d, d))
        prec[iu] = -theta[d:]
        prec = prec + prec.T  # off-diagonals were -P_ij, diagonals -P_ii/2
        cov = np.linalg.inv(prec)
        cov = 0.5 * (cov + cov.T)
        return cls(cov @ eta1, cov)


@dataclass(frozen=True)
class ExpFamilyComponent:
    """One mixture component, stored by its moment parameters.

    ``params`` holds ``mean``/``cov`` (gaussian_full), ``mean``/``sigma2``
    (gaussian_isotropic) or ``rates`` (poisson_product).
    """

    family_kind: str
    params: dict = field(compare=False)

    def __post_init__(self):
        if self.family_kind not in FAMILIES:
            raise ModelError(f"unknown family {self.family_kind!r}")
        p = {k: np.asarray(v, dtype=float) for k, v in self.params.items()}
        if self.family_kind == "gaussian_full":
            GaussianParams(p["mean"], p["cov"])  # validates
            p["mean"] = np.atleast_1d(p["mean"])
            p["cov"] = np.atleast_2d(p["cov"])
        elif self.family_kind == "gaussian_isotropic":
            p["mean"] = np.atleast_1d(p["mean"])
            s2 = float(p["sigma2"])
            if not (s2 > 0 and math.isfinite(s2)):
                raise ModelError("sigma2 must be positive")
            p["sigma2"] = np.float64(s2)
        else:
            p["rates"] = np.atleast_1d(p["rates"])
            if not np.all(p["rates"] > 0) or not np.all(np.isfinite(p["rates"])):
                raise ModelError("Poisson rates must be positive")
        for v in p.values():
            v.setflags(write=False)
        object.__setattr__(self, "params", p)

    # constructors -------------------------------------------------------
    @classmethod
    def gaussian(cls, mean, cov) -> "ExpFamilyComponent":
        return cls("gaussian_full", {"mean": mean, "cov": cov})

    @classmethod
    def isotropic(cls, mean, sigma2: float = 1.0) -> "ExpFamilyComponent":
        return cls("gaussian_isotropic", {"mean": mean, "sigma2": sigma2})

    @classmethod
    def poisson(cls, rates) -> "ExpFamilyComponent":
        return cls("poisson_product", {"rates": rates})

    @classmethod
    def from_natural(cls, family_kind: str, theta, d: int) -> "ExpFamilyComponent":
        theta = np.asarray(theta, dtype=float)
        if family_kind == "gaussian_full":
            g = GaussianParams.from_natural(theta, d)
            return cls.gaussian(g.mean, g.cov)
        if family_kind == "gaussian_isotropic":
            if theta[d] >= 0:
                raise ModelError("precision coordinate must be negative")
            s2 = -0.5 / theta[d]
            return cls.isotropic(theta[:d] * s2, s2)
        return cls.poisson(np.exp(theta))

    # structure ----------------------------------------------------------
    @property
    def d(self) -> int:
        key = "rates" if self.family_kind == "poisson_product" else "mean"
        return int(self.params[key].size)

    @property
    def stat_dim(self) -> int:
        d = self.d
        if self.family_kind == "gaussian_full":
            return d + d * (d + 1) // 2
        if self.family_kind == "gaussian_isotropic":
            return d + 1
        return d

    @cached_property
    def gaussian_params(self) -> GaussianParams:
        if self.family_kind == "gaussian_full":
            return GaussianParams(self.params["mean"], self.params["cov"])
        if self.family_kind == "gaussian_isotropic":
            return GaussianParams(self.params["mean"], self.params["sigma2"] * np.eye(self.d))
        raise TypeError("not a Gaussian component")

    @cached_property
    def theta(self) -> np.ndarray:
        d = self.d
        if self.family_kind == "gaussian_full":
            mu, cov = self.params["mean"], self.params["cov"]
            prec = np.linalg.inv(cov)
            prec = 0.5 * (prec + prec.T)
            iu = np.triu_indices(d)
            quad = np.where(iu[0] == iu[1], -0.5, -1.0) * prec[iu]
            th = np.concatenate([prec @ mu, quad])
        elif self.family_kind == "gaussian_isotropic":
            mu, s2 = self.params["mean"], float(self.params["sigma2"])
            th = np.concatenate([mu / s2, [-0.5 / s2]])
        else:
            th = np.log(self.params["rates"])
        th.setflags(write=False)
        return th

    @cached_property
    def log_partition(self) -> float:
        """A(theta); for Gaussians this includes the (d/2) log 2 pi term."""
        d = self.d
        if self.family_kind == "gaussian_full":
            mu, cov = self.params["mean"], self.params["cov"]
            _, logdet = np.linalg.slogdet(cov)
            return float(0.5 * mu @ np.linalg.solve(cov, mu) + 0.5 * logdet + 0.5 * d * LOG_2PI)
        if self.family_kind == "gaussian_isotropic":
            mu, s2 = self.params["mean"], float(self.params["sigma2"])
            return float(0.5 * mu @ mu / s2 + 0.5 * d * math.log(s2) + 0.5 * d * LOG_2PI)
        return float(self.params["rates"].sum())

    def suff_stat(self, x) -> np.ndarray:
        x, _ = _as_2d(x, self.d)
        return sufficient_statistic(self.family_kind, x)

    def log_base_measure(self, x) -> np.ndarray:
        x, _ = _as_2d(x, self.d)
        if self.family_kind == "poisson_product":
            return -gammaln(x + 1.0).sum(axis=1)
        return np.zeros(x.shape[0])

    def log_density(self, x):
        x, single = _as_2d(x, self.d)
        tx = sufficient_statistic(self.family_kind, x)
        out = self.log_base_measure(x) + _rowdot(tx, self.theta) - self.log_partition
        return float(out[0]) if single else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.family_kind == "gaussian_full":
            return rng.multivariate_normal(self.params["mean"], self.params["cov"], size=n, method="cholesky")
        if self.family_kind == "gaussian_isotropic":
            s = math.sqrt(float(self.params["sigma2"]))
            return self.params["mean"] + s * rng.standard_normal((n, self.d))
        return rng.poisson(self.params["rates"], size=(n, self.d)).astype(float)

    def to_json(self) -> dict:
        return {k: (v.tolist() if v.ndim else float(v)) for k, v in self.params.items()}


def sufficient_statistic(family_kind: str, x: np.ndarray) -> np.ndarray:
    """T(x) row-wise for an (n, d) feature matrix."""
    if family_kind == "gaussian_full":
        d = x.shape[1]
        iu = np.triu_indices(d)
        return np.concatenate([x, x[:, iu[0]] * x[:, iu[1]]], axis=1)
    if family_kind == "gaussian_isotropic":
        return np.concatenate([x, (x * x).sum(axis=1, keepdims=True)], axis=1)
    if family_kind == "poisson_product":
        return x
    raise ModelError(f"unknown family {family_kind!r}")


# ---------------------------------------------------------------------------
# Label rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelRule:
    """P(y=1 | x).  ``kind`` is constant, logistic or piecewise.

    piecewise params: ``regions`` is a list of axis-aligned boxes
    ``[[lo_1, hi_1], ..., [lo_d, hi_d]]`` (None for an open side) and ``p``
    has one more entry than ``regions``; the first matching box wins and the
    last probability applies outside every box.
    """

    kind: str
    params: dict

    def __post_init__(self):
        p = self.params
        if self.kind == "constant":
            probs = [p["p"]]
        elif self.kind == "logistic":
            probs = []
            if not math.isfinite(float(p.get("b", 0.0))):
                raise ModelError("logistic bias must be finite")
        elif self.kind == "piecewise":
            probs = list(p["p"])
            if len(probs) != len(p["regions"]) + 1:
                raise ModelError("piecewise rule needs len(regions) + 1 probabilities")
        else:
            raise ModelError(f"unknown label rule {self.kind!r}")
        if any(not (0.0 <= float(q) <= 1.0) for q in probs):
            raise ModelError("label probabilities must lie in [0, 1]")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        if self.kind == "constant":
            return np.full(n, float(self.params["p"]))
        if self.kind == "logistic":
            w = np.asarray(self.params["w"], dtype=float)
            return expit(x @ w + float(self.params.get("b", 0.0)))
        out = np.full(n, float(self.params["p"][-1]))
        unset = np.ones(n, dtype=bool)
        for box, q in zip(self.params["regions"], self.params["p"]):
            inside = unset.copy()
            for j, (lo, hi) in enumerate(box):
                if lo is not None:
                    inside &= x[:, j] >= lo
                if hi is not None:
                    inside &= x[:, j] < hi
            out[inside] = float(q)
            unset &= ~inside
        return out

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": self.params}


# ---------------------------------------------------------------------------
# Mixture model
# ---------------------------------------------------------------------------


class LabeledSample(NamedTuple):
    x: np.ndarray
    y: int
    true_component: int


@dataclass(frozen=True)
class Samples:
    """Struct-of-arrays batch of labeled samples."""

    x: np.ndarray
    y: np.ndarray
    component: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield LabeledSample(self.x[i], int(self.y[i]), int(self.component[i]))


@dataclass(frozen=True)
class MixtureModel:
    weights: np.ndarray
    components: tuple[ExpFamilyComponent, ...]
    label_rule: LabelRule | None = None
    w_min: float = DEFAULT_W_MIN

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        comps = tuple(self.components)
        if len(comps) == 0 or len(comps) != w.size:
            raise ModelError("need one weight per component")
        if not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > 1e-9:
            raise ModelError("weights must sum to 1")
        if w.min() < self.w_min:
            raise ModelError(f"every weight must be >= w_min={self.w_min}")
        kinds = {c.family_kind for c in comps}
        dims = {c.d for c in comps}
        if len(kinds) != 1 or len(dims) != 1:
            raise ModelError("components must share family and dimension")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def d(self) -> int:
        return self.components[0].d

    @property
    def family(self) -> str:
        return self.components[0].family_kind

    @property
    def stat_dim(self) -> int:
        return self.components[0].stat_dim

    @cached_property
    def _natural(self) -> tuple[np.ndarray, np.ndarray]:
        thetas = np.stack([c.theta for c in self.components])
        offsets = np.log(self.weights) - np.array([c.log_partition for c in self.components])
        return thetas, offsets

    def log_joint_scores(self, x) -> np.ndarray:
        """log w_g + <theta_g, T(x)> - A(theta_g), shape (n, k).

        The base measure h(x) is shared by all components and omitted, so the
        scores differ from log(w_g f(x|g)) by a per-row constant.
        """
        x, _ = _as_2d(x, self.d)
        tx = sufficient_statistic(self.family, x)
        thetas, offsets = self._natural
        return np.stack([_rowdot(tx, thetas[g]) + offsets[g] for g in range(self.k)], axis=1)

    def log_density(self, x):
        x, single = _as_2d(x, self.d)
        h = self.components[0].log_base_measure(x)
        out = logsumexp(self.log_joint_scores(x), axis=1) + h
        return float(out[0]) if single else out

    def posterior(self, x, y=None):
        """f(g | x) for every component, computed in log space.

        ``y`` is accepted for signature fidelity and ignored: the label rule
        does not depend on the component, so f(g|x,y) = f(g|x).
        """
        x, single = _as_2d(x, self.d)
        s = self.log_joint_scores(x)
        post = np.exp(s - logsumexp(s, axis=1, keepdims=True))
        return post[0] if single else post

    def discriminant(self, x, y=None):
        """Index of the most likely component; ties go to the smallest index."""
        x, single = _as_2d(x, self.d)
        g = np.argmax(self.log_joint_scores(x), axis=1)
        return int(g[0]) if single else g

    def likelihood_ratio(self, g: int, j: int, x, log: bool = False):
        """f(g|x) / f(j|x) via (w_g e^{-A_g} / w_j e^{-A_j}) exp(<theta_g - theta_j, T(x)>)."""
        x, single = _as_2d(x, self.d)
        thetas, offsets = self._natural
        tx = sufficient_statistic(self.family, x)
        lr = _rowdot(tx, thetas[g] - thetas[j]) + (offsets[g] - offsets[j])
        out = lr if log else np.exp(lr)
        return float(out[0]) if single else out

    def sample(self, n: int, seed) -> Samples:
        if self.label_rule is None:
            raise ModelError("model has no label rule; cannot sample labels")
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(seed)
        g = rng.choice(self.k, size=n, p=self.weights)
        x = np.empty((n, self.d))
        for j, comp in enumerate(self.components):
            idx = np.flatnonzero(g == j)
            if idx.size:
                x[idx] = comp.sample(idx.size, rng)
        y = (rng.random(n) < self.label_rule(x)).astype(np.int8)
        return Samples(x, y, g.astype(np.int64))

    def sample_features(self, n: int, rng: np.random.Generator) -> np.ndarray:
        g = rng.choice(self.k, size=n, p=self.weights)
        x = np.empty((n, self.d))
        for j, comp in enumerate(self.components):
            idx = np.flatnonzero(g == j)
            if idx.size:
                x[idx] = comp.sample(idx.size, rng)
        return x

    # serialisation ------------------------------------------------------
    def to_json(self) -> dict:
        doc = {
            "k": self.k,
            "d": self.d,
            "family": self.family,
            "weights": self.weights.tolist(),
            "components": [c.to_json() for c in self.components],
        }
        if self.label_rule is not None:
            doc["label_rule"] = self.label_rule.to_json()
        if self.w_min != DEFAULT_W_MIN:
            doc["w_min"] = self.w_min
        return doc

    @classmethod
    def from_json(cls, doc: dict | str) -> "MixtureModel":
        if isinstance(doc, str):
            doc = json.loads(doc)
        family = doc["family"]
        comps = tuple(ExpFamilyComponent(family, dict(c)) for c in doc["components"])
        if len(comps) != int(doc["k"]) or any(c.d != int(doc["d"]) for c in comps):
            raise ModelError("k/d fields disagree with the component list")
        rule = doc.get("label_rule")
        rule = LabelRule(rule["kind"], rule["params"]) if rule is not None else None
        return cls(np.asarray(doc["weights"], dtype=float), comps, rule, float(doc.get("w_min", DEFAULT_W_MIN)))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "MixtureModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def two_isotropic(gamma: float, d: int = 2, sigma2: float = 1.0, weights=(0.5, 0.5),
                  label_rule: LabelRule | None = None) -> MixtureModel:
    """Two isotropic Gaussians with means -gamma/2 e_1 and +gamma/2 e_1."""
    e1 = np.zeros(d)
    e1[0] = 0.5 * gamma
    comps = (ExpFamilyComponent.isotropic(-e1, sigma2), ExpFamilyComponent.isotropic(e1, sigma2))
    return MixtureModel(np.asarray(weights, dtype=float), comps, label_rule)


def tv_distance_mc(p, q, n_mc: int, seed) -> tuple[float, float]:
    """Monte Carlo total-variation distance between two densities.

    ``p`` and ``q`` are components or mixtures.  Draws x from the midpoint
    mixture m = (p+q)/2, where TV(p, q) = E_m[|p - q| / (p + q)]; the
    integrand lies in [0, 1], so the estimator is bounded and low-variance.
    Returns ``(estimate, standard_error)``.
    """
    if n_mc < 100:
        raise ValueError("n_mc must be >= 100")
    if p.d != q.d:
        raise ValueError("p and q must have the same dimension")
    rng = np.random.default_rng(seed)
    from_p = rng.random(n_mc) < 0.5
    n_p = int(from_p.sum())
    x = np.empty((n_mc, p.d))
    x[from_p] = _draw(p, n_p, rng)
    x[~from_p] = _draw(q, n_mc - n_p, rng)
    diff = p.log_density(x) - q.log_density(x)
    h = np.abs(np.tanh(0.5 * diff))
    h[np.isnan(diff)] = 0.0
    return float(h.mean()), float(h.std(ddof=1) / math.sqrt(n_mc))


def _draw(dist, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(dist, MixtureModel):
        return dist.sample_features(n, rng)
    return dist.sample(n, rng)


__all__ = [
    "ExpFamilyComponent",
    "GaussianParams",
    "LabelRule",
    "LabeledSample",
    "MixtureModel",
    "ModelError",
    "Samples",
    "sufficient_statistic",
    "tv_distance_mc",
    "two_isotropic",
]
