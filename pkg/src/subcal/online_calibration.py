"""Hedge-driven online multicalibration.

Experts are triples (sign, distinguisher, bucket).  Two implementations of
the same learner live here:

* ``HedgeState`` / ``minimax_predict`` / ``hedge_update`` keep one cumulative
  cost per expert and are meant for small problems and as a reference.
* ``MulticalibrationEngine`` keeps only the expected signed sum S[g, v] per
  (distinguisher, bucket).  Since every expert pays 1/2 minus half its signed
  payoff, the cumulative cost of (i, g, v) after t rounds is t/2 - i*S[g, v]/2
  and the Hedge weight is proportional to exp(i * eta * S[g, v] / 2).  The
  engine runs in chunks through the compiled kernel.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from . import _backend
from ._kernels_py import bucket_bounds, bucket_of_index, solve_signal
from .buckets_metrics import BucketGrid, Transcript

MIN_GRID_SPACING = 1e-4


class StreamExhausted(RuntimeError):
    pass


# ---------------------------------------------------------------- prediction grid

def grid_multiplier(lam: int, T: int, min_spacing: float = MIN_GRID_SPACING) -> int:
    """m such that the prediction grid has 4*lam*m intervals.

    m tracks ceil(sqrt(T)) but is capped so the spacing stays >= min_spacing.
    """
    cap = max(1, int(math.floor(1.0 / (4 * lam * min_spacing) + 1e-9)))
    return max(1, min(int(math.ceil(math.sqrt(max(T, 1)))), cap))


@dataclass(frozen=True)
class PredictionGrid:
    lam: int
    m: int

    @property
    def n(self) -> int:
        return 4 * self.lam * self.m

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    @property
    def values(self) -> np.ndarray:
        return np.arange(self.n + 1) / self.n

    def bucket_of_index(self, i: int) -> int:
        return bucket_of_index(int(i), self.m)

    @classmethod
    def for_horizon(cls, lam: int, T: int) -> "PredictionGrid":
        return cls(lam, grid_multiplier(lam, T))

    @classmethod
    def with_points(cls, lam: int, n_points: int) -> "PredictionGrid":
        n = n_points - 1
        if n % (4 * lam):
            raise ValueError("prediction grid size must be 4*lambda*m + 1")
        return cls(lam, n // (4 * lam))


@dataclass(frozen=True)
class RandomizedPrediction:
    """Distribution over at most two adjacent prediction-grid points."""

    support: tuple[float, ...]
    probs: tuple[float, ...]
    value: float = float("nan")

    def __post_init__(self):
        if len(self.support) not in (1, 2) or len(self.probs) != len(self.support):
            raise ValueError("support must hold one or two points")
        if abs(sum(self.probs) - 1.0) > 1e-12 or min(self.probs) < 0:
            raise ValueError("probabilities must be non-negative and sum to 1")

    @property
    def mean(self) -> float:
        return float(sum(p * q for p, q in zip(self.support, self.probs)))

    def sample(self, u: float) -> float:
        return self.support[0] if u < self.probs[0] else self.support[-1]


def _prediction(ia: int, ib: int, alpha: float, pgrid: PredictionGrid, value: float) -> RandomizedPrediction:
    if ia == ib:
        return RandomizedPrediction((ia / pgrid.n,), (1.0,), value)
    return RandomizedPrediction((ia / pgrid.n, ib / pgrid.n), (alpha, 1.0 - alpha), value)


def solve_bucket_signal(s: np.ndarray, pgrid: PredictionGrid) -> RandomizedPrediction:
    """Minimise max over y of E[s(bucket(p)) * (p - y)] over grid distributions."""
    s = np.asarray(s, dtype=float)
    if s.shape != (pgrid.lam + 1,):
        raise ValueError("bucket signal must have one entry per bucket")
    lo, hi = bucket_bounds(pgrid.lam, pgrid.m)
    best, ia, ib, alpha = solve_signal(s, lo, hi, float(pgrid.n))
    return _prediction(ia, ib, alpha, pgrid, best)


def prediction_value(s: np.ndarray, pred: RandomizedPrediction, grid: BucketGrid) -> float:
    b = grid.bucket_index(np.asarray(pred.support))
    a = sum(q * s[v] * p for q, v, p in zip(pred.probs, b, pred.support))
    e = sum(q * s[v] for q, v in zip(pred.probs, b))
    return float(max(a, a - e))


def brute_force_minimax(s: np.ndarray, grid: BucketGrid, pgrid: PredictionGrid) -> float:
    """Reference optimum: every point mass and every adjacent-pair mixture.

    For a pair, the objective max(A, A - S) is piecewise linear in the mixing
    weight with a kink where S = 0, so endpoints plus the kink suffice.
    """
    s = np.asarray(s, dtype=float)
    p = pgrid.values
    sp = s[grid.bucket_index(p)]
    a_pt = sp * p
    best = float(np.maximum(a_pt, a_pt - sp).min())
    for j in range(len(p) - 1):
        sa, sb = sp[j], sp[j + 1]
        cands = [0.0, 1.0]
        if sa != sb:
            al = sb / (sb - sa)
            if 0.0 < al < 1.0:
                cands.append(al)
        for al in cands:
            A = al * a_pt[j] + (1 - al) * a_pt[j + 1]
            S = al * sa + (1 - al) * sb
            best = min(best, max(A, A - S))
    return best


# ---------------------------------------------------------------- explicit Hedge

@dataclass
class HedgeState:
    """Cumulative cost per expert; experts ordered (sign, distinguisher, bucket)
    with sign +1 first."""

    cumcost: np.ndarray
    eta: float
    n_dist: int
    lam: int
    rounds: int = 0

    @classmethod
    def uniform(cls, n_dist: int, lam: int, eta: float) -> "HedgeState":
        if n_dist < 1:
            raise ValueError("need at least one distinguisher")
        return cls(np.zeros(2 * n_dist * (lam + 1)), float(eta), n_dist, lam)

    @property
    def n_experts(self) -> int:
        return self.cumcost.size

    def weights(self) -> np.ndarray:
        z = -self.eta * self.cumcost
        return np.exp(z - logsumexp(z))

    def weights_grid(self) -> np.ndarray:
        return self.weights().reshape(2, self.n_dist, self.lam + 1)


def hedge_eta(n_experts: int, T: int) -> float:
    return math.sqrt(8.0 * math.log(n_experts) / max(T, 1))


def hedge_regret(costs, eta: float | None = None) -> np.ndarray:
    """External regret of Hedge on cost tables of shape (T, N) or (B, T, N).

    Plays the exponential weights of ``HedgeState.weights`` against each
    sequence and returns expected cumulative cost minus the best expert's.
    """
    C = np.asarray(costs, dtype=float)
    single = C.ndim == 2
    if single:
        C = C[None]
    B, T, N = C.shape
    eta = hedge_eta(N, T) if eta is None else eta
    cum = np.zeros((B, N))
    played = np.zeros(B)
    for t in range(T):
        z = -eta * cum
        w = np.exp(z - logsumexp(z, axis=1, keepdims=True))
        played += np.einsum("bn,bn->b", w, C[:, t])
        cum += C[:, t]
    reg = played - cum.min(axis=1)
    return reg[0] if single else reg


def bucket_signal(q: np.ndarray, g_vals: np.ndarray) -> np.ndarray:
    """s[v] = sum_{i,g} q(i,g,v) * i * g(x)."""
    return g_vals @ (q[0] - q[1])


def minimax_predict(state: HedgeState, distinguisher_values, grid: BucketGrid,
                    pred_grid: PredictionGrid | None = None) -> RandomizedPrediction:
    g_vals = np.asarray(distinguisher_values, dtype=float)
    if g_vals.size == 0:
        raise ValueError("empty distinguisher set")
    if g_vals.shape != (state.n_dist,):
        raise ValueError("one value per distinguisher expected")
    pgrid = pred_grid or PredictionGrid(grid.lam, 1)
    return solve_bucket_signal(bucket_signal(state.weights_grid(), g_vals), pgrid)


def expert_costs(distinguisher_values, prediction: RandomizedPrediction, y: int, grid: BucketGrid) -> np.ndarray:
    """Cost of every expert: 1/2 - i*g(x)*E[1[yhat in v](yhat - y)]/2, flattened."""
    g_vals = np.asarray(distinguisher_values, dtype=float)
    pay = np.zeros(grid.size)
    b = grid.bucket_index(np.asarray(prediction.support))
    for q, v, p in zip(prediction.probs, b, prediction.support):
        pay[v] += q * (p - y)
    signed = g_vals[:, None] * pay[None, :]
    return np.concatenate([(0.5 - 0.5 * signed).ravel(), (0.5 + 0.5 * signed).ravel()])


def hedge_update(state: HedgeState, distinguisher_values, prediction: RandomizedPrediction,
                 y: int, grid: BucketGrid) -> HedgeState:
    c = expert_costs(distinguisher_values, prediction, y, grid)
    return HedgeState(state.cumcost + c, state.eta, state.n_dist, state.lam, state.rounds + 1)


def run_explicit(G: np.ndarray, y: np.ndarray, u: np.ndarray, lam: int, T: int, pgrid: PredictionGrid):
    """Round-by-round reference loop over the explicit expert state."""
    grid = BucketGrid(lam)
    G = np.asarray(G, dtype=float)
    state = HedgeState.uniform(G.shape[1], lam, hedge_eta(2 * G.shape[1] * (lam + 1), T))
    yhat = np.zeros(len(y))
    for t in range(len(y)):
        pred = minimax_predict(state, G[t], grid, pgrid)
        yhat[t] = pred.sample(u[t])
        state = hedge_update(state, G[t], pred, int(y[t]), grid)
    return yhat, state


# ---------------------------------------------------------------- compact engine

@dataclass
class EngineConfig:
    lam: int = 10
    T: int = 1024
    eta_policy: str = "horizon"
    pred_grid_policy: str = "sqrt_T"
    seed: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "EngineConfig":
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        return cls(**doc)


@dataclass
class ChunkOutput:
    yhat: np.ndarray
    value: np.ndarray
    ia: np.ndarray
    ib: np.ndarray
    alpha: np.ndarray

    @property
    def expected_yhat(self) -> np.ndarray:
        return self.alpha * self.ia + (1 - self.alpha) * self.ib


class MulticalibrationEngine:
    """Compact Hedge state over (distinguisher, bucket) signed sums."""

    def __init__(self, n_dist: int, lam: int, T: int, *, m: int | None = None,
                 eta: float | None = None, backend: str | None = None,
                 track_realized: bool = False):
        if n_dist < 1:
            raise ValueError("need at least one distinguisher")
        self.n_dist = int(n_dist)
        self.lam = int(lam)
        self.T = int(T)
        self.pgrid = PredictionGrid(self.lam, m if m is not None else grid_multiplier(self.lam, self.T))
        self.n_experts = 2 * self.n_dist * (self.lam + 1)
        self.eta = float(eta) if eta is not None else hedge_eta(self.n_experts, self.T)
        self.kernels = _backend.get_kernels(backend)
        V = self.lam + 1
        self.S = np.zeros((self.n_dist, V))
        self.Wdiff = np.zeros((self.n_dist, V))
        self.Wsum = np.full((self.n_dist, V), 2.0)
        self.zcol = self.Wsum.sum(axis=0)
        self.shift = np.zeros(1)
        self.track_realized = bool(track_realized)
        self.R = np.zeros((self.n_dist, V) if track_realized else (1, 1))
        self.rounds = 0

    @property
    def grid(self) -> BucketGrid:
        return BucketGrid(self.lam)

    def seed_realized(self, cells: np.ndarray) -> None:
        if not self.track_realized or cells.shape != self.R.shape:
            raise ValueError("realized sums are not tracked with this shape")
        self.R[...] = cells

    def step_chunk(self, G: np.ndarray, y: np.ndarray, u: np.ndarray) -> ChunkOutput:
        G = np.ascontiguousarray(G, dtype=float)
        n = G.shape[0]
        if G.ndim != 2 or G.shape[1] != self.n_dist:
            raise ValueError("distinguisher matrix must have shape (rounds, n_dist)")
        y = np.ascontiguousarray(y, dtype=float)
        u = np.ascontiguousarray(u, dtype=float)
        out = ChunkOutput(np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64),
                          np.zeros(n, dtype=np.int64), np.zeros(n))
        if n == 0:
            return out
        self.kernels.mc_chunk(G, y, u, self.S, self.Wdiff, self.Wsum, self.zcol, self.shift, self.R,
                              self.lam, self.pgrid.m, self.eta, self.track_realized,
                              out.yhat, out.value, out.ia, out.ib, out.alpha)
        self.rounds += n
        return out

    def weights_grid(self) -> np.ndarray:
        """Normalised Hedge weights, shape (2, n_dist, lam+1), sign +1 first."""
        a = 0.5 * self.eta * self.S
        z = np.stack([a, -a])
        return np.exp(z - logsumexp(z))

    def cumulative_costs(self) -> np.ndarray:
        half = 0.5 * self.rounds
        return np.concatenate([(half - 0.5 * self.S).ravel(), (half + 0.5 * self.S).ravel()])


def _iter_stream(data_stream) -> Iterable[tuple[np.ndarray, int]]:
    if hasattr(data_stream, "x") and hasattr(data_stream, "y"):
        for x, y in zip(data_stream.x, data_stream.y):
            yield x, y
        return
    for item in data_stream:
        yield item[0], item[1]


def _take(it, n: int, d_hint: int | None):
    xs, ys = [], []
    for _ in range(n):
        try:
            x, y = next(it)
        except StopIteration:
            break
        xs.append(np.atleast_1d(np.asarray(x, dtype=float)))
        ys.append(int(y))
    if not xs:
        return np.zeros((0, d_hint or 1)), np.zeros(0, dtype=np.int8)
    return np.vstack(xs), np.asarray(ys, dtype=np.int8)


@dataclass
class EngineRun:
    transcript: Transcript
    engine: MulticalibrationEngine
    expected_yhat: np.ndarray = field(default_factory=lambda: np.zeros(0))


def run_multicalibration(distinguishers: Sequence, data_stream, grid: BucketGrid, T: int, seed,
                         *, chunk: int = 4096, backend: str | None = None,
                         track_realized: bool = False, m: int | None = None,
                         return_engine: bool = False):
    """Online multicalibration over the first T rounds of ``data_stream``.

    ``seed`` drives the prediction randomisation only.  Raises
    ``StreamExhausted`` if fewer than T rounds are available.
    """
    from .covering import evaluate_distinguishers

    if len(distinguishers) < 1:
        raise ValueError("need at least one distinguisher")
    engine = MulticalibrationEngine(len(distinguishers), grid.lam, T, m=m, backend=backend,
                                    track_realized=track_realized)
    rng = np.random.default_rng(seed)
    it = iter(_iter_stream(data_stream))
    xs, ys, yh, vals, ey = [], [], [], [], []
    done = 0
    while done < T:
        X, Y = _take(it, min(chunk, T - done), None)
        if X.shape[0] < min(chunk, T - done):
            raise StreamExhausted(f"data stream ended after {done + X.shape[0]} of {T} rounds")
        G = evaluate_distinguishers(distinguishers, X)
        out = engine.step_chunk(G, Y, rng.random(X.shape[0]))
        xs.append(X); ys.append(Y); yh.append(out.yhat); vals.append(out.value)
        ey.append(out.expected_yhat / engine.pgrid.n)
        done += X.shape[0]
    if xs:
        tr = Transcript(np.vstack(xs), np.concatenate(ys), np.concatenate(yh),
                        minimax_value=np.concatenate(vals))
        expected = np.concatenate(ey)
    else:
        d = getattr(distinguishers[0], "d", 1) or 1
        tr = Transcript.empty(d)
        tr.minimax_value = np.zeros(0)
        expected = np.zeros(0)
    if return_engine:
        return EngineRun(tr, engine, expected)
    return tr


# ---------------------------------------------------------------- trace output

TRACE_HEADER = ["t", "x_hash", "y", "yhat", "bucket", "minimax_value"]


def x_hash(x: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(x, dtype=np.float64).tobytes()).hexdigest()[:12]


def write_trace(path, transcript: Transcript, grid: BucketGrid, t0: int = 0) -> None:
    b = grid.bucket_index(transcript.yhat) if len(transcript) else np.zeros(0, dtype=int)
    mv = transcript.minimax_value if transcript.minimax_value is not None else np.full(len(transcript), np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for t in range(len(transcript)):
            w.writerow([t0 + t, x_hash(transcript.x[t]), int(transcript.y[t]), repr(float(transcript.yhat[t])),
                        int(b[t]), repr(float(mv[t]))])


def save_config(path, cfg: EngineConfig) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2)
