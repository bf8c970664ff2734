"""End-to-end learners.

Each pipeline spends a first phase of T' rounds predicting a fixed value
while collecting features, then calibrates online for the remaining rounds:

* ``ctp_dce``  learns a two-cluster discriminant and runs one marginal
  calibrator per learned cluster.
* ``ctp_lce``  fits a mixture by EM and multicalibrates against its posteriors.
* ``mo_dce`` / ``mo_lce``  sample candidate mixtures, cover their group
  functions on the phase-1 sample and multicalibrate against the cover.
* ``marginal``  has no first phase and calibrates against the constant 1.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .buckets_metrics import BucketGrid, ErrorAccumulator, ErrorReport, Transcript, dce, lce
from .clustering_estimators import EstimatorError, learn_discriminant_2iso, learn_mixture_em
from .covering import (CandidateFamily, Cover, Distinguisher, build_distinguisher_class,
                       evaluate_distinguishers, greedy_cover)
from .mixture_model import MixtureModel
from .online_calibration import MulticalibrationEngine

log = logging.getLogger(__name__)

PIPELINES = ("ctp_dce", "ctp_lce", "mo_dce", "mo_lce", "marginal")
TPRIME_POLICIES = ("t23", "t1213", "sqrt_formula")
CHUNK = 4096


@dataclass
class PipelineConfig:
    pipeline: str = "mo_dce"
    T: int = 4096
    tprime_policy: str | int | None = None
    phase1_value: float = 0.5
    lam: int = 10
    M: int = 500
    include_truth: bool = False
    pdim_hint: int | None = None
    delta: float = 0.05
    seed: int = 0
    em_iters: int = 100
    cover_budget: int = 5000

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.tprime_policy is None:
            self.tprime_policy = {"ctp_dce": "t23", "ctp_lce": "t23", "marginal": 0}.get(self.pipeline, "sqrt_formula")
        if isinstance(self.tprime_policy, str) and self.tprime_policy.isdigit():
            self.tprime_policy = int(self.tprime_policy)
        if isinstance(self.tprime_policy, str) and self.tprime_policy not in TPRIME_POLICIES:
            raise ValueError(f"unknown T' policy {self.tprime_policy!r}")
        if not 0.0 <= self.phase1_value <= 1.0:
            raise ValueError("phase-1 prediction must lie in [0, 1]")
        if self.T < 1 or self.lam < 1:
            raise ValueError("T and lambda must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def resolve_tprime(cfg: PipelineConfig, stat_dim: int) -> int:
    T, pol = cfg.T, cfg.tprime_policy
    if pol == "t23":
        tp = math.ceil(T ** (2.0 / 3.0))
    elif pol == "t1213":
        tp = math.ceil(T ** (12.0 / 13.0))
    elif pol == "sqrt_formula":
        pdim = cfg.pdim_hint if cfg.pdim_hint is not None else stat_dim + 1
        tp = math.ceil(math.sqrt(T * (pdim * math.log(T) + math.log(1.0 / cfg.delta))))
    else:
        tp = int(pol)
    if cfg.pipeline == "marginal":
        if tp < 0 or tp >= T:
            raise ValueError("phase-1 length must satisfy 0 <= T' < T")
        return tp
    if not 1 <= tp < T:
        raise ValueError(f"T'={tp} violates 1 <= T' < T={T}")
    return tp


@dataclass
class RunResult:
    pipeline: str
    T: int
    seed: int
    transcript: Transcript | None
    reports: dict = field(default_factory=dict)
    tprime: int = 0
    cover_size: int = 0
    wall_ms: float = 0.0
    status: str = "ok"
    message: str = ""
    cover: Cover | None = None

    def metric(self, name: str) -> float:
        r = self.reports.get(name)
        return r.max_abs if r is not None else float("nan")

    def summary(self) -> dict:
        return {
            "pipeline": self.pipeline, "T": self.T, "seed": self.seed,
            "dce": self.metric("dce"), "lce": self.metric("lce"), "mce": self.metric("mce"),
            "tprime": self.tprime, "cover_size": self.cover_size,
            "status": self.status, "message": self.message, "wall_ms": self.wall_ms,
        }

    def to_json(self) -> dict:
        doc = self.summary()
        doc["reports"] = {k: v.to_json() for k, v in self.reports.items()}
        return doc


def derive_seeds(seed: int) -> tuple[int, int]:
    """Independent data and algorithm seeds from one cell seed."""
    data, alg = np.random.SeedSequence(int(seed)).spawn(2)
    return int(data.generate_state(1)[0]), int(alg.generate_state(1)[0])


def _calibrate(dists_or_G, X, y, u, lam, horizon, phase1_cells=None, chunk=CHUNK):
    """Run one engine over rounds (X, y) with uniforms u.

    ``dists_or_G`` is a distinguisher list (evaluated chunk by chunk) or a
    precomputed value matrix.  Returns (yhat, minimax values, realized cells).
    """
    n = X.shape[0]
    D = dists_or_G.shape[1] if isinstance(dists_or_G, np.ndarray) else len(dists_or_G)
    eng = MulticalibrationEngine(D, lam, max(horizon, 1), track_realized=True)
    if phase1_cells is not None:
        eng.seed_realized(phase1_cells)
    yhat = np.empty(n)
    val = np.empty(n)
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        if isinstance(dists_or_G, np.ndarray):
            G = dists_or_G[s:e]
        else:
            G = evaluate_distinguishers(dists_or_G, X[s:e])
        out = eng.step_chunk(G, y[s:e], u[s:e])
        yhat[s:e] = out.yhat
        val[s:e] = out.value
    return yhat, val, eng.R.copy()


def _phase1_cells(dists, X1, y1, value, lam) -> np.ndarray:
    acc = ErrorAccumulator(len(dists), BucketGrid(lam), "mce")
    for s in range(0, X1.shape[0], CHUNK):
        e = min(X1.shape[0], s + CHUNK)
        acc.update(evaluate_distinguishers(dists, X1[s:e]), np.full(e - s, value), y1[s:e])
    return acc.cells


def _truth_reports(model: MixtureModel, tr: Transcript, grid: BucketGrid) -> dict:
    return {"dce": dce(model, tr, grid), "lce": lce(model, tr, grid)}


def run_pipeline(model: MixtureModel, cfg: PipelineConfig) -> RunResult:
    t0 = time.perf_counter()
    res = RunResult(cfg.pipeline, cfg.T, cfg.seed, None)
    try:
        _run(model, cfg, res)
    except EstimatorError as exc:
        res.status, res.message = "estimator_failed", str(exc)
    res.wall_ms = round((time.perf_counter() - t0) * 1000.0, 3)
    return res


def _run(model: MixtureModel, cfg: PipelineConfig, res: RunResult) -> None:
    grid = BucketGrid(cfg.lam)
    T = cfg.T
    tp = resolve_tprime(cfg, model.stat_dim)
    res.tprime = tp
    data_seed, alg_seed = derive_seeds(cfg.seed)
    data = model.sample(T, data_seed)
    X, y = data.x, data.y
    u = np.random.default_rng(alg_seed).random(T)
    yhat = np.empty(T)
    mval = np.zeros(T)
    yhat[:tp] = cfg.phase1_value
    X1, y1 = X[:tp], y[:tp]
    X2, y2, u2 = X[tp:], y[tp:], u[tp:]
    horizon = T - tp

    if cfg.pipeline == "ctp_dce":
        if model.k != 2:
            raise ValueError("ctp_dce handles two components")
        rule = learn_discriminant_2iso(X1)
        lab_all = rule(X)
        cells = np.zeros((2, grid.size))
        acc1 = ErrorAccumulator(2, grid, "mce")
        W = (lab_all[:, None] == np.arange(2)[None, :]).astype(float)
        acc1.update(W[:tp], yhat[:tp], y1)
        lab2 = lab_all[tp:]
        for g in range(2):
            idx = np.flatnonzero(lab2 == g)
            if idx.size == 0:
                continue
            yh, mv, R = _calibrate(np.ones((idx.size, 1)), X2[idx], y2[idx], u2[idx], cfg.lam, horizon,
                                   phase1_cells=acc1.cells[g:g + 1].copy())
            yhat[tp + idx] = yh
            mval[tp + idx] = mv
            cells[g] = R[0]
        for g in range(2):
            if not np.any(lab2 == g):
                cells[g] = acc1.cells[g]
        res.reports["mce"] = ErrorReport("mce", cells, grid, T)

    elif cfg.pipeline == "ctp_lce":
        learned = learn_mixture_em(X1, model.k, model.family, cfg.em_iters, alg_seed)
        dists = [Distinguisher.posterior_of(learned, g) for g in range(model.k)]
        p1 = _phase1_cells(dists, X1, y1, cfg.phase1_value, cfg.lam)
        yh, mv, R = _calibrate(dists, X2, y2, u2, cfg.lam, horizon, p1)
        yhat[tp:], mval[tp:] = yh, mv
        res.reports["mce"] = ErrorReport("mce", R, grid, T)

    elif cfg.pipeline in ("mo_dce", "mo_lce"):
        mode = cfg.pipeline[3:]
        fam = CandidateFamily.from_data(X1, model.k, model.family, cfg.M, alg_seed)
        truth = model if cfg.include_truth else None
        dists = build_distinguisher_class(fam, mode, truth)
        F = evaluate_distinguishers(dists, X1).T
        forced = range(len(dists) - model.k, len(dists)) if truth is not None else ()
        cover = greedy_cover(F, 1.0 / tp, forced)
        cover.distinguishers, cover.mode, cover.truth_included = dists, mode, truth is not None
        res.cover, res.cover_size = cover, len(cover)
        if len(cover) > cfg.cover_budget:
            log.warning("cover size %d exceeds budget %d", len(cover), cfg.cover_budget)
            res.message = f"cover size {len(cover)} exceeds budget {cfg.cover_budget}"
        members = cover.members
        p1 = F[cover.selected].T
        acc = ErrorAccumulator(len(members), grid, "mce")
        acc.update(p1, yhat[:tp], y1)
        yh, mv, R = _calibrate(members, X2, y2, u2, cfg.lam, horizon, acc.cells)
        yhat[tp:], mval[tp:] = yh, mv
        res.reports["mce"] = ErrorReport("mce", R, grid, T)

    else:  # marginal
        acc = ErrorAccumulator(1, grid, "mce")
        acc.update(np.ones((tp, 1)), yhat[:tp], y1)
        yh, mv, R = _calibrate(np.ones((T - tp, 1)), X2, y2, u2, cfg.lam, horizon, acc.cells)
        yhat[tp:], mval[tp:] = yh, mv
        res.reports["mce"] = ErrorReport("mce", R, grid, T)

    phase = np.zeros(T, dtype=np.int8)
    phase[tp:] = 1
    tr = Transcript(X, y, yhat, phase=phase, minimax_value=mval)
    res.transcript = tr
    res.reports.update(_truth_reports(model, tr, grid))


def run_ctp_dce(model, config: PipelineConfig) -> RunResult:
    return run_pipeline(model, _with(config, "ctp_dce"))


def run_ctp_lce(model, config: PipelineConfig) -> RunResult:
    return run_pipeline(model, _with(config, "ctp_lce"))


def run_multiobjective(model, config: PipelineConfig, mode: str = "dce") -> RunResult:
    return run_pipeline(model, _with(config, f"mo_{mode}"))


def _with(cfg: PipelineConfig, pipeline: str) -> PipelineConfig:
    d = cfg.to_json()
    d["pipeline"] = pipeline
    return PipelineConfig(**d)
