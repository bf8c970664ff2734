"""Sweeps over (model, pipeline, T, seed), slope fits and comparison reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy
from scipy import stats

from . import _backend
from .mixture_model import LabelRule, MixtureModel, two_isotropic
from .pipelines import PIPELINES, PipelineConfig, run_pipeline

SCHEMA_VERSION = 1
COLUMNS = ["schema_version", "pipeline", "group", "T", "seed", "dce", "lce", "mce",
           "tprime", "cover_size", "status", "wall_ms"]
DATA_COLUMNS = [c for c in COLUMNS if c != "wall_ms"]
WORKERS_ENV = "SUBCAL_WORKERS"


class SchemaError(ValueError):
    pass


@dataclass
class SweepSpec:
    """Everything a sweep needs; its JSON form is the manifest's ``spec``.

    Models come either from ``models`` ({group name: model JSON}) or from a
    separation grid ``gammas`` of two-isotropic mixtures sharing ``label_rule``.
    """

    pipelines: list = field(default_factory=lambda: ["mo_dce"])
    T_grid: list = field(default_factory=lambda: [1024, 2048, 4096])
    seeds: list = field(default_factory=lambda: list(range(5)))
    models: dict = field(default_factory=dict)
    gammas: list = field(default_factory=list)
    d: int = 2
    label_rule: dict | None = None
    lam: int = 10
    tprime_policy: dict = field(default_factory=dict)
    M: int = 500
    include_truth: bool = False
    output: str = "sweep.csv"

    def __post_init__(self):
        if isinstance(self.seeds, int):
            self.seeds = list(range(self.seeds))
        for p in self.pipelines:
            if p not in PIPELINES:
                raise ValueError(f"unknown pipeline {p!r}")
        if not self.models and not self.gammas:
            raise ValueError("sweep needs models or a separation grid")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "SweepSpec":
        return cls(**doc)

    def model_docs(self) -> dict:
        """{group: model JSON}, building the separation grid if given."""
        out = dict(self.models)
        rule = LabelRule(self.label_rule["kind"], self.label_rule["params"]) if self.label_rule else None
        for g in self.gammas:
            out[f"gamma={g:g}"] = two_isotropic(float(g), d=self.d, label_rule=rule).to_json()
        return out

    def cells(self) -> list[tuple]:
        docs = self.model_docs()
        return [(group, docs[group], p, int(T), int(s)) for group in docs for p in self.pipelines
                for T in self.T_grid for s in self.seeds]

    def hash(self) -> str:
        return spec_hash(self.to_json())


def spec_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def versions() -> dict:
    from importlib import metadata

    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "package": pkg, "backend": _backend.BACKEND}


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _run_cell(args) -> dict:
    group, model_doc, pipeline, T, seed, lam, tprime, M, include_truth = args
    row = {"schema_version": SCHEMA_VERSION, "pipeline": pipeline, "group": group, "T": T, "seed": seed}
    try:
        model = MixtureModel.from_json(model_doc)
        cfg = PipelineConfig(pipeline, T, tprime_policy=tprime, lam=lam, M=M, include_truth=include_truth,
                             seed=seed)
        res = run_pipeline(model, cfg)
        s = res.summary()
        row.update({k: s[k] for k in ("dce", "lce", "mce", "tprime", "cover_size", "status", "wall_ms")})
    except Exception as exc:  # a failing cell becomes a tagged row
        nan = float("nan")
        row.update({"dce": nan, "lce": nan, "mce": nan, "tprime": 0, "cover_size": 0,
                    "status": f"failed:{type(exc).__name__}", "wall_ms": 0.0})
    return row


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class ErrorCurve:
    rows: list

    def ok_rows(self) -> list:
        return [r for r in self.rows if r["status"] == "ok"]

    def medians(self, pipeline: str, metric: str, group: str | None = None) -> dict:
        by_T: dict = {}
        for r in self.ok_rows():
            if r["pipeline"] == pipeline and (group is None or r["group"] == group):
                by_T.setdefault(int(r["T"]), []).append(float(r[metric]))
        return {T: float(np.median(v)) for T, v in sorted(by_T.items())}

    def groups(self) -> list:
        return sorted({r["group"] for r in self.rows})

    def pipelines(self) -> list:
        return sorted({r["pipeline"] for r in self.rows})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path) -> "ErrorCurve":
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            if rd.fieldnames is None or "schema_version" not in rd.fieldnames:
                raise SchemaError(f"{path}: missing schema_version column")
            if list(rd.fieldnames) != COLUMNS:
                raise SchemaError(f"{path}: unexpected columns {rd.fieldnames}")
            rows = []
            for r in rd:
                r["schema_version"] = int(r["schema_version"])
                r["T"] = int(r["T"])
                r["seed"] = int(r["seed"])
                for k in ("dce", "lce", "mce", "wall_ms"):
                    r[k] = float(r[k])
                r["tprime"] = int(r["tprime"])
                r["cover_size"] = int(r["cover_size"])
                rows.append(r)
        return cls(rows)


def run_sweep(spec: SweepSpec, output: str | None = None, manifest: str | None = None,
              workers: int | None = None) -> ErrorCurve:
    """Run every cell and write the CSV (plus a manifest JSON next to it)."""
    tp = spec.tprime_policy
    jobs = [(g, doc, p, T, s, spec.lam, tp.get(p), spec.M, spec.include_truth) for g, doc, p, T, s in spec.cells()]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    curve = ErrorCurve(rows)
    output = output or spec.output
    if output:
        with open(output, "w", newline="") as fh:
            fh.write(curve.to_csv())
        manifest = manifest or os.path.splitext(output)[0] + ".manifest.json"
        write_manifest(manifest, "sweep", spec.to_json(), output, [r["seed"] for r in rows])
    return curve


def write_manifest(path, kind: str, spec_doc: dict, output: str, seeds) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, "spec": spec_doc, "spec_hash": spec_hash(spec_doc),
           "versions": versions(), "seeds": sorted(set(int(s) for s in seeds)), "output": output}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def read_manifest(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError("manifest schema version mismatch")
    if spec_hash(doc["spec"]) != doc["spec_hash"]:
        raise SchemaError("manifest spec hash does not match its spec")
    return doc


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    slope_stderr: float
    residual_stderr: float
    points: dict

    def to_json(self) -> dict:
        return asdict(self)


def fit_rate_slope(curve, pipeline: str | None = None, metric: str = "dce", group: str | None = None) -> SlopeFit:
    """OLS of log(median metric) on log T; zero medians are dropped."""
    if isinstance(curve, dict):
        pts = {int(k): float(v) for k, v in curve.items()}
    else:
        pts = curve.medians(pipeline, metric, group)
    pts = {T: v for T, v in pts.items() if v > 0 and math.isfinite(v)}
    if len(pts) < 3:
        raise ValueError("need at least 3 T values with positive median error")
    x = np.log(np.array(list(pts.keys()), dtype=float))
    y = np.log(np.array(list(pts.values())))
    fit = stats.linregress(x, y)
    resid = y - (fit.intercept + fit.slope * x)
    dof = max(len(x) - 2, 1)
    return SlopeFit(float(fit.slope), float(fit.intercept), float(fit.stderr),
                    float(math.sqrt((resid ** 2).sum() / dof)), pts)


@dataclass
class ReportTable:
    slopes: list
    gaps: list
    passed: bool

    def text(self) -> str:
        lines = ["group\tpipeline\tmetric\tslope\tstderr"]
        for s in self.slopes:
            lines.append(f"{s['group']}\t{s['pipeline']}\t{s['metric']}\t{s['slope']:.4f}\t{s['stderr']:.4f}")
        if self.gaps:
            lines.append("group\tgap(ctp_dce-mo_dce)\tthreshold\tpass")
            for g in self.gaps:
                lines.append(f"{g['group']}\t{g['gap']:.4f}\t{g['threshold']}\t{'pass' if g['pass'] else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "group", "pipeline", "metric", "value", "stderr", "pass"])
        for s in self.slopes:
            w.writerow(["slope", s["group"], s["pipeline"], s["metric"], repr(s["slope"]), repr(s["stderr"]), ""])
        for g in self.gaps:
            w.writerow(["gap", g["group"], "ctp_dce-mo_dce", "dce", repr(g["gap"]), "", int(g["pass"])])
        return buf.getvalue()


def report(paths, metric: str = "dce", gap_threshold: float = 0.05) -> ReportTable:
    if not paths:
        raise ValueError("report needs at least one curve file")
    curves = [ErrorCurve.from_csv(p) for p in paths]
    schemas = {r["schema_version"] for c in curves for r in c.rows}
    if len(schemas) > 1:
        raise SchemaError(f"mixed schema versions {sorted(schemas)}")
    curve = ErrorCurve([r for c in curves for r in c.rows])
    slopes, fits = [], {}
    for group in curve.groups():
        for p in curve.pipelines():
            m = "dce" if p == "marginal" and metric not in ("dce", "lce", "mce") else metric
            try:
                f = fit_rate_slope(curve, p, m, group)
            except ValueError:
                continue
            fits[(group, p)] = f
            slopes.append({"group": group, "pipeline": p, "metric": m, "slope": f.slope, "stderr": f.slope_stderr})
    gaps = []
    for group in curve.groups():
        if (group, "ctp_dce") in fits and (group, "mo_dce") in fits:
            gap = fits[(group, "ctp_dce")].slope - fits[(group, "mo_dce")].slope
            gaps.append({"group": group, "gap": gap, "threshold": gap_threshold, "pass": gap >= gap_threshold})
    return ReportTable(slopes, gaps, all(g["pass"] for g in gaps))
