"""Command-line entry point: generate, run, sweep, verify-cover, shatter, report."""
from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import harness
from .buckets_metrics import BucketGrid
from .covering import Cover, empirical_shatter_dim, verify_cover
from .mixture_model import MixtureModel
from .online_calibration import write_trace
from .pipelines import PIPELINES, PipelineConfig, run_pipeline


def _tprime(v: str):
    return int(v) if v.isdigit() else v


def cmd_generate(a) -> int:
    model = MixtureModel.load(a.model)
    s = model.sample(a.n, a.seed)
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(model.d)] + ["y", "component"])
        for x, y, g in s:
            w.writerow([repr(float(v)) for v in x] + [y, g])
    print(f"wrote {a.n} rows to {a.out}")
    return 0


def _run_from(model_doc: dict, cfg_doc: dict, out: str, cover_out: str | None, trace: str | None):
    model = MixtureModel.from_json(model_doc)
    cfg = PipelineConfig(**cfg_doc)
    res = run_pipeline(model, cfg)
    if out.endswith(".csv"):
        tr = res.transcript
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{j}" for j in range(model.d)] + ["y", "yhat", "phase", "minimax_value"])
            if tr is not None:
                for t in range(len(tr)):
                    w.writerow([t] + [repr(float(v)) for v in tr.x[t]] +
                               [int(tr.y[t]), repr(float(tr.yhat[t])), int(tr.phase[t]),
                                repr(float(tr.minimax_value[t]))])
    else:
        doc = res.to_json()
        doc["config"] = cfg.to_json()
        with open(out, "w") as fh:
            json.dump(doc, fh, indent=2)
    if cover_out and res.cover is not None:
        res.cover.save(cover_out)
    if trace and res.transcript is not None:
        write_trace(trace, res.transcript, BucketGrid(cfg.lam))
    return res, cfg


def cmd_run(a) -> int:
    if a.from_manifest:
        man = harness.read_manifest(a.from_manifest)
        spec = man["spec"]
        out = a.out or man["output"]
        res, cfg = _run_from(spec["model"], spec["config"], out, a.cover_out, a.trace)
    else:
        if not (a.model and a.pipeline and a.T):
            print("run needs --model, --pipeline and --T (or --from-manifest)", file=sys.stderr)
            return 2
        with open(a.model) as fh:
            model_doc = json.load(fh)
        cfg_doc = PipelineConfig(a.pipeline, a.T, tprime_policy=_tprime(a.tprime_policy) if a.tprime_policy else None,
                                 lam=a.lam, M=a.M, include_truth=a.include_truth, seed=a.seed).to_json()
        out = a.out or "run.json"
        res, cfg = _run_from(model_doc, cfg_doc, out, a.cover_out, a.trace)
        manifest = a.manifest or out.rsplit(".", 1)[0] + ".manifest.json"
        harness.write_manifest(manifest, "run", {"model": model_doc, "config": cfg_doc}, out, [a.seed])
    s = res.summary()
    print(json.dumps({k: s[k] for k in ("pipeline", "T", "seed", "dce", "lce", "mce", "tprime", "cover_size",
                                       "status")}))
    return 0 if res.status == "ok" else 1


def cmd_sweep(a) -> int:
    if a.from_manifest:
        spec = harness.SweepSpec.from_json(harness.read_manifest(a.from_manifest)["spec"])
    else:
        with open(a.spec) as fh:
            spec = harness.SweepSpec.from_json(json.load(fh))
    out = a.out or spec.output
    curve = harness.run_sweep(spec, out, a.manifest)
    bad = sum(r["status"] != "ok" for r in curve.rows)
    print(f"{len(curve.rows)} rows ({bad} failed) -> {out}")
    return 0


def cmd_verify_cover(a) -> int:
    cover = Cover.load(a.cover)
    model = MixtureModel.load(a.model)
    X = model.sample_features(a.n, np.random.default_rng(a.seed))
    res = verify_cover(cover, cover.distinguishers, X, a.eps, a.factor)
    print(f"{'PASS' if res.passed else 'FAIL'} worst_gap={res.worst_gap:.6g} radius={res.radius:.6g} "
          f"worst_index={res.worst_index}")
    return 0 if res.passed else 1


def cmd_shatter(a) -> int:
    rng = np.random.default_rng(a.seed)
    if a.table:
        V = np.loadtxt(a.table, delimiter=",", ndmin=2)
    elif a.kind == "ratio1d":
        x = rng.uniform(-3, 3, size=a.points)
        slope = rng.normal(size=a.functions)
        icpt = rng.normal(size=a.functions)
        V = np.exp(slope[:, None] * x[None, :] + icpt[:, None])
    else:
        P = rng.normal(size=(a.points, 2))
        w = rng.normal(size=(a.functions, 2))
        b = rng.normal(size=a.functions)
        V = (P @ w.T + b > 0).T.astype(float)
    dim = empirical_shatter_dim(V, a.max_thresholds)
    print(f"shatter_dim={dim}")
    return 0


def cmd_report(a) -> int:
    try:
        tab = harness.report(a.curves, a.metric, a.gap)
    except harness.SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(tab.text())
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(tab.csv())
    return 0 if tab.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subcal", description="Calibration on endogenous subgroups.")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="sample labeled data from a model")
    g.add_argument("--model", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run one pipeline")
    r.add_argument("--model")
    r.add_argument("--pipeline", choices=PIPELINES)
    r.add_argument("--T", type=int)
    r.add_argument("--tprime-policy")
    r.add_argument("--lambda", dest="lam", type=int, default=10)
    r.add_argument("--M", type=int, default=500)
    r.add_argument("--include-truth", action="store_true")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out")
    r.add_argument("--cover-out")
    r.add_argument("--trace")
    r.add_argument("--manifest")
    r.add_argument("--from-manifest")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a sweep spec")
    s.add_argument("--spec")
    s.add_argument("--out")
    s.add_argument("--manifest")
    s.add_argument("--from-manifest")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify-cover", help="check a saved cover on fresh samples")
    v.add_argument("--cover", required=True)
    v.add_argument("--model", required=True)
    v.add_argument("--n", type=int, default=2000)
    v.add_argument("--seed", type=int, default=1)
    v.add_argument("--eps", type=float)
    v.add_argument("--factor", type=float, default=4.0)
    v.set_defaults(func=cmd_verify_cover)

    h = sub.add_parser("shatter", help="empirical pseudo-shattering dimension")
    h.add_argument("--kind", choices=["ratio1d", "halfspace2d"], default="halfspace2d")
    h.add_argument("--table", help="CSV of function values, one row per function")
    h.add_argument("--functions", type=int, default=500)
    h.add_argument("--points", type=int, default=3)
    h.add_argument("--max-thresholds", type=int, default=32)
    h.add_argument("--seed", type=int, default=0)
    h.set_defaults(func=cmd_shatter)

    rp = sub.add_parser("report", help="slopes and ctp-vs-mo gaps from sweep CSVs")
    rp.add_argument("curves", nargs="+")
    rp.add_argument("--metric", default="dce")
    rp.add_argument("--gap", type=float, default=0.05)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd == "sweep" and not (args.spec or args.from_manifest):
        print("sweep needs --spec or --from-manifest", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
