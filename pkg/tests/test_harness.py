from __future__ import annotations

import json

import numpy as np
import pytest

from subcal import harness
from subcal.harness import (COLUMNS, DATA_COLUMNS, ErrorCurve, SchemaError, SweepSpec, fit_rate_slope, read_manifest,
                            report, run_sweep)
from subcal.mixture_model import ExpFamilyComponent, MixtureModel

RULE = {"kind": "logistic", "params": {"w": [1.5, 0.0], "b": 1.5}}


def small_spec(**kw):
    base = dict(pipelines=["marginal"], T_grid=[256, 512, 1024], seeds=5, gammas=[1.0], label_rule=RULE)
    base.update(kw)
    return SweepSpec(**base)


def synthetic_rows(pipeline, group, fn, Ts=(1024, 4096, 16384, 65536), seeds=3, schema=1):
    rows = []
    for T in Ts:
        for s in range(seeds):
            v = fn(T)
            rows.append({"schema_version": schema, "pipeline": pipeline, "group": group, "T": T, "seed": s,
                         "dce": v, "lce": v, "mce": v, "tprime": 0, "cover_size": 0, "status": "ok",
                         "wall_ms": 1.0})
    return rows


def write_curve(path, rows):
    path.write_text(ErrorCurve(rows).to_csv())
    return str(path)


def test_sweep_row_count_columns_and_manifest(tmp_path):
    out = tmp_path / "s.csv"
    curve = run_sweep(small_spec(), str(out))
    assert len(curve.rows) == 15
    assert out.read_text().splitlines()[0] == ",".join(COLUMNS)
    man = read_manifest(tmp_path / "s.manifest.json")
    assert man["kind"] == "sweep" and man["seeds"] == [0, 1, 2, 3, 4]
    assert set(man["versions"]) >= {"python", "numpy", "scipy", "backend"}
    back = ErrorCurve.from_csv(out)
    assert [r["dce"] for r in back.rows] == [r["dce"] for r in curve.rows]


def test_sweep_rerun_data_identical(tmp_path):
    a = run_sweep(small_spec(T_grid=[256, 512], seeds=2), str(tmp_path / "a.csv"))
    b = run_sweep(small_spec(T_grid=[256, 512], seeds=2), str(tmp_path / "b.csv"))
    assert [[r[c] for c in DATA_COLUMNS] for r in a.rows] == [[r[c] for c in DATA_COLUMNS] for r in b.rows]


def test_failing_cell_becomes_tagged_row(tmp_path):
    c = ExpFamilyComponent.isotropic([0.0, 0.0])
    three = MixtureModel(np.ones(3) / 3, (c, c, c), None)
    spec = SweepSpec(pipelines=["ctp_dce"], T_grid=[256], seeds=1, models={"three": three.to_json()})
    curve = run_sweep(spec, str(tmp_path / "f.csv"))
    assert curve.rows[0]["status"].startswith("failed:")
    assert np.isnan(curve.rows[0]["dce"])
    assert ErrorCurve.from_csv(tmp_path / "f.csv").ok_rows() == []


def test_spec_validation_and_hash():
    with pytest.raises(ValueError):
        SweepSpec(pipelines=["bogus"], gammas=[1.0])
    with pytest.raises(ValueError):
        SweepSpec(pipelines=["marginal"])
    a, b = small_spec(), small_spec()
    assert a.hash() == b.hash() and a.hash() != small_spec(seeds=6).hash()
    assert SweepSpec.from_json(json.loads(json.dumps(a.to_json()))).hash() == a.hash()
    assert list(a.model_docs()) == ["gamma=1"]


def test_tampered_manifest_rejected(tmp_path):
    run_sweep(small_spec(T_grid=[256], seeds=1), str(tmp_path / "s.csv"))
    p = tmp_path / "s.manifest.json"
    doc = json.loads(p.read_text())
    doc["spec"]["lam"] = 11
    p.write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        read_manifest(p)


def test_slope_exact_power_laws():
    Ts = [2 ** k for k in range(10, 18, 2)]
    assert fit_rate_slope({T: 3 * T ** (2 / 3) for T in Ts}).slope == pytest.approx(2 / 3, abs=1e-12)
    assert fit_rate_slope({T: 0.7 * T ** 0.5 for T in Ts}).slope == pytest.approx(0.5, abs=1e-12)
    fit = fit_rate_slope({T: T ** 0.5 for T in Ts})
    assert fit.residual_stderr == pytest.approx(0, abs=1e-12)


def test_slope_drops_zero_medians_and_needs_three_points():
    with pytest.raises(ValueError):
        fit_rate_slope({100: 1.0, 200: 0.0, 400: 2.0})
    assert fit_rate_slope({100: 10.0, 200: 0.0, 400: 40.0, 800: 80.0}).points.keys() == {100, 400, 800}


def test_medians_per_T():
    rows = synthetic_rows("mo_dce", "g", lambda T: float(T))
    rows[0]["dce"] = 1e9
    med = ErrorCurve(rows).medians("mo_dce", "dce")
    assert med[1024] == 1024.0


def test_report_gap_pass_and_fail(tmp_path):
    ctp = synthetic_rows("ctp_dce", "g", lambda T: T ** (2 / 3))
    mo = synthetic_rows("mo_dce", "g", lambda T: 2 * T ** 0.5)
    tab = report([write_curve(tmp_path / "a.csv", ctp), write_curve(tmp_path / "b.csv", mo)])
    assert tab.passed
    assert tab.gaps[0]["gap"] == pytest.approx(1 / 6, abs=1e-12)
    assert "pass" in tab.text() and tab.csv().startswith("kind,")
    close = synthetic_rows("mo_dce", "g", lambda T: T ** 0.64)
    tab = report([write_curve(tmp_path / "a.csv", ctp), write_curve(tmp_path / "c.csv", close)])
    assert not tab.passed


def test_report_rejects_mixed_schema_and_empty(tmp_path):
    a = write_curve(tmp_path / "a.csv", synthetic_rows("ctp_dce", "g", lambda T: T ** 0.6))
    b = write_curve(tmp_path / "b.csv", synthetic_rows("mo_dce", "g", lambda T: T ** 0.5, schema=2))
    with pytest.raises(SchemaError):
        report([a, b])
    with pytest.raises(ValueError):
        report([])
    bad = tmp_path / "bad.csv"
    bad.write_text("pipeline,T\nmo_dce,5\n")
    with pytest.raises(SchemaError):
        report([str(bad)])


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv(harness.WORKERS_ENV, "3")
    assert harness.worker_count() == 3
    monkeypatch.setenv(harness.WORKERS_ENV, "x")
    assert harness.worker_count() == 1


def test_parallel_sweep_matches_serial(tmp_path):
    spec = small_spec(T_grid=[256], seeds=3)
    a = run_sweep(spec, str(tmp_path / "a.csv"), workers=1)
    b = run_sweep(spec, str(tmp_path / "b.csv"), workers=2)
    assert [[r[c] for c in DATA_COLUMNS] for r in a.rows] == [[r[c] for c in DATA_COLUMNS] for r in b.rows]
