from __future__ import annotations

import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subcal import _backend

try:
    CY = _backend.get_kernels("cython")
except ImportError:  # extension not built
    CY = None
PY = _backend.get_kernels("python")
needs_cython = pytest.mark.skipif(CY is None, reason="compiled kernels not built")


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        _backend.get_kernels("fortran")


@needs_cython
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 80), st.integers(1, 10), st.floats(0.01, 0.6), st.integers(0, 5), st.integers(0, 10_000))
def test_greedy_cover_backends_agree(n, T, eps, n_forced, seed):
    rng = np.random.default_rng(seed)
    F = np.ascontiguousarray(np.round(rng.random((n, T)) * 4) / 4)
    order = rng.permutation(n).astype(np.int64)
    nf = min(n_forced, n)
    a = CY.greedy_cover(F, eps * T, order, nf)
    b = PY.greedy_cover(F, eps * T, order, nf)
    assert np.array_equal(np.asarray(a), np.asarray(b))


@needs_cython
@pytest.mark.parametrize("k", [1, 2, 3])
def test_indicator_matrix_backends_agree(k):
    rng = np.random.default_rng(k)
    n, p, M = 300, 4, 20
    tx = rng.normal(size=(n, p))
    thetas = rng.normal(size=(M * k, p))
    offsets = rng.normal(size=M * k)
    thetas[1] = thetas[0]
    offsets[1] = offsets[0]  # exact ties go to the lower index
    cols = rng.integers(0, M, 50).astype(np.int64)
    gs = rng.integers(0, k, 50).astype(np.int64)
    oc = rng.permutation(60)[:50].astype(np.int64)
    a, b = np.zeros((n, 60)), np.zeros((n, 60))
    CY.indicator_matrix(tx, thetas, offsets, k, cols, gs, a, oc)
    PY.indicator_matrix(tx, thetas, offsets, k, cols, gs, b, oc)
    assert np.array_equal(a, b)


def test_pure_fallback_selected_by_environment():
    code = ("import json, numpy as np; from subcal import _backend;"
            "from subcal.mixture_model import two_isotropic, LabelRule;"
            "from subcal.pipelines import PipelineConfig, run_pipeline;"
            "m = two_isotropic(1.0, label_rule=LabelRule('constant', {'p': 0.3}));"
            "r = run_pipeline(m, PipelineConfig('mo_dce', 600, M=15, seed=2));"
            "print(json.dumps([_backend.BACKEND, r.transcript.yhat.tolist()]))")
    env = dict(os.environ, SUBCAL_PURE="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    name, yhat_pure = json.loads(out.stdout)
    assert name == "python"
    from subcal.mixture_model import LabelRule, two_isotropic
    from subcal.pipelines import PipelineConfig, run_pipeline

    m = two_isotropic(1.0, label_rule=LabelRule("constant", {"p": 0.3}))
    r = run_pipeline(m, PipelineConfig("mo_dce", 600, M=15, seed=2))
    assert r.transcript.yhat.tolist() == yhat_pure
