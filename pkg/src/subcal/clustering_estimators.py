"""Phase-1 structure learners: a principal-direction split for two isotropic
clusters, and EM for general exponential-family mixtures."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .mixture_model import ExpFamilyComponent, MixtureModel

EIG_FLOOR = 1e-6


class EstimatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnedDiscriminant:
    """Nearest-estimated-mean rule; ties go to the lower index."""

    means: np.ndarray

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1 and x.size == self.d
        X = x.reshape(1, -1) if single else x.reshape(x.shape[0], -1)
        d2 = ((X[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        out = np.argmin(d2, axis=1)
        return int(out[0]) if single else out

    def boundary_point(self) -> np.ndarray:
        return 0.5 * (self.means[0] + self.means[1])

    def normal(self) -> np.ndarray:
        return self.means[1] - self.means[0]

    def to_json(self) -> dict:
        return {"kind": "nearest_mean", "means": self.means.tolist()}


def _top_direction(C: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(C)
    u = vecs[:, -1]
    # fix the sign so the largest-magnitude entry is positive
    if u[np.argmax(np.abs(u))] < 0:
        u = -u
    return u


def learn_discriminant_2iso(X) -> LearnedDiscriminant:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n, d = X.shape
    if n < max(4 * d, 68):
        raise EstimatorError(f"need at least max(4d, 68) = {max(4 * d, 68)} samples, got {n}")
    mean = X.mean(axis=0)
    Z = X - mean
    C = Z.T @ Z / n
    if not np.all(np.isfinite(C)) or np.trace(C) <= 0:
        raise EstimatorError("degenerate sample: zero variance")
    u = _top_direction(C)
    side = Z @ u > 0
    if side.all() or not side.any():
        raise EstimatorError("principal split left one side empty")
    means = np.stack([X[~side].mean(axis=0), X[side].mean(axis=0)])
    return LearnedDiscriminant(means)


# ---------------------------------------------------------------- EM

def _floor_cov(S: np.ndarray) -> np.ndarray:
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    return (vecs * np.maximum(vals, EIG_FLOOR)) @ vecs.T


def _components(family: str, means, covs, X) -> tuple[ExpFamilyComponent, ...]:
    d = X.shape[1]
    out = []
    for mu, S in zip(means, covs):
        if family == "gaussian_full":
            out.append(ExpFamilyComponent.gaussian(mu, _floor_cov(S)))
        elif family == "gaussian_isotropic":
            out.append(ExpFamilyComponent.isotropic(mu, max(float(np.trace(S)) / d, EIG_FLOOR)))
        else:
            out.append(ExpFamilyComponent.poisson(np.maximum(mu, EIG_FLOOR)))
    return tuple(out)


def _m_step(X: np.ndarray, R: np.ndarray, family: str):
    nk = R.sum(axis=0)
    if np.any(nk <= 0):
        raise EstimatorError("empty component during EM")
    w = nk / nk.sum()
    means = (R.T @ X) / nk[:, None]
    covs = []
    for g in range(R.shape[1]):
        Z = X - means[g]
        covs.append((Z * R[:, g:g + 1]).T @ Z / nk[g])
    return w, means, covs


def learn_mixture_em(X, k: int, family: str = "gaussian_full", iters: int = 100, seed=0) -> MixtureModel:
    """EM with a fixed iteration count.

    Initial responsibilities split the sample into k quantile bands along the
    top principal direction.  ``seed`` only breaks exact projection ties, so
    the result is deterministic given (X, seed).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n, d = X.shape
    if k < 1:
        raise EstimatorError("k must be >= 1")
    if n < 10 * k * d:
        raise EstimatorError(f"need at least 10*k*d = {10 * k * d} samples, got {n}")
    if not np.all(np.isfinite(X)):
        raise EstimatorError("non-finite samples")
    rng = np.random.default_rng(seed)
    Z = X - X.mean(axis=0)
    proj = Z @ _top_direction(Z.T @ Z / n) if d > 1 or k > 1 else np.zeros(n)
    order = np.lexsort((rng.random(n), proj))
    R = np.zeros((n, k))
    for g, idx in enumerate(np.array_split(order, k)):
        R[idx, g] = 1.0
    model = None
    for _ in range(max(int(iters), 1)):
        w, means, covs = _m_step(X, R, family)
        model = MixtureModel(w, _components(family, means, covs, X), None, w_min=0.0)
        s = model.log_joint_scores(X)
        R = np.exp(s - logsumexp(s, axis=1, keepdims=True))
        if not np.all(np.isfinite(R)):
            raise EstimatorError("NaN responsibilities")
    return model


def misassignment_rate(rule, model: MixtureModel, X) -> float:
    """Fraction of points where ``rule`` disagrees with the true discriminant,
    minimised over the two label orders."""
    a = np.asarray(rule(X))
    b = model.discriminant(X)
    err = float(np.mean(a != b))
    return min(err, 1.0 - err) if model.k == 2 else err
