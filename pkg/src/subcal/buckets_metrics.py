"""Bucket grid and the three calibration-error functionals.

All three errors share one shape: a matrix of signed sums indexed by
(weighting row, bucket), reduced by the max absolute entry.  DCE weights a
round by the indicator of its most likely component, LCE by the component
posterior, and MCE by arbitrary distinguisher values in [0, 1].
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

# Predictions within this distance of a bucket midpoint count as ties.
_TIE_EPS = 1e-9


@dataclass(frozen=True)
class BucketGrid:
    lam: int

    def __post_init__(self):
        if int(self.lam) != self.lam or self.lam < 1:
            raise ValueError("lambda must be a positive integer")
        object.__setattr__(self, "lam", int(self.lam))

    @property
    def values(self) -> np.ndarray:
        return np.arange(self.lam + 1) / self.lam

    @property
    def size(self) -> int:
        return self.lam + 1

    def bucket_index(self, yhat) -> np.ndarray:
        """Nearest grid index; exact midpoints go to the lower bucket."""
        yhat = np.asarray(yhat, dtype=float)
        if np.any((yhat < 0) | (yhat > 1)) or np.any(np.isnan(yhat)):
            raise ValueError("predictions must lie in [0, 1]")
        idx = np.ceil(yhat * self.lam - 0.5 - _TIE_EPS).astype(np.int64)
        return np.clip(idx, 0, self.lam)

    def bucket_of(self, yhat: float) -> float:
        return int(self.bucket_index(yhat)) / self.lam


def bucket_of(grid: BucketGrid, yhat: float) -> float:
    return grid.bucket_of(yhat)


@dataclass
class Transcript:
    """Per-round record of features, outcomes and realized predictions."""

    x: np.ndarray
    y: np.ndarray
    yhat: np.ndarray
    phase: np.ndarray | None = None
    cluster: np.ndarray | None = None
    minimax_value: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x.reshape(-1, 1) if self.x.size else self.x.reshape(0, 1)
        self.y = np.asarray(self.y).astype(np.int8)
        self.yhat = np.asarray(self.yhat, dtype=float)
        n = self.x.shape[0]
        if self.y.shape != (n,) or self.yhat.shape != (n,):
            raise ValueError("transcript arrays must have consistent lengths")
        if n and (np.any((self.yhat < 0) | (self.yhat > 1)) or not np.all((self.y == 0) | (self.y == 1))):
            raise ValueError("yhat must lie in [0,1] and y in {0,1}")

    def __len__(self) -> int:
        return self.x.shape[0]

    @classmethod
    def empty(cls, d: int) -> "Transcript":
        return cls(np.zeros((0, d)), np.zeros(0, dtype=np.int8), np.zeros(0))

    def permuted(self, perm: np.ndarray) -> "Transcript":
        return Transcript(self.x[perm], self.y[perm], self.yhat[perm])


@dataclass
class ErrorReport:
    metric: str
    cells: np.ndarray
    grid: BucketGrid
    T: int = 0

    @property
    def max_abs(self) -> float:
        if self.cells.size == 0:
            return 0.0
        return float(np.abs(self.cells).max())

    @property
    def argmax_cell(self) -> tuple[int, float]:
        if self.cells.size == 0:
            return (-1, float("nan"))
        g, v = np.unravel_index(int(np.argmax(np.abs(self.cells))), self.cells.shape)
        return int(g), float(self.grid.values[v])

    def to_json(self) -> dict:
        g, v = self.argmax_cell
        return {
            "metric": self.metric,
            "T": self.T,
            "lambda": self.grid.lam,
            "max_abs": self.max_abs,
            "argmax_g": g,
            "argmax_v": v,
            "cells": self.cells.tolist(),
        }

    def csv_row(self) -> list:
        g, v = self.argmax_cell
        return [self.metric, self.T, repr(self.max_abs), g, v]

    @classmethod
    def from_json(cls, doc: dict) -> "ErrorReport":
        return cls(doc["metric"], np.asarray(doc["cells"], dtype=float), BucketGrid(doc["lambda"]), int(doc["T"]))


SUMMARY_HEADER = ["metric", "T", "max_abs", "argmax_g", "argmax_v"]


def summary_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


class ErrorAccumulator:
    """Running (row, bucket) signed sums, fed chunk by chunk.

    Contributions are added strictly in round order, so feeding the same
    rounds in any chunking yields bitwise-identical cells.
    """

    def __init__(self, n_rows: int, grid: BucketGrid, metric: str = "mce"):
        self.grid = grid
        self.metric = metric
        self.cells = np.zeros((n_rows, grid.size))
        self.T = 0

    def update(self, weights: np.ndarray, yhat: np.ndarray, y: np.ndarray) -> None:
        weights = np.asarray(weights, dtype=float)
        yhat = np.asarray(yhat, dtype=float)
        if weights.ndim == 1:
            weights = weights[:, None]
        if weights.shape != (yhat.size, self.cells.shape[0]):
            raise ValueError("weights must have shape (rounds, rows)")
        if yhat.size == 0:
            return
        b = self.grid.bucket_index(yhat)
        contrib = weights * (yhat - np.asarray(y, dtype=float))[:, None]
        np.add.at(self.cells.T, b, contrib)
        self.T += yhat.size

    def report(self) -> ErrorReport:
        return ErrorReport(self.metric, self.cells.copy(), self.grid, self.T)


def weighted_report(weights: np.ndarray, transcript: Transcript, grid: BucketGrid, metric: str) -> ErrorReport:
    acc = ErrorAccumulator(weights.shape[1] if weights.ndim == 2 else 1, grid, metric)
    acc.update(weights, transcript.yhat, transcript.y)
    return acc.report()


def _check_dim(model, transcript: Transcript) -> None:
    if len(transcript) and transcript.x.shape[1] != model.d:
        raise ValueError(f"transcript features have dimension {transcript.x.shape[1]}, model has {model.d}")


def dce(model, transcript: Transcript, grid: BucketGrid) -> ErrorReport:
    """Discriminant calibration error against the model's argmax-component rule."""
    _check_dim(model, transcript)
    if len(transcript) == 0:
        return ErrorReport("dce", np.zeros((model.k, grid.size)), grid, 0)
    disc = model.discriminant(transcript.x)
    w = (disc[:, None] == np.arange(model.k)[None, :]).astype(float)
    return weighted_report(w, transcript, grid, "dce")


def lce(model, transcript: Transcript, grid: BucketGrid) -> ErrorReport:
    """Likelihood calibration error: rounds weighted by the component posterior."""
    _check_dim(model, transcript)
    if len(transcript) == 0:
        return ErrorReport("lce", np.zeros((model.k, grid.size)), grid, 0)
    return weighted_report(model.posterior(transcript.x), transcript, grid, "lce")


def mce(distinguishers, transcript: Transcript, grid: BucketGrid) -> ErrorReport:
    """Multicalibration error; one row per distinguisher."""
    from .covering import evaluate_distinguishers

    n = len(distinguishers)
    if len(transcript) == 0:
        return ErrorReport("mce", np.zeros((n, grid.size)), grid, 0)
    vals = evaluate_distinguishers(distinguishers, transcript.x)
    if np.any((vals < 0) | (vals > 1)) or np.any(np.isnan(vals)):
        raise ValueError("distinguisher values must lie in [0, 1]")
    return weighted_report(vals, transcript, grid, "mce")
