"""Quantile states, histograms, and distances between measures.

A measure on the line is carried by its quantile function sampled at the
midpoints ``u_i = (i + 1/2) / n``.  Total variation uses the factor-2
convention ``d_TV(p, q) = sum |p_b - q_b|`` (values in ``[0, 2]``); the
mismatch probability of an optimal coupling is ``d_TV / 2``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import isotonic_regression

from .errors import DegenerateQuantileError, GridError
from .kernels import MassKernel


def u_grid(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


@dataclass(frozen=True)
class QuantileState:
    values: np.ndarray
    monotone_flag: bool = True

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or v.size < 1:
            raise GridError("quantile values must be a non-empty vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("quantile values must be finite")
        if self.monotone_flag and np.any(np.diff(v) < 0):
            raise DegenerateQuantileError("values flagged monotone but not non-decreasing")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, g, n: int):
        return cls(np.asarray(g(u_grid(n)), dtype=float))

    @classmethod
    def unchecked(cls, values):
        return cls(values, monotone_flag=False)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def u(self) -> np.ndarray:
        return u_grid(self.n)

    @property
    def spread(self) -> float:
        return float(self.values[-1] - self.values[0])

    def mean(self) -> float:
        return float(self.values.mean())

    def to_histogram(self, edges) -> "HistogramMeasure":
        return HistogramMeasure.from_samples(self.values, edges)


@dataclass(frozen=True)
class HistogramMeasure:
    edges: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        e = np.array(self.edges, dtype=float)
        p = np.array(self.probs, dtype=float)
        if e.ndim != 1 or p.shape != (e.size - 1,) or np.any(np.diff(e) <= 0):
            raise GridError("histogram needs strictly increasing edges and one prob per bin")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("histogram probabilities must be non-negative and sum to 1")
        e.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_samples(cls, samples, edges, weights=None):
        """Empirical histogram; samples outside the layout are clipped into the end bins."""
        return cls(edges, histogram_probs(samples, edges, weights))

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def mean(self) -> float:
        return float(self.probs @ self.centers)

    def mass(self, mask) -> float:
        return float(self.probs[np.asarray(mask, dtype=bool)].sum())


def histogram_probs(samples, edges, weights=None) -> np.ndarray:
    """Normalised bin probabilities along the last axis of ``samples`` (batched)."""
    edges = np.asarray(edges, dtype=float)
    x = np.asarray(samples, dtype=float)
    nb = edges.size - 1
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, nb - 1)
    w = np.ones_like(x) if weights is None else np.broadcast_to(np.asarray(weights, float), x.shape)
    lead = x.shape[:-1]
    flat_idx = idx.reshape(-1, x.shape[-1]) + nb * np.arange(int(np.prod(lead, dtype=int)))[:, None]
    counts = np.bincount(flat_idx.ravel(), weights=w.reshape(-1), minlength=nb * flat_idx.shape[0])
    counts = counts.reshape(lead + (nb,))
    return counts / counts.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class DensityEstimate:
    """Piecewise-constant density stored with doubled nodes at cell boundaries.

    ``x`` lists each interior cell edge twice so that the trapezoid rule on
    ``(x, p)`` integrates the step function exactly.
    """

    x: np.ndarray
    p: np.ndarray
    F: np.ndarray
    edges: np.ndarray
    cell_density: np.ndarray

    def integral(self) -> float:
        return float(np.trapezoid(self.p, self.x))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        i = np.searchsorted(self.edges, x, side="right") - 1
        inside = (i >= 0) & (i < self.cell_density.size)
        return np.where(inside, self.cell_density[np.clip(i, 0, self.cell_density.size - 1)], 0.0)

    def cdf(self, x):
        cdf_edges = np.concatenate([[0.0], np.cumsum(self.cell_density * np.diff(self.edges))])
        return np.interp(x, self.edges, cdf_edges)


def density_from_quantile(y: QuantileState) -> DensityEstimate:
    """Density ``p = (1/n) / (y_{i+1} - y_i)`` between neighbours, with half-cells at the ends."""
    v = y.values
    n = v.size
    if n < 2:
        raise DegenerateQuantileError("need at least two particles")
    d = np.diff(v)
    if np.any(d <= 0):
        raise DegenerateQuantileError("quantile values must be strictly increasing")
    edges = np.concatenate([[v[0] - d[0] / 2], v, [v[-1] + d[-1] / 2]])
    dens = np.concatenate([[1.0 / (n * d[0])], 1.0 / (n * d), [1.0 / (n * d[-1])]])
    x = np.repeat(edges, 2)[1:-1]
    p = np.repeat(dens, 2)
    cdf_edges = np.concatenate([[0.0], y.u, [1.0]])
    F = np.repeat(cdf_edges, 2)[1:-1]
    return DensityEstimate(x, p, F, edges, dens)


def mass_function(y, kernel: MassKernel) -> np.ndarray:
    """``m_i = (1/n) sum_j phi(y_i - y_j)``; accepts a state or a ``(..., n)`` array."""
    v = np.asarray(getattr(y, "values", y), dtype=float)
    if kernel.variant == "constant":
        return np.ones_like(v)
    return kernel(v[..., :, None] - v[..., None, :]).mean(axis=-1)


def mass_derivative(y, kernel: MassKernel) -> np.ndarray:
    """``m'_i = (1/n) sum_j phi'(y_i - y_j)``: derivative of the mass in the particle position."""
    v = np.asarray(getattr(y, "values", y), dtype=float)
    if kernel.variant == "constant":
        return np.zeros_like(v)
    return kernel.derivative(v[..., :, None] - v[..., None, :]).mean(axis=-1)


def w2_distance(a: QuantileState, b: QuantileState) -> float:
    if a.n != b.n:
        raise GridError(f"particle counts differ: {a.n} vs {b.n}")
    return float(np.sqrt(np.mean((a.values - b.values) ** 2)))


def tv_distance(p: HistogramMeasure, q: HistogramMeasure) -> float:
    """``sum_b |p_b - q_b|`` (factor-2 convention, range [0, 2])."""
    if p.edges.shape != q.edges.shape or not np.array_equal(p.edges, q.edges):
        raise GridError("histograms live on different bin layouts")
    return float(np.abs(p.probs - q.probs).sum())


def monotonicity_report(y) -> tuple[int, float]:
    v = np.asarray(getattr(y, "values", y), dtype=float)
    drops = -np.diff(v)
    bad = drops > 0
    return int(bad.sum()), float(drops[bad].max()) if bad.any() else 0.0


def isotonic_project(y) -> QuantileState:
    """Nearest non-decreasing vector in least squares (pool-adjacent-violators)."""
    v = np.asarray(getattr(y, "values", y), dtype=float)
    if np.all(np.diff(v) >= 0):
        return QuantileState(v)
    return QuantileState(np.maximum.accumulate(isotonic_regression(v).x))


def isotonic_project_rows(Y: np.ndarray) -> np.ndarray:
    """Row-wise projection of a ``(paths, n)`` array; sorted rows are untouched."""
    Y = np.array(Y, dtype=float)
    bad = np.nonzero(np.any(np.diff(Y, axis=-1) < 0, axis=-1))[0]
    for r in bad:
        # cumulative max only removes round-off dips from the block means
        Y[r] = np.maximum.accumulate(isotonic_regression(Y[r]).x)
    return Y


# ----------------------------------------------------------------------------
# CSV


def write_quantile_csv(path, times, states, header_comment=None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["t", "u", "y"])
        for t, s in zip(times, states):
            for u, v in zip(s.u, s.values):
                w.writerow([repr(float(t)), repr(float(u)), repr(float(v))])


def read_quantile_csv(path):
    rows = [r for r in csv.reader(l for l in open(path) if not l.startswith("#"))][1:]
    times, states, cur, tcur = [], [], [], None
    for t, _, v in rows:
        t = float(t)
        if tcur is not None and t != tcur:
            times.append(tcur)
            states.append(QuantileState.unchecked(cur))
            cur = []
        tcur = t
        cur.append(float(v))
    if cur:
        times.append(tcur)
        states.append(QuantileState.unchecked(cur))
    return times, states


def write_histogram_csv(path, hist: HistogramMeasure, header_comment=None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["edge_left", "edge_right", "prob"])
        for a, b, p in zip(hist.edges[:-1], hist.edges[1:], hist.probs):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(p))])


def read_histogram_csv(path) -> HistogramMeasure:
    rows = [r for r in csv.reader(l for l in open(path) if not l.startswith("#"))][1:]
    a = [float(r[0]) for r in rows]
    edges = a + [float(rows[-1][1])]
    return HistogramMeasure(edges, [float(r[2]) for r in rows])
