"""Coalescing reference flow with mass-scaled variance.

Particles sit at ``y(u_i)``.  Each cluster moves by an independent
``N(0, dt / mass)`` increment; after every step, clusters whose order is
violated are merged (weighted pool-adjacent-violators with the cluster
masses as weights), so the merged position is the mass-weighted mean.
Simultaneous collisions are resolved by a single left-to-right sweep.

Paths are vectorised: positions, leaders (index of the leftmost particle of
a particle's cluster) and masses are ``(paths, n)`` arrays, and the
collision-time matrix is ``(paths, n, n)`` with NaN for pairs that have not
met.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .noise import NoiseStream


@dataclass
class CoalescingSystem:
    positions: np.ndarray  # (P, n)
    leaders: np.ndarray  # (P, n) int
    masses: np.ndarray  # (P, n), multiples of 1/n
    tau: np.ndarray  # (P, n, n)
    t: float = 0.0

    @classmethod
    def start(cls, y0, paths: int = 1):
        y0 = np.asarray(y0, dtype=float)
        n = y0.size
        sys = cls(np.tile(y0, (paths, 1)), np.tile(np.arange(n), (paths, 1)),
                  np.full((paths, n), 1.0 / n), np.full((paths, n, n), np.nan))
        idx = np.arange(n)
        sys.tau[:, idx, idx] = 0.0
        sys._coalesce(range(paths), 0.0)
        return sys

    @property
    def n(self) -> int:
        return self.positions.shape[1]

    def copy(self):
        return CoalescingSystem(self.positions.copy(), self.leaders.copy(), self.masses.copy(), self.tau.copy(), self.t)

    def clusters(self, p=0):
        """``(starts, positions, masses)`` of the clusters of path ``p``."""
        starts = np.flatnonzero(self.leaders[p] == np.arange(self.n))
        return starts, self.positions[p, starts], self.masses[p, starts]

    def _coalesce(self, rows, t):
        n = self.n
        for r in rows:
            starts = np.flatnonzero(self.leaders[r] == np.arange(n))
            ends = np.append(starts[1:], n)
            pos = self.positions[r, starts]
            w = self.masses[r, starts]
            # weighted PAV over clusters, merging ties as collisions
            blocks = []  # [first cluster, last cluster, weight, mean]
            for c in range(starts.size):
                blocks.append([c, c, w[c], pos[c]])
                while len(blocks) > 1 and blocks[-1][3] <= blocks[-2][3]:
                    b2 = blocks.pop()
                    b1 = blocks[-1]
                    tot = b1[2] + b2[2]
                    b1[3] = (b1[2] * b1[3] + b2[2] * b2[3]) / tot
                    b1[1], b1[2] = b2[1], tot
            for c0, c1, wt, mean in blocks:
                if c0 == c1:
                    continue
                lo, hi = starts[c0], ends[c1]
                self.positions[r, lo:hi] = mean
                self.leaders[r, lo:hi] = lo
                self.masses[r, lo:hi] = wt
                blk = self.tau[r, lo:hi, lo:hi]
                blk[np.isnan(blk)] = t

    def violations(self):
        """Rows whose cluster order is violated (or tied)."""
        d = np.diff(self.positions, axis=1)
        distinct = np.diff(self.leaders, axis=1) != 0
        return np.flatnonzero(np.any(distinct & (d <= 0), axis=1))


def step_arratia(sys: CoalescingSystem, dt: float, stream=None, normals=None) -> CoalescingSystem:
    """Advance every path by ``dt``.

    Cluster increments are ``z[leader] * sqrt(dt / mass)`` where ``z`` is one
    standard normal per particle (``normals`` of shape ``(P, n)`` or one draw
    from ``stream`` for a single path).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if normals is None:
        normals = stream.normals(sys.n)
    z = np.asarray(normals, dtype=float).reshape(sys.positions.shape)
    out = sys.copy()
    inc = np.take_along_axis(z, sys.leaders, axis=1) * np.sqrt(dt / sys.masses)
    out.positions = sys.positions + inc
    out.t = sys.t + dt
    out._coalesce(out.violations(), out.t)
    return out


@dataclass
class ArratiaTrajectory:
    times: np.ndarray
    positions: np.ndarray  # (P, steps+1, n)
    masses: np.ndarray  # (P, steps+1, n)
    tau: np.ndarray  # (P, n, n)

    @property
    def dt(self):
        return self.times[1] - self.times[0]


def simulate_arratia(y0, T: float, dt: float, paths: int, seed: int, tag="arratia") -> ArratiaTrajectory:
    y0 = np.asarray(y0, dtype=float)
    steps = int(round(T / dt))
    n = y0.size
    Z = np.stack([NoiseStream(seed, p, tag=tag).normals(n, steps) for p in range(paths)]) if steps else None
    sys = CoalescingSystem.start(y0, paths)
    pos = [sys.positions.copy()]
    mas = [sys.masses.copy()]
    for s in range(steps):
        sys = step_arratia(sys, dt, normals=Z[:, s])
        pos.append(sys.positions.copy())
        mas.append(sys.masses.copy())
    return ArratiaTrajectory(np.arange(steps + 1) * dt, np.stack(pos, 1), np.stack(mas, 1), sys.tau)


def covariation_profile(traj: ArratiaTrajectory, u: int, v: int) -> np.ndarray:
    """``int_0^T 1{s >= tau_uv} / m_s(u) ds`` per path, as a left-point sum on the time grid.

    Pairs that never meet contribute 0.
    """
    tau = traj.tau[:, u, v]
    t = traj.times[:-1]
    m = traj.masses[:, :-1, u]
    met = np.where(np.isnan(tau)[:, None], False, t[None, :] >= np.nan_to_num(tau, nan=np.inf)[:, None])
    return np.sum(np.where(met, traj.dt / m, 0.0), axis=1)


def empirical_covariation(traj: ArratiaTrajectory, u: int, v: int) -> np.ndarray:
    """Sample cross-variation ``sum (dy_u)(dy_v)`` per path."""
    d = np.diff(traj.positions, axis=1)
    return np.sum(d[:, :, u] * d[:, :, v], axis=1)
