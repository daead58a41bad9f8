"""Euler-Maruyama time stepping of the quantile-particle system.

Paths are advanced in fixed-size blocks: every path owns its own noise
stream, so results do not depend on the block layout or the thread count.
Within a block all paths move together as ``(paths, n)`` arrays.

One step of the particle system reads

    y_i <- y_i + b(y_i, mu) dt + m_i^{-1/2} sum_j f(k_j)[cos(k_j y_i) dW_re_j + sin(k_j y_i) dW_im_j]

with ``m_i = (1/n) sum_l phi(y_i - y_l)`` (``phi_M`` when a truncation is set).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, MonotonicityViolation, NumericalBlowupError
from .kernels import MassKernel, SpectralDecay, spectral_synthesis
from .noise import NoiseStream, SheetIncrement, apply_martingale_increment, check_masses, martingale_sum, sample_increment
from .state import HistogramMeasure, QuantileState, isotonic_project_rows, mass_derivative, mass_function, u_grid

REPAIR_MODES = ("off", "project", "reject")
BLOCK = 128
CHUNK = 16


@dataclass(frozen=True)
class SimConfig:
    T: float
    dt: float
    n: int
    decay: SpectralDecay
    kernel: MassKernel = field(default_factory=MassKernel.constant)
    truncation_M: Optional[float] = None
    monotone_repair: str = "project"
    seed: int = 0
    paths: int = 1
    antithetic: bool = False
    threads: int = 1

    def __post_init__(self):
        if not self.dt > 0 or self.T < 0:
            raise ConfigError("need dt > 0 and T >= 0")
        if self.T > 0 and self.dt > self.T * (1 + 1e-12):
            raise ConfigError("dt must not exceed T")
        if self.n < 2:
            raise ConfigError("need at least two particles")
        if self.monotone_repair not in REPAIR_MODES:
            raise ConfigError(f"monotone_repair must be one of {REPAIR_MODES}")
        if self.paths < 1 or self.threads < 1:
            raise ConfigError("paths and threads must be positive")
        if self.truncation_M is not None and not self.truncation_M > 0:
            raise ConfigError("truncation_M must be positive")
        s = self.T / self.dt
        if abs(s - round(s)) > 1e-8 * max(1.0, s):
            raise ConfigError(f"T/dt must be an integer, got {s}")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def effective_kernel(self) -> MassKernel:
        return self.kernel if self.truncation_M is None else self.kernel.truncated(self.truncation_M)

    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def check_initial(self, initial: QuantileState):
        v = initial.values
        if v.size != self.n:
            raise ConfigError(f"initial state has {v.size} particles, config says {self.n}")
        if np.any(np.diff(v) <= 0):
            raise ConfigError("initial quantile must be strictly increasing")
        if self.truncation_M is not None and not self.truncation_M > v[-1] - v[0]:
            raise ConfigError("truncation_M must exceed the initial spread")


@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    exit_time: Optional[float] = None
    girsanov: Optional[object] = None
    max_violation: float = 0.0
    qv: Optional[np.ndarray] = None
    qv_expected: Optional[np.ndarray] = None


@dataclass
class DerivativeFlow:
    times: np.ndarray
    z: np.ndarray  # (records, n)
    log_z: np.ndarray
    base: Trajectory

    def finite_difference(self, k=-1):
        """Central difference ``(y_{i+1} - y_{i-1}) / (2/n)`` of the coupled base path."""
        y = self.base.states[k].values
        return (y[2:] - y[:-2]) * (y.size / 2.0)


@dataclass
class EnsembleResult:
    path_indices: np.ndarray
    times: np.ndarray  # recorded times
    final: np.ndarray  # (P, n)
    records: Optional[np.ndarray]  # (P, R, n)
    exit_times: np.ndarray  # nan where no exit
    qv: np.ndarray
    qv_expected: np.ndarray
    max_violation: np.ndarray
    log_weight: Optional[np.ndarray] = None
    int_h_sq: Optional[np.ndarray] = None
    log_z: Optional[np.ndarray] = None
    log_z_records: Optional[np.ndarray] = None


def mass_and_derivative(Y, kernel: MassKernel, need_derivative=False):
    if kernel.variant == "constant":
        return np.ones_like(Y), (np.zeros_like(Y) if need_derivative else None)
    D = Y[..., :, None] - Y[..., None, :]
    if kernel.variant == "gaussian":
        s = kernel.scale
        A = np.abs(D) if kernel.M is None else np.minimum(np.abs(D), kernel.M)
        P = np.exp(-0.5 * (A / s) ** 2) / (s * math.sqrt(2 * math.pi))
        m = P.mean(axis=-1)
        if not need_derivative:
            return m, None
        dP = -D / s**2 * P
        if kernel.M is not None:
            dP = np.where(np.abs(D) >= kernel.M, 0.0, dP)
        return m, dP.mean(axis=-1)
    m = kernel(D).mean(axis=-1)
    return m, (kernel.derivative(D).mean(axis=-1) if need_derivative else None)


def euler_update(Y, m, decay: SpectralDecay, dW_re, dW_im, dt, drift=None):
    """Return ``(new positions, martingale part)`` for positions ``Y`` of shape ``(..., n)``."""
    if decay.scale == 0:
        mart = np.zeros_like(Y)
    else:
        mart = martingale_sum(Y, decay, dW_re, dW_im) / np.sqrt(m)
    Ynew = Y + mart
    if drift is not None and drift.variant != "zero":
        Ynew = Ynew + drift(Y, Y) * dt
    return Ynew, mart


def step_euler(y: QuantileState, cfg: SimConfig, drift, stream: NoiseStream) -> QuantileState:
    """One Euler step of a single path, with the configured monotone repair."""
    Y = np.asarray(y.values, dtype=float)
    m = check_masses(mass_function(Y, cfg.effective_kernel))
    inc = sample_increment(stream, cfg.decay, cfg.dt)
    Ynew, _ = euler_update(Y, m, cfg.decay, inc.dW_re, inc.dW_im, cfg.dt, drift)
    if not np.all(np.isfinite(Ynew)):
        raise NumericalBlowupError("non-finite particle position")
    return QuantileState(_repair(Ynew[None], cfg.monotone_repair, stream.path_index)[0],
                         monotone_flag=cfg.monotone_repair != "off")


def _repair(Y, mode, path_ids):
    if mode == "off":
        return Y
    if mode == "reject":
        bad = np.any(np.diff(Y, axis=-1) < 0, axis=-1)
        if np.any(bad):
            raise MonotonicityViolation(f"monotonicity lost on path(s) {np.atleast_1d(path_ids)[bad].tolist()}")
        return Y
    return isotonic_project_rows(Y)


def _run_block(cfg: SimConfig, initial, drift, paths, record_stride, h_provider, g_prime, stream_factory):
    decay = cfg.decay
    kern = cfg.effective_kernel
    P, n, K = len(paths), cfg.n, decay.size
    steps, dt = cfg.steps, cfg.dt
    streams = [stream_factory(p) for p in paths]
    Y = np.tile(np.asarray(initial, dtype=float), (P, 1))
    sq = math.sqrt(decay.dk * dt)
    f = decay.values
    fnorm = decay.norm_sq()
    fgrad = decay.gradient_norm_sq()
    alive = np.ones(P, dtype=bool)
    exit_times = np.full(P, np.nan)
    qv = np.zeros((P, n))
    qv_exp = np.zeros((P, n))
    maxviol = np.zeros(P)
    logw = np.zeros(P) if h_provider is not None else None
    ihsq = np.zeros(P) if h_provider is not None else None
    logz = np.tile(np.log(np.asarray(g_prime, dtype=float)), (P, 1)) if g_prime is not None else None
    recs, zrecs = None, None
    if record_stride:
        recs = [Y.copy()]
        zrecs = [logz.copy()] if logz is not None else None
    buf = None
    for s in range(steps):
        j = s % CHUNK
        if j == 0:
            c = min(CHUNK, steps - s)
            buf = np.stack([st.normals(2 * K, c) for st in streams]) * sq
        dWre, dWim = buf[:, j, :K], buf[:, j, K:]
        m, mp = mass_and_derivative(Y, kern, need_derivative=logz is not None)
        check_masses(m)
        Ynew, mart = euler_update(Y, m, decay, dWre, dWim, dt, drift)
        if h_provider is not None:
            hre, him = h_provider(Y, m)
            l2 = np.sum(hre**2 + him**2, axis=-1) * decay.dk
            logw += np.where(alive, np.sum(hre * dWre + him * dWim, axis=-1) - 0.5 * l2 * dt, 0.0)
            ihsq += np.where(alive, l2 * dt, 0.0)
        if logz is not None and decay.scale > 0:
            rm = 1.0 / np.sqrt(m)
            kf = decay.nodes * f
            grad = spectral_synthesis(Y, decay.nodes[0], decay.dk, kf * dWim, -kf * dWre)
            S = mart / rm
            expo = grad * rm - 0.5 * mp / m**1.5 * S
            qvz = (fgrad / m + mp**2 / (4.0 * m**3) * fnorm) * dt
            logz += np.where(alive[:, None], expo - 0.5 * qvz, 0.0)
        if not np.all(np.isfinite(Ynew[alive])):
            raise NumericalBlowupError(f"non-finite positions at step {s + 1}")
        drops = -np.diff(Ynew, axis=-1).min(axis=-1)
        maxviol = np.where(alive, np.maximum(maxviol, drops), maxviol)
        Ynew = _repair(Ynew, cfg.monotone_repair, np.asarray(paths))
        Y = np.where(alive[:, None], Ynew, Y)
        qv += np.where(alive[:, None], mart**2, 0.0)
        qv_exp += np.where(alive[:, None], fnorm * dt / m, 0.0)
        if cfg.truncation_M is not None:
            hit = alive & (Y[:, -1] - Y[:, 0] >= cfg.truncation_M)
            exit_times[hit] = (s + 1) * dt
            alive &= ~hit
        if record_stride and ((s + 1) % record_stride == 0 or s + 1 == steps):
            recs.append(Y.copy())
            if zrecs is not None:
                zrecs.append(logz.copy())
    return dict(
        final=Y, records=None if recs is None else np.stack(recs, axis=1), exit_times=exit_times,
        qv=qv, qv_expected=qv_exp, max_violation=np.maximum(maxviol, 0.0), log_weight=logw,
        int_h_sq=ihsq, log_z=logz, log_z_records=None if zrecs is None else np.stack(zrecs, axis=1),
    )


def record_times(cfg: SimConfig, stride) -> np.ndarray:
    idx = list(range(0, cfg.steps + 1, stride))
    if idx[-1] != cfg.steps:
        idx.append(cfg.steps)
    return np.asarray(idx) * cfg.dt


def simulate_ensemble(
    cfg: SimConfig,
    initial,
    drift=None,
    *,
    path_indices: Optional[Sequence[int]] = None,
    record_stride: Optional[int] = None,
    h_provider: Optional[Callable] = None,
    g_prime=None,
    stream_factory: Optional[Callable] = None,
    block: int = BLOCK,
) -> EnsembleResult:
    """Simulate ``cfg.paths`` independent paths (or the given path indices).

    ``h_provider(Y, m) -> (h_re, h_im)`` enables Girsanov weight accumulation;
    ``g_prime`` enables the derivative flow along the same increments.
    """
    init = np.asarray(getattr(initial, "values", initial), dtype=float)
    if isinstance(initial, QuantileState):
        cfg.check_initial(initial)
    else:
        cfg.check_initial(QuantileState(init))
    if g_prime is not None and np.any(np.asarray(g_prime) <= 0):
        raise ConfigError("g_prime must be positive")
    paths = np.arange(cfg.paths) if path_indices is None else np.asarray(path_indices, dtype=int)
    if stream_factory is None:
        stream_factory = lambda p: NoiseStream(cfg.seed, int(p), tag="sheet", antithetic=cfg.antithetic)
    blocks = [paths[i:i + block] for i in range(0, paths.size, block)]
    work = lambda b: _run_block(cfg, init, drift, b, record_stride, h_provider, g_prime, stream_factory)
    if cfg.threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            parts = list(ex.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]

    def cat(key):
        if parts[0][key] is None:
            return None
        return np.concatenate([p[key] for p in parts])

    times = record_times(cfg, record_stride) if record_stride else np.array([cfg.T])
    return EnsembleResult(
        path_indices=paths, times=times, final=cat("final"), records=cat("records"),
        exit_times=cat("exit_times"), qv=cat("qv"), qv_expected=cat("qv_expected"),
        max_violation=cat("max_violation"), log_weight=cat("log_weight"), int_h_sq=cat("int_h_sq"),
        log_z=cat("log_z"), log_z_records=cat("log_z_records"),
    )


def run(cfg: SimConfig, initial: QuantileState, drift=None, *, path_index=0, record_stride=1,
        h_provider=None, stream: Optional[NoiseStream] = None) -> Trajectory:
    """Single-path trajectory, frozen after the exit time when a truncation is set."""
    factory = None if stream is None else (lambda p: stream)
    res = simulate_ensemble(replace(cfg, paths=1, threads=1), initial, drift, path_indices=[path_index],
                            record_stride=record_stride, h_provider=h_provider, stream_factory=factory)
    flag = cfg.monotone_repair != "off"
    states = [QuantileState(r, monotone_flag=flag and bool(np.all(np.diff(r) >= 0))) for r in res.records[0]]
    et = res.exit_times[0]
    ledger = None
    if h_provider is not None:
        from .girsanov import GirsanovLedger
        ledger = GirsanovLedger(float(res.log_weight[0]), float(res.int_h_sq[0]))
    return Trajectory(res.times, states, None if np.isnan(et) else float(et), ledger,
                      float(res.max_violation[0]), res.qv[0], res.qv_expected[0])


def run_derivative_flow(cfg: SimConfig, initial: QuantileState, g_prime, stream: Optional[NoiseStream] = None,
                        *, path_index=0, record_stride=1) -> DerivativeFlow:
    """Derivative flow ``z = g' exp(int phi f dW - 1/2 int |phi|^2 f^2 dk ds)`` on the base path's increments.

    With ``phi_re = -k sin(ky)/sqrt(m) - cos(ky) m'/(2 m^{3/2})`` and
    ``phi_im = k cos(ky)/sqrt(m) - sin(ky) m'/(2 m^{3/2})`` the quadratic term
    collapses to ``k^2 / m + m'^2 / (4 m^3)`` because the cross terms cancel.
    """
    factory = None if stream is None else (lambda p: stream)
    res = simulate_ensemble(replace(cfg, paths=1, threads=1), initial, None, path_indices=[path_index],
                            record_stride=record_stride, g_prime=g_prime, stream_factory=factory)
    states = [QuantileState.unchecked(r) for r in res.records[0]]
    base = Trajectory(res.times, states, None, None, float(res.max_violation[0]), res.qv[0], res.qv_expected[0])
    lz = res.log_z_records[0]
    return DerivativeFlow(res.times, np.exp(lz), lz, base)


def step_interpolation(z, mu_hist, drift, decay: SpectralDecay, common_inc: SheetIncrement, idio_inc):
    """Constant-mass step with common sheet noise and idiosyncratic Brownian increments.

    ``z`` has shape ``(..., J)``; all copies share ``common_inc``.
    """
    z = np.asarray(z, dtype=float)
    out = z + np.asarray(idio_inc, dtype=float)
    if decay.scale > 0:
        out = out + martingale_sum(z, decay, common_inc.dW_re, common_inc.dW_im)
    if drift is not None and drift.variant != "zero":
        out = out + drift(z, mu_hist) * common_inc.dt
    return out


def quadratic_variation(path_values):
    """Sample quadratic variation ``sum (y_{t+1} - y_t)^2`` along the time axis (-2)."""
    return np.sum(np.diff(path_values, axis=-2) ** 2, axis=-2)
