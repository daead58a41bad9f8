"""Discretised complex Brownian sheet and the spectral stochastic integral.

Each k-node carries two independent scalar Brownian increments (real and
imaginary part) of variance ``dk * dt``.  Randomness comes from counter-style
streams: every ``(seed, path_index, tag)`` triple owns a Philox generator, and
the ``counter`` records how many increments have been drawn, so a stream can
be replayed or fast-forwarded deterministically and paths can be advanced in
any order.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import GridError, MassDegeneracyError
from .kernels import SpectralDecay, spectral_synthesis


@dataclass(frozen=True)
class SheetIncrement:
    """One time step of the sheet on the k-grid (arrays may carry leading path axes)."""

    dW_re: np.ndarray
    dW_im: np.ndarray
    dt: float


def _tag_code(tag) -> int:
    return tag if isinstance(tag, int) else zlib.crc32(str(tag).encode())


class NoiseStream:
    """Reproducible Gaussian stream keyed by ``(seed, path_index, tag)``.

    With ``antithetic=True`` odd paths reuse the draws of the preceding even
    path with flipped sign.
    """

    def __init__(self, seed: int, path_index: int = 0, counter: int = 0, tag="sheet", antithetic=False):
        if counter < 0:
            raise ValueError("counter must be non-negative")
        self.seed = int(seed)
        self.path_index = int(path_index)
        self.tag = tag
        self.antithetic = bool(antithetic)
        self.counter = int(counter)
        self._gen = None
        self._drawn = 0  # increments consumed from self._gen
        self._width = None

    def _key(self):
        base = self.path_index - (self.path_index % 2) if self.antithetic else self.path_index
        sign = -1.0 if (self.antithetic and self.path_index % 2) else 1.0
        return base, sign

    def _generator(self):
        if self._gen is None:
            base, _ = self._key()
            ss = np.random.SeedSequence(self.seed, spawn_key=(base, _tag_code(self.tag)))
            self._gen = np.random.Generator(np.random.Philox(ss))
            self._drawn = 0
        return self._gen

    def normals(self, width: int, steps: int = 1) -> np.ndarray:
        """Standard normals of shape ``(steps, width)``; advances the counter by ``steps``."""
        if self._width is not None and width != self._width:
            raise GridError(f"stream width changed from {self._width} to {width}")
        self._width = width
        gen = self._generator()
        if self._drawn < self.counter:
            gen.standard_normal((self.counter - self._drawn, width))
            self._drawn = self.counter
        z = gen.standard_normal((steps, width))
        self._drawn += steps
        self.counter += steps
        _, sign = self._key()
        return z if sign > 0 else -z

    def replay(self) -> "NoiseStream":
        """Fresh stream positioned at counter 0 with the same key."""
        return NoiseStream(self.seed, self.path_index, 0, self.tag, self.antithetic)

    def fork(self, tag) -> "NoiseStream":
        return NoiseStream(self.seed, self.path_index, 0, tag, self.antithetic)

    def __repr__(self):
        return (f"NoiseStream(seed={self.seed}, path_index={self.path_index}, "
                f"counter={self.counter}, tag={self.tag!r})")


class StreamBatch:
    """A block of per-path streams sharing seed and tag; draws stack along axis 0."""

    def __init__(self, seed: int, path_indices, tag="sheet", antithetic=False):
        self.streams = [NoiseStream(seed, int(p), 0, tag, antithetic) for p in path_indices]

    def __len__(self):
        return len(self.streams)

    def normals(self, width: int, steps: int = 1) -> np.ndarray:
        """Array of shape ``(paths, steps, width)``."""
        return np.stack([s.normals(width, steps) for s in self.streams])


def sheet_from_normals(z: np.ndarray, decay: SpectralDecay, dt: float) -> SheetIncrement:
    """Scale standard normals ``(..., 2K)`` into a sheet increment (re first, then im)."""
    K = decay.size
    s = math.sqrt(decay.dk * dt)
    return SheetIncrement(z[..., :K] * s, z[..., K:] * s, dt)


def sample_increment(stream: NoiseStream, grid: SpectralDecay, dt: float) -> SheetIncrement:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    z = stream.normals(2 * grid.size)[0]
    return sheet_from_normals(z, grid, dt)


def martingale_sum(y, decay: SpectralDecay, dW_re, dW_im):
    """``sum_j f(k_j) [cos(k_j y) dW_re_j + sin(k_j y) dW_im_j]`` without the mass factor."""
    f = decay.values
    return spectral_synthesis(y, decay.nodes[0], decay.dk, f * dW_re, f * dW_im)


def check_masses(m):
    m = np.asarray(m, dtype=float)
    if not np.all(m > 0):
        raise MassDegeneracyError(f"non-positive mass encountered (min {np.min(m):.3g})")
    return m


def apply_martingale_increment(y, m, decay: SpectralDecay, inc: SheetIncrement) -> np.ndarray:
    """Particle increments ``m_i^{-1/2} sum_j f(k_j)[cos(k_j y_i) dW_re_j + sin(k_j y_i) dW_im_j]``."""
    y = np.asarray(getattr(y, "values", y), dtype=float)
    m = check_masses(m)
    if m.shape[-1] != y.shape[-1]:
        raise GridError("masses and positions are on different grids")
    if decay.scale == 0:
        return np.zeros_like(y)
    return martingale_sum(y, decay, inc.dW_re, inc.dW_im) / np.sqrt(m)


def increment_covariance(y, m, decay: SpectralDecay, dt: float) -> np.ndarray:
    """Kernel form ``dt * sum_j f^2 cos(k_j (y_i - y_i')) dk / sqrt(m_i m_i')``."""
    y = np.asarray(getattr(y, "values", y), dtype=float)
    m = check_masses(m)
    w = decay.values**2 * decay.dk
    delta = y[:, None] - y[None, :]
    kern = np.cos(delta[..., None] * decay.nodes) @ w
    return dt * kern / np.sqrt(np.outer(m, m))


def linear_form_covariance(y, m, decay: SpectralDecay, dt: float) -> np.ndarray:
    """Exact covariance ``A A^T dk dt`` of the linear map from sheet nodes to increments."""
    y = np.asarray(getattr(y, "values", y), dtype=float)
    m = check_masses(m)
    ky = np.multiply.outer(y, decay.nodes)
    A = np.concatenate([np.cos(ky), np.sin(ky)], axis=1) * np.tile(decay.values, 2)
    A /= np.sqrt(m)[:, None]
    return (A @ A.T) * decay.dk * dt
