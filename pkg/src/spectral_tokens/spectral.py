"""Per-channel 2D discrete Fourier analysis with amplitude/phase split.

The forward transform is unnormalised and the inverse carries the ``1/(HW)``
factor. Both are row-column transforms written as ``A @ X @ B.T`` with cosine
and sine matrices, so every step is an ordinary differentiable primitive and
arbitrary (non power-of-two) sizes work.

All functions act on the last two axes; any leading axes (channels, batch)
are carried along.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

AMPLITUDE_EPS = 1e-12
SYMMETRY_TOL = 1e-6


class SymmetryError(ValueError):
    """The spectrum handed to the inverse transform is not Hermitian."""


@dataclass(frozen=True)
class ComplexGrid:
    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"real {self.real.shape} and imag {self.imag.shape} differ")

    @property
    def shape(self):
        return self.real.shape


@dataclass(frozen=True)
class SpectralPair:
    amplitude: Tensor
    phase: Tensor

    def __post_init__(self):
        if self.amplitude.shape != self.phase.shape:
            raise ShapeError(
                f"amplitude {self.amplitude.shape} and phase {self.phase.shape} differ"
            )

    @property
    def shape(self):
        return self.amplitude.shape


@lru_cache(maxsize=64)
def dft_matrices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """``cos`` and ``sin`` of ``2*pi*k*m/n``, with exact zeros at quarter turns."""
    k = np.arange(n)
    turns = np.outer(k, k) % n
    angle = 2.0 * np.pi * turns / n
    c, s = np.cos(angle), np.sin(angle)
    c[np.abs(c) < 1e-15] = 0.0
    s[np.abs(s) < 1e-15] = 0.0
    c.setflags(write=False)
    s.setflags(write=False)
    return c, s


def _grid_dims(x: Tensor) -> tuple[int, int]:
    if x.ndim < 2:
        raise ShapeError(f"expected at least [H, W] axes, got shape {x.shape}")
    return x.shape[-2], x.shape[-1]


def dft2(x) -> ComplexGrid:
    """Forward transform of a real grid, independently for each leading index."""
    x = T.as_tensor(x)
    H, W = _grid_dims(x)
    ch, sh = dft_matrices(H)
    cw, sw = dft_matrices(W)
    # (C - iS) x (C - iS): real = CxC - SxS, imag = -(SxC + CxS)
    real = T.sub(T.bilinear_map(x, ch, cw), T.bilinear_map(x, sh, sw))
    imag = T.neg(T.add(T.bilinear_map(x, sh, cw), T.bilinear_map(x, ch, sw)))
    return ComplexGrid(real, imag)


def imaginary_residual(grid: ComplexGrid) -> np.ndarray:
    """Imaginary part of the inverse transform (plain array, not recorded)."""
    H, W = _grid_dims(grid.real)
    ch, sh = dft_matrices(H)
    cw, sw = dft_matrices(W)
    r, i = grid.real.data, grid.imag.data
    return (ch @ r @ sw + sh @ r @ cw + ch @ i @ cw - sh @ i @ sw) / (H * W)


def idft2(grid: ComplexGrid, strict: bool = True) -> Tensor:
    """Inverse transform, returning the real part.

    With ``strict`` the discarded imaginary part is checked; a residual above
    ``SYMMETRY_TOL`` means the spectrum was not Hermitian and raises
    :class:`SymmetryError`. Without it the real part is returned silently,
    which is the orthogonal projection onto real signals.
    """
    H, W = _grid_dims(grid.real)
    ch, sh = dft_matrices(H)
    cw, sw = dft_matrices(W)
    r, i = grid.real, grid.imag
    if strict:
        resid = float(np.max(np.abs(imaginary_residual(grid))))
        if resid > SYMMETRY_TOL:
            raise SymmetryError(f"inverse transform has imaginary residual {resid:.3e}")
    # real part of (C + iS)(R + iI)(C + iS) = CRC - SRS - SIC - CIS
    out = T.sub(T.bilinear_map(r, ch, cw), T.bilinear_map(r, sh, sw))
    out = T.sub(out, T.add(T.bilinear_map(i, sh, cw), T.bilinear_map(i, ch, sw)))
    return T.scale(out, 1.0 / (H * W))


def _forward_kernel(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Plain-array forward transform of a real grid: ``(re, im)``."""
    H, W = x.shape[-2:]
    ch, sh = dft_matrices(H)
    cw, sw = dft_matrices(W)
    p, q = x @ cw, x @ sw
    return ch @ p - sh @ q, -(sh @ p + ch @ q)


def _inverse_kernel(re: np.ndarray, im: np.ndarray) -> np.ndarray:
    """Plain-array real part of the inverse transform."""
    H, W = re.shape[-2:]
    ch, sh = dft_matrices(H)
    cw, sw = dft_matrices(W)
    return ((ch @ re - sh @ im) @ cw - (sh @ re + ch @ im) @ sw) / (H * W)


def decompose(x) -> SpectralPair:
    """Amplitude and phase of ``dft2(x)`` as one differentiable primitive.

    Amplitude is ``sqrt(re^2 + im^2 + eps^2)`` so its gradient stays finite at
    empty bins. Phase uses the two-argument arctangent, is 0 at the origin and
    lies in (-pi, pi].
    """
    x = T.as_tensor(x)
    H, W = _grid_dims(x)
    re, im = _forward_kernel(x.data)
    r2 = re * re + im * im
    amp = np.sqrt(r2 + AMPLITUDE_EPS**2)
    phase = np.arctan2(im, re)
    phase = np.where(phase <= -math.pi, math.pi, phase)
    nz = r2 > 0.0
    safe = np.where(nz, r2, 1.0)

    def backward(gs, need):
        g_amp, g_phase = gs
        g_re = g_amp * re / amp - np.where(nz, g_phase * im / safe, 0.0)
        g_im = g_amp * im / amp + np.where(nz, g_phase * re / safe, 0.0)
        # adjoint of the forward transform is HW times the inverse's real part
        return ((H * W) * _inverse_kernel(g_re, g_im),)

    a, p = T.record_multi((amp, phase), (x,), backward)
    return SpectralPair(a, p)


def compose(pair: SpectralPair, strict: bool = True) -> Tensor:
    """Rebuild ``amp*cos(phase) + i*amp*sin(phase)`` and invert it.

    ``strict`` behaves as in :func:`idft2`.
    """
    amp, phase = pair.amplitude, pair.phase
    H, W = _grid_dims(amp)
    c, s = np.cos(phase.data), np.sin(phase.data)
    re, im = amp.data * c, amp.data * s
    if strict:
        grid = ComplexGrid(Tensor._wrap(re, False), Tensor._wrap(im, False))
        resid = float(np.max(np.abs(imaginary_residual(grid))))
        if resid > SYMMETRY_TOL:
            raise SymmetryError(f"inverse transform has imaginary residual {resid:.3e}")
    out = _inverse_kernel(re, im)

    def backward(g, need):
        # adjoint of the inverse's real part is the forward transform over HW
        g_re, g_im = _forward_kernel(g)
        g_re, g_im = g_re / (H * W), g_im / (H * W)
        g_amp = g_re * c + g_im * s if need[0] else None
        g_phase = amp.data * (g_im * c - g_re * s) if need[1] else None
        return g_amp, g_phase

    return T.record_op(out, (amp, phase), backward)


# --------------------------------------------------------------------------
# literal summation oracles


def dft2_reference(x: np.ndarray) -> np.ndarray:
    """Direct double sum over (h, w) for every output bin; complex result."""
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-2]
    H, W = x.shape[-2:]
    flat = x.reshape(-1, H, W)
    out = np.zeros(flat.shape, dtype=complex)
    for c in range(flat.shape[0]):
        for u in range(H):
            for v in range(W):
                acc = 0j
                for h in range(H):
                    for w in range(W):
                        acc += flat[c, h, w] * cmath.exp(-2j * math.pi * (u * h / H + v * w / W))
                out[c, u, v] = acc
    return out.reshape(lead + (H, W))


def idft2_reference(X: np.ndarray) -> np.ndarray:
    """Direct inverse double sum with the 1/(HW) factor; complex result."""
    X = np.asarray(X, dtype=complex)
    lead = X.shape[:-2]
    H, W = X.shape[-2:]
    flat = X.reshape(-1, H, W)
    out = np.zeros(flat.shape, dtype=complex)
    for c in range(flat.shape[0]):
        for h in range(H):
            for w in range(W):
                acc = 0j
                for u in range(H):
                    for v in range(W):
                        acc += flat[c, u, v] * cmath.exp(2j * math.pi * (u * h / H + v * w / W))
                out[c, h, w] = acc / (H * W)
    return out.reshape(lead + (H, W))


def hermitian_mirror(X: np.ndarray) -> np.ndarray:
    """``X[(-u) mod H, (-v) mod W]`` on the last two axes."""
    return np.roll(np.flip(X, axis=(-2, -1)), shift=(1, 1), axis=(-2, -1))
