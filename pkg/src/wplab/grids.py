"""Uniform tensor grids: spectral and finite-difference derivatives, windows.

Fields everywhere in this package are complex arrays of shape ``(n_u, n_v)``.
Axis 0 is an angular direction and is always periodic; axis 1 is a transverse
direction that is either bounded (4th-order central differences with zero
extension beyond the ends) or periodic (flat torus charts).

Both derivative constructions are exactly antisymmetric as matrices acting
along their axis.  The zero-extension convention for bounded axes is load
bearing: together with the constant-coefficient quadrature weights chosen by
the surface charts it makes the discrete raising/lowering operators exact
negative adjoints of each other, not just up to truncation error.  Do not
replace the zero extension with one-sided stencils.
"""

from __future__ import annotations

from functools import lru_cache
from math import comb

import numpy as np
from scipy import sparse

__all__ = [
    "spectral_mode_numbers",
    "spectral_derivative",
    "shifted",
    "fd4_derivative",
    "fd4_matrix",
    "periodic_fd4_derivative",
    "periodic_fd4_second",
    "periodic_fd6_derivative",
    "periodic_fd6_matrix",
    "smoothstep",
    "smoothstep_with_derivatives",
    "poly_smoothstep",
    "poly_smoothstep_with_derivatives",
]

# Stencil (f[j-2], f[j-1], f[j+1], f[j+2]) coefficients of the 4th-order
# first derivative, to be divided by the spacing.
_FD4_W = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
_FD4_OFF = (-2, -1, 1, 2)

# 6th-order centered first derivative, used on fully periodic axes where the
# wider stencil never needs one-sided closure.
_FD6_W = np.array([-1.0, 9.0, -45.0, 45.0, -9.0, 1.0]) / 60.0
_FD6_OFF = (-3, -2, -1, 1, 2, 3)


def spectral_mode_numbers(n):
    """Integer wavenumbers for an ``n``-point periodic axis.

    The Nyquist mode (present for even ``n``) is zeroed so that the
    differentiation matrix stays real and antisymmetric.
    """
    k = np.fft.fftfreq(n, d=1.0 / n)
    if n % 2 == 0:
        k[n // 2] = 0.0
    return k


def spectral_derivative(values, period, axis=0):
    """Differentiate samples of a ``period``-periodic function by FFT."""
    values = np.asarray(values)
    n = values.shape[axis]
    mult = (2j * np.pi / period) * spectral_mode_numbers(n)
    shape = [1] * values.ndim
    shape[axis] = n
    spec = np.fft.fft(values, axis=axis) * mult.reshape(shape)
    return np.fft.ifft(spec, axis=axis)


def shifted(values, offset, axis, periodic=False):
    """Shift samples along ``axis`` so ``out[j] = values[j + offset]``.

    Bounded axes are extended by zero; periodic axes wrap.
    """
    if periodic:
        return np.roll(values, -offset, axis=axis)
    values = np.asarray(values)
    out = np.zeros_like(values)
    n = values.shape[axis]
    if abs(offset) >= n:
        return out
    src = [slice(None)] * values.ndim
    dst = [slice(None)] * values.ndim
    if offset >= 0:
        src[axis] = slice(offset, n)
        dst[axis] = slice(0, n - offset)
    else:
        src[axis] = slice(0, n + offset)
        dst[axis] = slice(-offset, n)
    out[tuple(dst)] = values[tuple(src)]
    return out


def fd4_derivative(values, spacing, axis=1):
    """4th-order centered first derivative with zero extension at the ends.

    The two rows nearest each end use out-of-range samples equal to zero, so
    they are only meaningful for fields that vanish there; callers track a
    validity mask for that reason.
    """
    acc = np.zeros_like(np.asarray(values, dtype=np.result_type(values, 1.0)))
    for w, off in zip(_FD4_W, _FD4_OFF):
        acc += w * shifted(values, off, axis)
    return acc / spacing


@lru_cache(maxsize=64)
def fd4_matrix(n, spacing):
    """Sparse matrix of :func:`fd4_derivative` along one bounded axis."""
    diags = [np.full(n - abs(off), w / spacing) for w, off in zip(_FD4_W, _FD4_OFF)]
    return sparse.diags(diags, _FD4_OFF, format="csr")


@lru_cache(maxsize=64)
def periodic_fd4_matrix(n, spacing):
    """Sparse matrix of :func:`periodic_fd4_derivative` along one axis."""
    mat = sparse.lil_matrix((n, n))
    idx = np.arange(n)
    for w, off in zip(_FD4_W, _FD4_OFF):
        mat[idx, (idx + off) % n] = w / spacing
    return mat.tocsr()


def periodic_fd4_derivative(values, spacing, axis):
    """4th-order centered first derivative with wraparound.

    Local stencil alternative to :func:`spectral_derivative` for fields whose
    global smoothness is limited to a small region (solved torus densities
    near the cusp).
    """
    acc = np.zeros_like(np.asarray(values, dtype=np.result_type(values, 1.0)))
    for w, off in zip(_FD4_W, _FD4_OFF):
        acc += w * shifted(values, off, axis, periodic=True)
    return acc / spacing


@lru_cache(maxsize=64)
def periodic_fd6_matrix(n, spacing):
    """Sparse matrix of :func:`periodic_fd6_derivative` along one axis."""
    mat = sparse.lil_matrix((n, n))
    idx = np.arange(n)
    for w, off in zip(_FD6_W, _FD6_OFF):
        mat[idx, (idx + off) % n] = w / spacing
    return mat.tocsr()


def periodic_fd6_derivative(values, spacing, axis):
    """6th-order centered first derivative with wraparound.

    Same role as :func:`periodic_fd4_derivative` with two extra orders; the
    stencil is still antisymmetric, so discrete adjointness of the
    raising/lowering pairs built from it remains exact.
    """
    acc = np.zeros_like(np.asarray(values, dtype=np.result_type(values, 1.0)))
    for w, off in zip(_FD6_W, _FD6_OFF):
        acc += w * shifted(values, off, axis, periodic=True)
    return acc / spacing


def periodic_fd4_second(values, spacing, axis):
    """4th-order centered second derivative with wraparound."""
    w = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
    offsets = (-2, -1, 0, 1, 2)
    acc = np.zeros_like(np.asarray(values, dtype=np.result_type(values, 1.0)))
    for c, off in zip(w, offsets):
        acc += c * shifted(values, off, axis, periodic=True)
    return acc / spacing**2


def _psi(t):
    """exp(-1/t) for t > 0, exactly 0 otherwise."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    with np.errstate(over="ignore"):
        out[pos] = np.exp(-1.0 / t[pos])
    return out


def smoothstep(x, lo=0.5, hi=1.0):
    """C-infinity transition equal to 1 for ``x <= lo`` and 0 for ``x >= hi``."""
    return smoothstep_with_derivatives(x, lo, hi)[0]


def poly_smoothstep(x, lo=0.5, hi=1.0, order=4):
    """Polynomial transition equal to 1 for ``x <= lo`` and 0 for ``x >= hi``.

    Matches ``order`` derivatives at both ends.  Its interior derivative
    magnitudes grow only polynomially with the matching order, unlike the
    bump-quotient step, so fields tapered by it stay friendly to 4th-order
    stencils even over moderate transition widths.
    """
    return poly_smoothstep_with_derivatives(x, lo, hi, order)[0]


@lru_cache(maxsize=16)
def _poly_step_coefficients(order):
    n = order
    coef = np.zeros(2 * n + 2)
    for k in range(n + 1):
        coef[n + 1 + k] = comb(n + k, k) * comb(2 * n + 1, n - k) * (-1.0) ** k
    return coef


def poly_smoothstep_with_derivatives(x, lo=0.5, hi=1.0, order=4):
    """Polynomial smoothstep together with its first two derivatives in ``x``."""
    from numpy.polynomial import polynomial as P

    scale = 1.0 / (hi - lo)
    t = np.clip((np.asarray(x, dtype=float) - lo) * scale, 0.0, 1.0)
    coef = _poly_step_coefficients(order)
    s = 1.0 - P.polyval(t, coef)
    mid = (t > 0.0) & (t < 1.0)
    d1 = np.zeros_like(t)
    d2 = np.zeros_like(t)
    d1[mid] = -P.polyval(t[mid], P.polyder(coef)) * scale
    d2[mid] = -P.polyval(t[mid], P.polyder(coef, 2)) * scale**2
    return s, d1, d2


def smoothstep_with_derivatives(x, lo=0.5, hi=1.0):
    """Smoothstep together with its first two derivatives in ``x``.

    Built from the bump quotient psi(1-t)/(psi(t)+psi(1-t)) with
    psi(t)=exp(-1/t); the derivatives are needed in closed form because the
    torus reference-density defect is evaluated analytically rather than by
    differencing a singular field.
    """
    x = np.asarray(x, dtype=float)
    scale = 1.0 / (hi - lo)
    t = (x - lo) * scale
    s = np.where(t <= 0.0, 1.0, np.where(t >= 1.0, 0.0, 0.5))
    d1 = np.zeros_like(t)
    d2 = np.zeros_like(t)
    mid = (t > 0.0) & (t < 1.0)
    if np.any(mid):
        tm = t[mid]
        a = _psi(1.0 - tm)
        b = _psi(tm)
        ap = -a / (1.0 - tm) ** 2
        bp = b / tm**2
        app = a * (1.0 / (1.0 - tm) ** 4 - 2.0 / (1.0 - tm) ** 3)
        bpp = b * (1.0 / tm**4 - 2.0 / tm**3)
        den = a + b
        num = ap * b - a * bp
        s[mid] = a / den
        d1[mid] = num / den**2
        d2[mid] = ((app * b - a * bpp) * den - 2.0 * num * (ap + bp)) / den**3
    return s, d1 * scale, d2 * scale**2
