"""Weight-r tensor fields on surface grids: calculus, products, norms.

A weight-r section stores the plain chart components of a tensor of type
(r/2, -r/2); the component modulus is then chart invariant.  Raising and
lowering derivatives are

    k: sigma -> lam^(r-1) d_z (lam^(-r) sigma)        (weight r -> r+1)
    l: sigma -> lam^(-r-1) d_zbar (lam^r sigma)       (weight r -> r-1)

and the weight-r Laplacian is ``4 l k + r(r+1)``.

The Hermitian product integrates ``a conj(b)`` against the hyperbolic area
element, with one fixed formula for every weight.  ``inner_product`` sums
over all nodes: that is the bilinear form in which the discrete k/l
operators are exact negative adjoints.  Norms, by contrast, are measured on
the validity mask (boundary rings and cusp cells excluded).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import grids
from .errors import DomainError
from .surfaces import ModelSurface

__all__ = [
    "Section",
    "section",
    "k_derivative",
    "l_derivative",
    "laplacian",
    "inner_product",
    "norms",
    "NormReport",
    "pair_with_quadratic",
    "conjugate_section",
    "flat_quadratic_data",
    "flat_harmonic_section",
    "boundary_window",
    "synthetic_section",
    "derivative_chains",
]


@dataclass(frozen=True, eq=False)
class Section:
    """Grid samples of a weight-r tensor field on one surface chart."""

    surface: ModelSurface
    weight: int
    values: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def section(surface, weight, values, valid=None):
    """Wrap values as a :class:`Section`, defaulting the validity mask."""
    values = np.asarray(values, dtype=complex)
    if values.shape != surface.shape:
        raise DomainError(
            f"values shape {values.shape} does not match grid {surface.shape}"
        )
    if valid is None:
        valid = surface.norm_mask.copy()
    return Section(surface, int(weight), values, np.asarray(valid, dtype=bool))


def _lam_power(surface, p):
    if p == 0:
        return 1.0
    return surface.lam**p


def k_derivative(sigma):
    """Raising derivative, weight r to r+1."""
    srf = sigma.surface
    r = sigma.weight
    vals = _lam_power(srf, r - 1) * srf.dz(_lam_power(srf, -r) * sigma.values)
    return Section(srf, r + 1, vals, srf.erode_valid(sigma.valid))


def l_derivative(sigma):
    """Lowering derivative, weight r to r-1."""
    srf = sigma.surface
    r = sigma.weight
    vals = _lam_power(srf, -r - 1) * srf.dzb(_lam_power(srf, r) * sigma.values)
    return Section(srf, r - 1, vals, srf.erode_valid(sigma.valid))


def laplacian(sigma):
    """Weight-r Laplacian ``4 l k + r(r+1)`` (canonical composition)."""
    r = sigma.weight
    lk = l_derivative(k_derivative(sigma))
    vals = 4.0 * lk.values + r * (r + 1) * sigma.values
    return Section(sigma.surface, r, vals, lk.valid)


def conjugate_section(sigma):
    """Complex conjugate, weight r to -r."""
    return Section(sigma.surface, -sigma.weight, np.conj(sigma.values), sigma.valid)


def _check_compatible(a, b):
    if a.surface is not b.surface:
        raise DomainError("sections live on different surfaces")
    if a.weight != b.weight:
        raise TypeError(f"weight mismatch: {a.weight} vs {b.weight}")


def inner_product(a, b):
    """Hermitian product against the hyperbolic area element, all nodes."""
    _check_compatible(a, b)
    return complex(np.sum(a.values * np.conj(b.values) * a.surface.area_weights))


def pair_with_quadratic(mu, q_values):
    """Pairing of a weight -2 section with quadratic-differential data.

    ``q_values`` are the plain chart components of a holomorphic quadratic
    differential; the integrand ``mu * q`` carries no density factor.
    """
    if mu.weight != -2:
        raise TypeError("pairing is defined for weight -2 sections")
    q_values = np.asarray(q_values, dtype=complex)
    return complex(np.sum(mu.values * q_values * mu.surface.chart_weights))


@dataclass(frozen=True)
class NormReport:
    """Norm summary of one section."""

    c0: float
    l1: float
    l2: float
    sobolev: dict = field(default_factory=dict)
    holder: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "c0": self.c0,
            "l1": self.l1,
            "l2": self.l2,
            "sobolev": {str(k): v for k, v in self.sobolev.items()},
            "holder": {f"{k},{a}": v for (k, a), v in self.holder.items()},
        }


def _masked_sup(sigma):
    mask = sigma.valid & sigma.surface.norm_mask
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(sigma.values)[mask]))


def _masked_lp(sigma, p):
    mask = sigma.valid & sigma.surface.norm_mask
    w = sigma.surface.area_weights
    vals = np.abs(sigma.values) ** p * w
    return float(np.sum(vals[mask]) ** (1.0 / p))


def derivative_chains(sigma, order):
    """All compositions of k/l derivatives of exactly ``order`` applications."""
    level = [sigma]
    for _ in range(order):
        level = [f(s) for s in level for f in (k_derivative, l_derivative)]
    return level


def _chain_distance_pairs(sigma, alpha):
    """Max discrete Hoelder quotient over dyadic node separations <= 1.

    Distances use the local density: exact along the transverse axis (its
    coordinate is hyperbolic arc length) and midpoint-approximate along the
    angle.  The quotient is comparison grade, not an exact Hoelder norm.
    """
    srf = sigma.surface
    vals = sigma.values
    valid = sigma.valid & srf.norm_mask
    lam = srf.lam
    best = 0.0
    nu, nv = srf.shape

    lag = 1
    while lag <= nu // 2:
        dv = np.abs(vals - np.roll(vals, lag, axis=0))
        ok = valid & np.roll(valid, lag, axis=0)
        step = srf.u_period / nu * lag
        dist = 0.5 * (lam + np.roll(lam, lag, axis=0)) * step
        ok &= dist <= 1.0
        if ok.any():
            best = max(best, float(np.max(dv[ok] / dist[ok] ** alpha)))
        lag *= 2

    lag = 1
    while lag <= nv // 2:
        if srf.v_periodic:
            dv = np.abs(vals - np.roll(vals, lag, axis=1))
            ok = valid & np.roll(valid, lag, axis=1)
            step = abs(srf.extra.get("tau", 1.0)) * srf.v_spacing * lag
            dist = 0.5 * (lam + np.roll(lam, lag, axis=1)) * step
        else:
            dv = np.abs(vals - grids.shifted(vals, lag, axis=1))
            ok = valid & grids.shifted(valid, lag, axis=1)
            dist = np.full_like(lam, srf.v_spacing * lag)
        ok &= dist <= 1.0
        if ok.any():
            best = max(best, float(np.max(dv[ok] / dist[ok] ** alpha)))
        lag *= 2
    return best


def norms(sigma, holder_orders=(0, 2), holder_alpha=0.5):
    """Assemble the :class:`NormReport` for a section.

    Sobolev norms follow the two-derivative term list
    ``{id; k, l; kk, lk, ll}``; Hoelder norms combine the sups of all
    derivative chains up to the requested order with discrete Hoelder
    quotients of the top-order chains.
    """
    c0 = _masked_sup(sigma)
    l1 = _masked_lp(sigma, 1)
    l2 = _masked_lp(sigma, 2)

    ks = k_derivative(sigma)
    ls = l_derivative(sigma)
    h1 = np.sqrt(l2**2 + _masked_lp(ks, 2) ** 2 + _masked_lp(ls, 2) ** 2)
    kk = k_derivative(ks)
    lk = l_derivative(ks)
    ll = l_derivative(ls)
    h2 = np.sqrt(
        h1**2
        + _masked_lp(kk, 2) ** 2
        + _masked_lp(lk, 2) ** 2
        + _masked_lp(ll, 2) ** 2
    )
    sobolev = {1: float(h1), 2: float(h2)}

    holder = {}
    chains_by_order = {0: [sigma], 1: [ks, ls], 2: [kk, lk, ll, k_derivative(ls)]}
    for k in holder_orders:
        sup_part = max(
            _masked_sup(c) for j in range(k + 1) for c in chains_by_order[j]
        )
        quot = max(_chain_distance_pairs(c, holder_alpha) for c in chains_by_order[k])
        holder[(k, holder_alpha)] = float(sup_part + quot)
    return NormReport(c0=c0, l1=l1, l2=l2, sobolev=sobolev, holder=holder)


def flat_quadratic_data(surface):
    """Chart components of the reference holomorphic quadratic differential.

    Torus and collar charts carry the constant differential; the disk charts
    carry the pullback of the constant differential of the reference
    coordinate, which in the logarithmic chart is ``exp(2w)``.
    """
    nu, nv = surface.shape
    if surface.kind in ("punctured_torus", "flat_torus", "collar"):
        return np.ones((nu, nv), dtype=complex)
    if surface.kind == "disk":
        rho = surface.extra["rho"]
        w = rho[np.newaxis, :] + 1j * surface.u[:, np.newaxis]
        return np.exp(2.0 * w)
    if surface.kind == "punctured_disk":
        rho = -np.exp(surface.v)
        w = rho[np.newaxis, :] + 1j * surface.u[:, np.newaxis]
        return np.exp(2.0 * w)
    raise DomainError(f"no reference quadratic differential for kind {surface.kind}")


def flat_harmonic_section(surface):
    """Weight -2 harmonic section ``conj(q) lam^-2`` for the reference q."""
    q = flat_quadratic_data(surface)
    return section(surface, -2, np.conj(q) * surface.lam**-2.0)


def boundary_window(surface, taper_order=6, cusp_inner=0.1, cusp_outer=0.45):
    """Window vanishing where the chart is truncated or singular.

    On bounded charts this is the polynomial bump ``(4 t (1-t))^q`` in the
    normalized transverse coordinate: it vanishes to order ``q`` at both
    ends while keeping all derivative scales set by the full span, so
    4th-order stencils see it as a genuinely smooth field.  On the punctured
    torus the window is a radial polynomial cutoff around the cusp; it must
    finish its transition inside the wrapped-displacement cut locus at half
    a period, where the chart distance stops being smooth.  Smooth test
    fields are multiplied by this window so quadrature identities see no
    truncation flux.
    """
    nu, nv = surface.shape
    if surface.kind == "punctured_torus":
        return _cusp_window(surface.extra["dist"], cusp_inner, cusp_outer)
    if surface.kind == "flat_torus":
        return np.ones((nu, nv))
    t = (surface.v - surface.v[0]) / (surface.v[-1] - surface.v[0])
    w1d = (4.0 * t * (1.0 - t)) ** taper_order
    return np.broadcast_to(w1d, (nu, nv)).copy()


def _cusp_window(d, inner, outer):
    """1 away from the cusp, 0 within ``inner`` of it."""
    return 1.0 - grids.poly_smoothstep(d, lo=inner, hi=outer, order=4)


def synthetic_section(surface, weight, seed, mode_cap=4, poly_cap=4, window=None):
    """Deterministic smooth windowed test field.

    Built from closed-form functions of the chart coordinates only, so the
    same seed samples the same continuum field at every resolution; that is
    what refinement studies difference.
    """
    rng = np.random.default_rng(seed)
    modes = np.arange(-mode_cap, mode_cap + 1)
    coef = rng.normal(size=(modes.size, poly_cap + 1)) + 1j * rng.normal(
        size=(modes.size, poly_cap + 1)
    )
    nu, nv = surface.shape
    theta = surface.u[:, np.newaxis] * (2.0 * np.pi / surface.u_period)
    if surface.v_periodic:
        tv = surface.v * 2.0 * np.pi
    else:
        tv = (surface.v - surface.v[0]) / (surface.v[-1] - surface.v[0]) * 2.0 - 1.0
    vals = np.zeros((nu, nv), dtype=complex)
    for im, m in enumerate(modes):
        for k in range(poly_cap + 1):
            scale = 1.0 / (1.0 + m * m + k * k)
            if surface.v_periodic:
                basis_v = np.cos(k * tv) if k else np.ones_like(tv)
            else:
                basis_v = tv**k if k else np.ones_like(tv)
            vals += scale * coef[im, k] * np.exp(1j * m * theta) * basis_v
    if window is None:
        window = boundary_window(surface)
    vals = vals * window
    peak = np.max(np.abs(vals))
    if peak > 0.0:
        vals = vals / peak
    return section(surface, weight, vals)
