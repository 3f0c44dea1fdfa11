"""Model surfaces sampled on a single global chart.

Every surface is a tensor grid: axis 0 an angle (periodic, spectral
derivatives), axis 1 a transverse coordinate.  The transverse coordinate is
always the hyperbolic arc length ``sigma`` of the transverse direction, so
sample density follows the geometry, and the complex chart derivative takes
the form ``dz = cu * D_u + cv * D_v`` with the product of ``cv`` and the
chart quadrature weight constant along axis 1.  That constancy is what makes
the discrete tensor calculus exactly skew-adjoint.

Charts:

* collar: cylinder ``zeta = theta + i s`` with density ``c cosh(sigma)``,
  ``s = gd(sigma)/c``, core at ``sigma = 0``;
* disk: logarithmic coordinate ``w = log z = rho + i theta`` with density
  ``sinh(sigma)``, ``rho = log tanh(sigma/2)``;
* punctured disk: the same ``w`` chart with ``sigma = log(-log r)`` and
  density ``exp(-sigma)``;
* torus: flat coordinate ``z = x + tau y`` on the unit square with lattice
  identifications; both axes periodic.

The logarithmic charts are honest global charts for sections of every
integer weight: the angular transition factor is single valued.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import grids
from .errors import DomainError

__all__ = [
    "ModelSurface",
    "disk_surface",
    "punctured_disk_surface",
    "collar_surface",
    "flat_torus",
    "punctured_torus_geometry",
    "punctured_torus_surface",
    "wrapped_displacement",
]

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True, eq=False)
class ModelSurface:
    """A surface chart with its density, derivative coefficients and weights.

    Fields of shape ``(n_u, n_v)`` are broadcast against the grid; ``cu`` and
    ``cv`` may be scalars.  ``chart_weights`` are quadrature weights for the
    chart area element (no density factor); hyperbolic-area weights are
    ``lam**2 * chart_weights``.

    Instances are immutable; all arrays are marked read-only.
    """

    kind: str
    params: dict
    u: np.ndarray
    v: np.ndarray
    u_period: float
    v_spacing: float
    v_periodic: bool
    lam: np.ndarray
    cu: np.ndarray
    cv: np.ndarray
    chart_weights: np.ndarray
    norm_mask: np.ndarray
    truncation: dict
    density: Optional[Callable]
    fuchsian_traces: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    local_stencils: bool = False

    @property
    def shape(self):
        return (self.u.size, self.v.size)

    @property
    def area_weights(self):
        """Quadrature weights against the hyperbolic area element."""
        return self.lam**2 * self.chart_weights

    def d_u(self, values):
        if self.local_stencils:
            return grids.periodic_fd6_derivative(
                values, self.u_period / self.u.size, axis=0
            )
        return grids.spectral_derivative(values, self.u_period, axis=0)

    def d_v(self, values):
        if self.v_periodic:
            if self.local_stencils:
                return grids.periodic_fd6_derivative(values, self.v_spacing, axis=1)
            return grids.spectral_derivative(
                values, self.v_spacing * self.v.size, axis=1
            )
        return grids.fd4_derivative(values, self.v_spacing, axis=1)

    def dz(self, values):
        """Discrete holomorphic chart derivative."""
        return self.cu * self.d_u(values) + self.cv * self.d_v(values)

    def dzb(self, values):
        """Discrete antiholomorphic chart derivative (conjugate coefficients)."""
        return np.conj(self.cu) * self.d_u(values) + np.conj(self.cv) * self.d_v(
            values
        )

    def erode_valid(self, valid):
        """Shrink a validity mask by the stencil half width on bounded axes."""
        if self.v_periodic:
            return valid
        out = valid.copy()
        for off in (-2, -1, 1, 2):
            out &= grids.shifted(valid, off, axis=1)
        return out


def _freeze(surface):
    for name in ("u", "v", "lam", "cu", "cv", "chart_weights", "norm_mask"):
        arr = getattr(surface, name)
        if isinstance(arr, np.ndarray):
            arr.flags.writeable = False
    return surface


def _resolution_pair(resolution):
    if np.isscalar(resolution):
        resolution = (int(resolution), int(resolution))
    nu, nv = int(resolution[0]), int(resolution[1])
    if nu < 16 or nv < 16:
        raise DomainError("resolution must be at least 16 per axis")
    if nv % 2:
        raise DomainError("transverse resolution must be even")
    return nu, nv


def _bounded_mask(nu, nv):
    mask = np.ones((nu, nv), dtype=bool)
    mask[:, :2] = False
    mask[:, -2:] = False
    return mask


def collar_surface(core_length, resolution=256):
    """Hyperbolic cylinder with core geodesic length ``core_length``.

    Truncated where the boundary circle has length 2, so the boundary
    injectivity width is 1.  The core sits at ``sigma = 0`` (equivalently
    ``s = 0``), and the Fuchsian trace of the core element is recorded.
    """
    ell = float(core_length)
    if ell <= 0:
        raise DomainError("collar core length must be positive")
    if ell >= 2.0:
        raise DomainError("collar core length must be below 2 for a width-1 boundary")
    nu, nv = _resolution_pair(resolution)
    c = ell / TWO_PI
    sigma_max = np.arccosh(2.0 / ell)
    theta = np.arange(nu) * (TWO_PI / nu)
    sigma = np.linspace(-sigma_max, sigma_max, nv)
    dsig = sigma[1] - sigma[0]
    lam1d = c * np.cosh(sigma)
    lam = np.broadcast_to(lam1d, (nu, nv)).copy()
    # zeta = theta + i s, d/ds = lam d/dsigma
    cu = np.asarray(0.5 + 0.0j)
    cv = (-0.5j * lam1d)[np.newaxis, :] + np.zeros((nu, 1))
    chart_w = (TWO_PI / nu) * dsig / lam
    s = np.arcsin(np.tanh(sigma)) / c

    def density(s_coord):
        return c / np.cos(c * np.asarray(s_coord))

    surface = ModelSurface(
        kind="collar",
        params={"core_length": ell},
        u=theta,
        v=sigma,
        u_period=TWO_PI,
        v_spacing=dsig,
        v_periodic=False,
        lam=lam,
        cu=cu,
        cv=cv,
        chart_weights=chart_w,
        norm_mask=_bounded_mask(nu, nv),
        truncation={"sigma_max": float(sigma_max), "boundary_circumference": 2.0},
        density=density,
        fuchsian_traces={"core": 2.0 * np.cosh(ell / 2.0)},
        extra={"s": s, "half_width_s": float(np.arcsin(np.tanh(sigma_max)) / c)},
    )
    return _freeze(surface)


def disk_surface(resolution=256, sigma_min=0.25, sigma_max=4.0):
    """Hyperbolic disk in the logarithmic chart ``w = log z``.

    ``sigma`` is hyperbolic distance from the center, ``|z| = tanh(sigma/2)``.
    The outer truncation keeps the density's dynamic range small enough that
    cubic density conjugations stay well conditioned in double precision.
    The chart excludes a small disk around the coordinate singularity at the
    center and truncates near the rim; integral tests use fields supported
    away from both bands.
    """
    nu, nv = _resolution_pair(resolution)
    if not 0 < sigma_min < sigma_max:
        raise DomainError("need 0 < sigma_min < sigma_max")
    theta = np.arange(nu) * (TWO_PI / nu)
    sigma = np.linspace(sigma_min, sigma_max, nv)
    dsig = sigma[1] - sigma[0]
    lam1d = np.sinh(sigma)
    lam = np.broadcast_to(lam1d, (nu, nv)).copy()
    # w = rho + i theta, d/drho = sinh(sigma) d/dsigma
    cu = np.asarray(-0.5j)
    cv = (0.5 * lam1d)[np.newaxis, :] + np.zeros((nu, 1))
    chart_w = (TWO_PI / nu) * dsig / lam

    def density(z):
        z = np.asarray(z, dtype=complex)
        return 2.0 / (1.0 - np.abs(z) ** 2)

    surface = ModelSurface(
        kind="disk",
        params={},
        u=theta,
        v=sigma,
        u_period=TWO_PI,
        v_spacing=dsig,
        v_periodic=False,
        lam=lam,
        cu=cu,
        cv=cv,
        chart_weights=chart_w,
        norm_mask=_bounded_mask(nu, nv),
        truncation={"sigma_min": float(sigma_min), "sigma_max": float(sigma_max)},
        density=density,
        extra={"radius": np.tanh(sigma / 2.0), "rho": np.log(np.tanh(sigma / 2.0))},
    )
    return _freeze(surface)


def punctured_disk_surface(resolution=256, r_outer=0.75, horocycle_level=16.0):
    """Punctured disk (cusp model) in the chart ``w = log z``.

    The density at distance ``r`` from the puncture is ``1/(r |log r|)``.
    ``sigma = log(-log r)`` increases toward the puncture; the chart is
    truncated at the horocycle ``-log r = horocycle_level`` and at ``r_outer``.
    """
    nu, nv = _resolution_pair(resolution)
    if not 0 < r_outer < 1:
        raise DomainError("outer radius must lie in (0, 1)")
    L_outer = -np.log(r_outer)
    if horocycle_level <= L_outer:
        raise DomainError("horocycle level must exceed -log(r_outer)")
    theta = np.arange(nu) * (TWO_PI / nu)
    sigma = np.linspace(np.log(L_outer), np.log(horocycle_level), nv)
    dsig = sigma[1] - sigma[0]
    lam1d = np.exp(-sigma)
    lam = np.broadcast_to(lam1d, (nu, nv)).copy()
    # rho = log r = -exp(sigma), d/drho = -exp(-sigma) d/dsigma
    cu = np.asarray(-0.5j)
    cv = (-0.5 * lam1d)[np.newaxis, :] + np.zeros((nu, 1))
    chart_w = (TWO_PI / nu) * dsig * np.exp(sigma)[np.newaxis, :] + np.zeros((nu, 1))

    def density(z):
        z = np.asarray(z, dtype=complex)
        r = np.abs(z)
        return 1.0 / (r * np.abs(np.log(r)))

    surface = ModelSurface(
        kind="punctured_disk",
        params={},
        u=theta,
        v=sigma,
        u_period=TWO_PI,
        v_spacing=dsig,
        v_periodic=False,
        lam=lam,
        cu=cu,
        cv=cv,
        chart_weights=chart_w,
        norm_mask=_bounded_mask(nu, nv),
        truncation={"r_outer": float(r_outer), "horocycle_level": float(horocycle_level)},
        density=density,
        extra={"radius": np.exp(-np.exp(sigma))},
    )
    return _freeze(surface)


def wrapped_displacement(x, y, px, py, tau):
    """Shortest lattice representative of ``(x - px) + tau (y - py)``.

    Returns the complex displacement and its modulus.  The search over the
    nine neighboring lattice shifts handles non-rectangular moduli.
    """
    dx = (x - px + 0.5) % 1.0 - 0.5
    dy = (y - py + 0.5) % 1.0 - 0.5
    best = None
    best_abs = None
    for mx in (-1.0, 0.0, 1.0):
        for my in (-1.0, 0.0, 1.0):
            cand = (dx + mx) + tau * (dy + my)
            cand_abs = np.abs(cand)
            if best is None:
                best, best_abs = cand, cand_abs
            else:
                closer = cand_abs < best_abs
                best = np.where(closer, cand, best)
                best_abs = np.where(closer, cand_abs, best_abs)
    return best, best_abs


def _torus_axes(tau, resolution):
    tau = complex(tau)
    if tau.imag <= 0:
        raise DomainError("torus modulus must have positive imaginary part")
    nu, nv = _resolution_pair(resolution)
    x = np.arange(nu) / nu
    y = np.arange(nv) / nv
    cu = np.asarray(np.conj(tau) / (np.conj(tau) - tau))
    cv = np.asarray(-1.0 / (np.conj(tau) - tau))
    chart_w = np.full((nu, nv), tau.imag / (nu * nv))
    return tau, nu, nv, x, y, cu, cv, chart_w


def flat_torus(tau, resolution=64):
    """Flat torus chart ``z = x + tau y`` with unit density.

    Carrier for quasiconformal-map and period computations that do not need
    a hyperbolic density.
    """
    tau, nu, nv, x, y, cu, cv, chart_w = _torus_axes(tau, resolution)
    surface = ModelSurface(
        kind="flat_torus",
        params={"tau": tau},
        u=x,
        v=y,
        u_period=1.0,
        v_spacing=1.0 / nv,
        v_periodic=True,
        lam=np.ones((nu, nv)),
        cu=cu,
        cv=cv,
        chart_weights=chart_w,
        norm_mask=np.ones((nu, nv), dtype=bool),
        truncation={},
        density=lambda z: np.ones_like(np.asarray(z, dtype=float)),
        extra={"tau": tau},
    )
    return _freeze(surface)


def punctured_torus_geometry(tau, resolution):
    """Grid geometry for a once-punctured torus, density not yet solved.

    The puncture is placed at the centroid of a grid cell so the singular
    density is never evaluated at a node.
    """
    tau, nu, nv, x, y, cu, cv, chart_w = _torus_axes(tau, resolution)
    px = (nu // 2 + 0.5) / nu
    py = (nv // 2 + 0.5) / nv
    xx, yy = np.meshgrid(x, y, indexing="ij")
    disp, dist = wrapped_displacement(xx, yy, px, py, tau)
    mask = np.ones((nu, nv), dtype=bool)
    i0, j0 = nu // 2, nv // 2
    cells_i = np.arange(i0 - 1, i0 + 3) % nu
    cells_j = np.arange(j0 - 1, j0 + 3) % nv
    mask[np.ix_(cells_i, cells_j)] = False
    return {
        "tau": tau,
        "nu": nu,
        "nv": nv,
        "x": x,
        "y": y,
        "cu": cu,
        "cv": cv,
        "chart_weights": chart_w,
        "puncture": (px, py),
        "puncture_z": px + tau * py,
        "disp": disp,
        "dist": dist,
        "norm_mask": mask,
    }


def punctured_torus_surface(geometry, lam, truncation, extra):
    """Assemble the punctured-torus surface from solved density samples.

    Torus charts differentiate with periodic local stencils in both axes so
    that the elliptic operators built from ``dz``/``dzb`` are sparse matrices
    and can be factorized directly.
    """
    g = geometry
    log_lam = np.log(lam)

    def density(z):
        # Bicubic interpolation of log density on the periodic chart.
        from scipy.ndimage import map_coordinates

        z = np.atleast_1d(np.asarray(z, dtype=complex))
        tau = g["tau"]
        y = z.imag / tau.imag
        x = z.real - y * tau.real
        coords = np.array([x * g["nu"], y * g["nv"]])
        vals = map_coordinates(log_lam, coords, order=3, mode="grid-wrap")
        return np.exp(vals)

    surface = ModelSurface(
        kind="punctured_torus",
        params={"tau": g["tau"]},
        u=g["x"],
        v=g["y"],
        u_period=1.0,
        v_spacing=1.0 / g["nv"],
        v_periodic=True,
        lam=np.asarray(lam),
        cu=g["cu"],
        cv=g["cv"],
        chart_weights=g["chart_weights"],
        norm_mask=g["norm_mask"],
        truncation=truncation,
        density=density,
        extra={
            "tau": g["tau"],
            "puncture": g["puncture"],
            "puncture_z": g["puncture_z"],
            "disp": g["disp"],
            "dist": g["dist"],
            **extra,
        },
        local_stencils=True,
    )
    return _freeze(surface)
