"""Surface construction and basic geometric measurement.

``construct_model`` is the single entry point for building model surfaces;
solved punctured-torus densities are cached per (modulus, resolution) so a
family study pays for each Liouville solve once.  The measurement helpers
compute hyperbolic areas with a closed-form cusp patch, Gauss curvature by
direct differentiation of the density, geodesic lengths from Fuchsian
traces, and geodesic lengths by discrete curve shortening.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from . import grids, surfaces
from .errors import ConstructionError, ConvergenceError, DomainError, SolverError
from .liouville import base_metric_solve, cusp_patch_area

__all__ = [
    "construct_model",
    "hyperbolic_area",
    "numeric_curvature",
    "trace_to_length",
    "geodesic_length_numeric",
    "surface_to_config",
]

# Solved torus surfaces keyed by (Re tau, Im tau, n_u, n_v); the values are
# immutable, so sharing them across callers is safe.
_TORUS_CACHE = {}

_CANONICAL_KINDS = {
    "disk": "disk",
    "punctureddisk": "punctured_disk",
    "collar": "collar",
    "puncturedtorus": "punctured_torus",
    "flattorus": "flat_torus",
}


def _canonical_kind(kind):
    key = str(kind).strip().lower().replace("_", "").replace("-", "")
    if key not in _CANONICAL_KINDS:
        raise DomainError(
            f"unknown surface kind {kind!r}; expected one of "
            f"{sorted(set(_CANONICAL_KINDS.values()))}"
        )
    return _CANONICAL_KINDS[key]


def _as_complex(value):
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    return complex(value)


def _check_keys(mapping, allowed, what):
    extra = set(mapping) - set(allowed)
    if extra:
        raise DomainError(f"unknown {what} keys {sorted(extra)}; allowed {sorted(allowed)}")


def construct_model(kind, params=None, resolution=256, truncation=None):
    """Build a model surface with its grid, density and quadrature.

    Parameters
    ----------
    kind : str
        One of ``disk``, ``punctured_disk``, ``collar``, ``punctured_torus``,
        ``flat_torus`` (case and underscore insensitive).
    params : dict, optional
        ``collar`` needs ``core_length``; the torus kinds need ``tau``
        (complex, or a ``[re, im]`` pair).  The disk kinds take none.
    resolution : int or (int, int)
        Nodes per axis; a scalar gives a square grid.
    truncation : dict, optional
        Chart cutoff overrides: ``sigma_min``/``sigma_max`` for the disk,
        ``r_outer``/``horocycle_level`` for the punctured disk.

    Returns
    -------
    ModelSurface
        Immutable surface with density samples, chart derivative
        coefficients and quadrature weights.

    Raises
    ------
    DomainError
        Parameters outside their valid ranges.
    ConstructionError
        The punctured-torus density solve failed; carries the solver report.
    """
    kind = _canonical_kind(kind)
    params = dict(params or {})
    truncation = dict(truncation or {})
    if kind == "disk":
        _check_keys(params, (), "parameter")
        _check_keys(truncation, ("sigma_min", "sigma_max"), "truncation")
        return surfaces.disk_surface(resolution=resolution, **truncation)
    if kind == "punctured_disk":
        _check_keys(params, (), "parameter")
        _check_keys(truncation, ("r_outer", "horocycle_level"), "truncation")
        return surfaces.punctured_disk_surface(resolution=resolution, **truncation)
    if kind == "collar":
        _check_keys(params, ("core_length",), "parameter")
        _check_keys(truncation, (), "truncation")
        if "core_length" not in params:
            raise DomainError("collar requires params['core_length']")
        return surfaces.collar_surface(params["core_length"], resolution=resolution)
    _check_keys(params, ("tau",), "parameter")
    _check_keys(truncation, (), "truncation")
    if "tau" not in params:
        raise DomainError(f"{kind} requires params['tau']")
    tau = _as_complex(params["tau"])
    if kind == "flat_torus":
        return surfaces.flat_torus(tau, resolution=resolution)
    if np.isscalar(resolution):
        res_pair = (int(resolution), int(resolution))
    else:
        res_pair = (int(resolution[0]), int(resolution[1]))
    key = (round(tau.real, 12), round(tau.imag, 12), res_pair)
    if key not in _TORUS_CACHE:
        try:
            surface, report = base_metric_solve(tau, resolution=res_pair)
        except SolverError as exc:
            raise ConstructionError(
                f"punctured-torus density solve failed for tau={tau}: {exc}",
                report=exc.report,
            ) from exc
        _TORUS_CACHE[key] = (surface, report)
    return _TORUS_CACHE[key][0]


def hyperbolic_area(surface, region=None):
    """Hyperbolic area of a region, or of the whole (truncated) surface.

    ``region`` is a boolean node mask in grid shape; ``None`` integrates the
    full chart.  Bounded transverse axes use trapezoid end weights; the
    punctured torus splits off the disk around the cusp where the density
    equals the fitted cusp model and integrates that patch in closed form,
    puncture included, so the full-surface value can approach the
    Gauss-Bonnet value.
    """
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != surface.shape:
            raise DomainError("region mask shape does not match the grid")
        return float(np.sum(surface.area_weights[region]))
    if surface.kind == "punctured_torus":
        # Split with the same smooth window the patch integral uses: a sharp
        # cut would leave a first-order jagged-boundary error in the grid sum.
        r_patch = surface.truncation["r_in"]
        chi = grids.smoothstep(surface.extra["dist"], lo=0.5 * r_patch, hi=r_patch)
        keep = chi < 1.0
        smooth = float(np.sum(surface.area_weights[keep] * (1.0 - chi[keep])))
        patch = cusp_patch_area(
            surface.extra["gamma0"], surface.extra["gamma2"], r_patch
        )
        return smooth + patch
    weights = surface.area_weights
    if not surface.v_periodic:
        trap = np.ones(surface.v.size)
        trap[0] = trap[-1] = 0.5
        weights = weights * trap
    return float(np.sum(weights))


def numeric_curvature(surface):
    """Gauss curvature of ``(lam |dz|)^2`` and the mask where it is clean.

    Differentiates the sampled density directly; the solved torus density
    splits into the stored closed-form cusp-reference jet plus grid
    derivatives of the smooth correction.  Bounded charts lose the four
    rows per edge that the two stencil passes touch.
    """
    if surface.kind == "punctured_torus":
        u_corr = np.real(surface.extra["liouville_u"])
        lap = np.real(surface.dzb(surface.dz(u_corr))) + np.real(
            surface.extra["ref_zzb"]
        )
        curv = -4.0 / surface.lam**2 * lap
        mask = surface.extra["dist"] >= 1.1 * surface.truncation["r_out"]
        return curv, mask
    log_lam = np.log(surface.lam)
    curv = -4.0 / surface.lam**2 * np.real(surface.dzb(surface.dz(log_lam)))
    return curv, surface.erode_valid(surface.norm_mask)


def trace_to_length(tr):
    """Geodesic length of the hyperbolic element with Fuchsian trace ``tr``.

    Raises :class:`DomainError` for |tr| < 2: elliptic elements have no
    closed geodesic.
    """
    tr = float(tr)
    if abs(tr) < 2.0:
        raise DomainError(
            f"trace {tr} corresponds to an elliptic element, no geodesic length"
        )
    return float(2.0 * np.arccosh(abs(tr) / 2.0))


# ---------------------------------------------------------------------------
# discrete curve shortening

SHORTEN_TOL = 1e-6
SHORTEN_MAX = 2000
_GRAD_STEP = 1e-5


class _CurveMetric:
    """Segment lengths of chart polygons against the surface metric.

    Radial charts carry ``ds^2 = lam(v)^2 du^2 + dv^2`` (the transverse
    coordinate is hyperbolic arc length); torus charts carry
    ``ds^2 = lam^2 |du + tau dv|^2`` with the density interpolated off the
    grid.
    """

    def __init__(self, surface):
        self.surface = surface
        self.u_period = surface.u_period
        self.v_periodic = surface.v_periodic
        self.v_lo = float(surface.v.min())
        self.v_hi = float(surface.v.max())
        kind = surface.kind
        if kind == "collar":
            c = surface.params["core_length"] / (2.0 * np.pi)
            self._profile = lambda v: c * np.cosh(v)
        elif kind == "disk":
            self._profile = np.sinh
        elif kind == "punctured_disk":
            self._profile = lambda v: np.exp(-v)
        else:
            self._profile = None
            self._tau = surface.extra["tau"]

    def _wrap(self, delta, axis):
        if axis == 0:
            period = self.u_period
        elif self.v_periodic:
            period = 1.0
        else:
            return delta
        return (delta + 0.5 * period) % period - 0.5 * period

    def segment_lengths(self, start, end):
        du = self._wrap(end[:, 0] - start[:, 0], 0)
        dv = self._wrap(end[:, 1] - start[:, 1], 1)
        mid_u = start[:, 0] + 0.5 * du
        mid_v = start[:, 1] + 0.5 * dv
        if self._profile is not None:
            lam = self._profile(np.clip(mid_v, self.v_lo, self.v_hi))
            return np.sqrt((lam * du) ** 2 + dv**2)
        lam = self.surface.density(mid_u + self._tau * mid_v)
        return lam * np.abs(du + self._tau * dv)

    def clamp_v(self, v):
        if self.v_periodic:
            return v % 1.0
        return np.clip(v, self.v_lo, self.v_hi)

    def total(self, u, v):
        curve = np.stack([u, v], axis=1)
        return float(np.sum(self.segment_lengths(curve, np.roll(curve, -1, axis=0))))

    def transverse_weight(self, u, v):
        """Metric coefficient of a pure transverse move, for preconditioning."""
        if self._profile is not None:
            return np.ones_like(v)
        lam = self.surface.density(u + self._tau * v)
        return lam**2 * np.abs(self._tau) ** 2

    def axial_density(self, u, v):
        """Length density of a purely angular move at ``(u, v)``."""
        if self._profile is not None:
            return self._profile(np.clip(v, self.v_lo, self.v_hi))
        return self.surface.density(u + self._tau * v)


def _transverse_gradient(metric, u, v):
    """Central-difference gradient of total length in the transverse profile."""
    curve = np.stack([u, v], axis=1)
    nxt = np.roll(curve, -1, axis=0)
    bump = np.array([[0.0, _GRAD_STEP]])
    as_start = metric.segment_lengths(curve + bump, nxt) - metric.segment_lengths(
        curve - bump, nxt
    )
    as_end = metric.segment_lengths(curve, nxt + bump) - metric.segment_lengths(
        curve, nxt - bump
    )
    return (as_start + np.roll(as_end, 1)) / (2.0 * _GRAD_STEP)


def _shortening_preconditioner(metric, u, v):
    """Periodic tridiagonal model of the length Hessian in the profile.

    The chord terms act as springs of stiffness (transverse metric
    coefficient)/(segment length); the angular density contributes a
    diagonal sag term.  Descent along the solve of this model removes the
    grid-scale stiffness that limits plain gradient steps on the parabolic
    shortening flow.
    """
    m = u.size
    curve = np.stack([u, v], axis=1)
    nxt = np.roll(curve, -1, axis=0)
    seg = metric.segment_lengths(curve, nxt)
    du = nxt[:, 0] - curve[:, 0]
    du = np.abs((du + 0.5 * metric.u_period) % metric.u_period - 0.5 * metric.u_period)
    mid_u = curve[:, 0] + 0.5 * du
    mid_v = 0.5 * (curve[:, 1] + nxt[:, 1])
    spring = metric.transverse_weight(mid_u, mid_v) / np.maximum(seg, 1e-12)
    delta = 1e-4
    sag = (
        metric.axial_density(u, v + delta)
        - 2.0 * metric.axial_density(u, v)
        + metric.axial_density(u, v - delta)
    ) / delta**2
    node_du = 0.5 * (du + np.roll(du, 1))
    diag = spring + np.roll(spring, 1) + np.maximum(sag, 0.0) * node_du
    diag = diag + 1e-8 * diag.max()
    mat = sparse.diags(
        [diag, -spring[: m - 1], -spring[: m - 1]], [0, 1, -1], format="lil"
    )
    mat[0, m - 1] = -spring[m - 1]
    mat[m - 1, 0] = -spring[m - 1]
    return splu(mat.tocsc())


def geodesic_length_numeric(
    surface, seed_curve, tolerance=SHORTEN_TOL, max_iterations=SHORTEN_MAX
):
    """Length of the closed geodesic homotopic to a polygonal seed curve.

    The seed nodes ``(u, v)`` define a closed polygon winding once around
    the angular axis (the closing edge wraps last to first).  The nodes
    keep their angular positions and slide transversally under gradient
    descent with backtracking on the discrete length; pinning the angular
    positions removes the reparameterization modes along which a free
    polygon can bunch its nodes and degenerate.  The length sequence is
    non-increasing; iteration stops when the relative decrease per accepted
    step drops below ``tolerance``.  The result is deterministic in the
    seed curve.

    Raises :class:`ConvergenceError` carrying the last length when the
    iteration budget runs out.
    """
    curve = np.array(seed_curve, dtype=float)
    if curve.ndim != 2 or curve.shape[1] != 2 or curve.shape[0] < 3:
        raise DomainError("seed curve must be an (m, 2) array with m >= 3")
    metric = _CurveMetric(surface)
    order = np.argsort(curve[:, 0] % metric.u_period, kind="stable")
    u = curve[order, 0] % metric.u_period
    v = metric.clamp_v(curve[order, 1])
    length = metric.total(u, v)
    # Transverse moves stay below a quarter period on periodic axes so the
    # nearest-representative wrap of a segment never flips mid-step.
    cap_v = 0.2 if metric.v_periodic else np.inf
    step = 0.5
    for _ in range(max_iterations):
        grad = _transverse_gradient(metric, u, v)
        direction = _shortening_preconditioner(metric, u, v).solve(grad)
        slope = float(np.sum(grad * direction))
        if slope < 1e-24:
            return length
        step = min(step * 2.0, 1.0, cap_v / (np.abs(direction).max() + 1e-30))
        improved = False
        for _ in range(40):
            trial = metric.clamp_v(v - step * direction)
            trial_len = metric.total(u, trial)
            if trial_len <= length - 1e-4 * step * slope:
                improved = True
                break
            step *= 0.5
        if not improved:
            return length
        decrease = length - trial_len
        v, length = trial, trial_len
        if decrease <= tolerance * length:
            return length
    raise ConvergenceError(
        f"curve shortening used its iteration budget; last length {length:.8f}",
        report={"last_length": length},
    )


def surface_to_config(surface):
    """Serializable description of a surface: kind, params, resolution, truncation."""
    params = {}
    for name, value in surface.params.items():
        if isinstance(value, complex):
            params[name] = [value.real, value.imag]
        else:
            params[name] = value
    return {
        "kind": surface.kind,
        "params": params,
        "resolution": list(surface.shape),
        "truncation": dict(surface.truncation),
    }
