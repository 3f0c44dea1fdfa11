"""Structured solvers for the second-order section operators.

Two backends cover the model charts:

* radial charts (collar, disk, punctured disk) have coefficients depending
  only on the transverse coordinate, so the angular Fourier modes decouple
  and each mode is a small banded system solved directly;
* torus charts differentiate with periodic local stencils in both axes, so
  every operator in the section calculus is itself a sparse matrix; solves
  assemble that exact matrix and factorize it once per (surface, operator),
  with the factorization reused across repeated solves.

Both backends invert the same discrete compositions that the section
calculus applies, so reported residuals are true residuals of the returned
fields, not internal solver estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import gmres, splu

from . import grids, sections
from .errors import DomainError, PreconditionError, SolverError

__all__ = [
    "SolveReport",
    "DeformedOperators",
    "greens_apply",
    "k2_potential_solve",
    "assemble_deformed_operators",
    "solve_prescribed_curvature",
    "pullback_curvature",
    "base_metric_solve",
]

GREENS_WEIGHTS = (-1, 0, 1)
LINEAR_TOL = 1e-10


@dataclass(frozen=True)
class SolveReport:
    """Re-evaluated residuals and iteration metadata for an elliptic solve."""

    residual_sup: float
    residual_l2: float
    iterations: int
    converged: bool
    method: str
    resolution: tuple
    truncation: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "residual_sup": float(self.residual_sup),
            "residual_l2": float(self.residual_l2),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "method": self.method,
            "resolution": list(self.resolution),
            "truncation": dict(self.truncation),
            "notes": {k: _json_value(v) for k, v in self.notes.items()},
        }


def _json_value(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    if isinstance(v, complex):
        return [v.real, v.imag]
    return v


# ---------------------------------------------------------------------------
# shared helpers


def _wsum(surface, a, b):
    """Weighted pairing over all nodes; the form in which adjointness is exact."""
    return np.sum(a * np.conj(b) * surface.area_weights)


def _l2(surface, a):
    return float(np.sqrt(np.abs(_wsum(surface, a, a))))


def _apply_dr(surface, r, values, shift=0.0):
    """(D_r + shift) through the canonical composition 4 L_{r+1} K_r + r(r+1)."""
    lam = surface.lam
    k = lam ** (r - 1.0) * surface.dz(lam ** (-r + 0.0) * values)
    l = lam ** (-r - 2.0) * surface.dzb(lam ** (r + 1.0) * k)
    return 4.0 * l + (r * (r + 1.0) + shift) * values


def _apply_k2l1(surface, values):
    """4 K_-2 L_-1, the alternate exact factorization of (D_-1 - 2)."""
    lam = surface.lam
    l = surface.dzb(lam ** (-1.0) * values)
    k = lam ** (-3.0) * surface.dz(lam ** 2.0 * l)
    return 4.0 * k


def _is_radial(surface):
    return not surface.v_periodic


def _mode_rates(surface):
    """Angular derivative multipliers i*m_tilde per Fourier row."""
    modes = grids.spectral_mode_numbers(surface.u.size)
    return 1j * (2.0 * np.pi / surface.u_period) * modes


# ---------------------------------------------------------------------------
# radial mode-banded backend

_FACTOR_CACHE = {}


def _dv_matrix(surface):
    return grids.fd4_matrix(surface.v.size, surface.v_spacing)


def _mode_dz(surface, rate, conjugate=False):
    nv = surface.v.size
    cu = np.conj(surface.cu) if conjugate else surface.cu
    cv = surface.cv[0] if np.ndim(surface.cv) == 2 else surface.cv
    cv = np.conj(cv) if conjugate else cv
    diag = sparse.identity(nv, format="csr", dtype=complex) * (rate * complex(cu))
    return diag + sparse.diags(np.asarray(cv, dtype=complex)) @ _dv_matrix(surface)


def _lam_profile(surface):
    return surface.lam[0]


def _mode_kr(surface, r, rate):
    lam = _lam_profile(surface)
    return (
        sparse.diags(lam ** (r - 1.0))
        @ _mode_dz(surface, rate)
        @ sparse.diags(lam ** (-r + 0.0))
    )


def _mode_lr(surface, r, rate):
    lam = _lam_profile(surface)
    return (
        sparse.diags(lam ** (-r - 1.0))
        @ _mode_dz(surface, rate, conjugate=True)
        @ sparse.diags(lam ** (r + 0.0))
    )


def _mode_greens_matrix(surface, r, rate):
    nv = surface.v.size
    op = 4.0 * (_mode_lr(surface, r + 1, rate) @ _mode_kr(surface, r, rate))
    return (op + (r * (r + 1.0) - 2.0) * sparse.identity(nv, dtype=complex)).tocsc()


def _mode_k2_matrix(surface, rate):
    return (4.0 * (_mode_kr(surface, -2, rate) @ _mode_lr(surface, -1, rate))).tocsc()


def _radial_factors(surface, tag, builder):
    key = (id(surface), tag)
    hit = _FACTOR_CACHE.get(key)
    if hit is not None and hit[0] is surface:
        return hit[1]
    rates = _mode_rates(surface)
    factors = [splu(builder(rate)) for rate in rates]
    _FACTOR_CACHE[key] = (surface, factors)
    while len(_FACTOR_CACHE) > 12:
        _FACTOR_CACHE.pop(next(iter(_FACTOR_CACHE)))
    return factors


def _radial_solve(surface, tag, builder, rhs):
    factors = _radial_factors(surface, tag, builder)
    rhs_hat = np.fft.fft(rhs, axis=0)
    out = np.empty_like(rhs_hat)
    for i, lu in enumerate(factors):
        out[i] = lu.solve(rhs_hat[i])
    return np.fft.ifft(out, axis=0)


# ---------------------------------------------------------------------------
# torus spectral + FD2 backend


def _fd2_first(n, spacing, periodic):
    e = np.ones(n)
    m = sparse.diags([-e, e], [-1, 1], shape=(n, n), format="lil")
    if periodic:
        m[0, n - 1] = -1.0
        m[n - 1, 0] = 1.0
    return (m / (2.0 * spacing)).tocsr()


def _torus_dz_matrix(surface, conjugate=False):
    """Sparse matrix of ``surface.dz`` (or ``dzb``) on a torus chart."""
    nu, nv = surface.shape
    du = grids.periodic_fd6_matrix(nu, surface.u_period / nu)
    dv = grids.periodic_fd6_matrix(nv, surface.v_spacing)
    cu = np.conj(surface.cu) if conjugate else surface.cu
    cv = np.conj(surface.cv) if conjugate else surface.cv
    dx = sparse.kron(du, sparse.identity(nv), format="csr")
    dy = sparse.kron(sparse.identity(nu), dv, format="csr")
    return complex(cu) * dx + complex(cv) * dy


def _torus_greens_matrix(surface, r):
    lam = surface.lam.ravel()
    kr = (
        sparse.diags(lam ** (r - 1.0))
        @ _torus_dz_matrix(surface)
        @ sparse.diags(lam ** (-r + 0.0))
    )
    lr = (
        sparse.diags(lam ** (-r - 2.0))
        @ _torus_dz_matrix(surface, conjugate=True)
        @ sparse.diags(lam ** (r + 1.0))
    )
    n = lam.size
    mat = 4.0 * (lr @ kr) + (r * (r + 1.0) - 2.0) * sparse.identity(n)
    if r == 1:
        mat = _pin_rows(mat, _pin_block(surface))
    return mat.tocsc()


def _torus_k2_matrix(surface):
    lam = surface.lam.ravel()
    lr = (
        _torus_dz_matrix(surface, conjugate=True)
        @ sparse.diags(lam ** (-1.0))
    )
    kr = (
        sparse.diags(lam ** (-3.0))
        @ _torus_dz_matrix(surface)
        @ sparse.diags(lam ** (2.0))
    )
    return _pin_rows(4.0 * (kr @ lr), _pin_block(surface)).tocsc()


def _pin_block(surface):
    """Four flattened indices forming a 2x2 node block next to the puncture.

    The degenerate directions of the unshifted operators are the density
    times the four grid-parity patterns; their values on a 2x2 block form a
    scaled sign matrix of full rank, so pinning these rows removes the
    kernel without touching any other equation.
    """
    nu, nv = surface.shape
    if "dist" in surface.extra:
        flat = int(np.argmin(surface.extra["dist"]))
        i, j = divmod(flat, nv)
    else:
        i, j = 0, 0
    i = min(i, nu - 2)
    j = min(j, nv - 2)
    return [i * nv + j, i * nv + j + 1, (i + 1) * nv + j, (i + 1) * nv + j + 1]


def _pin_rows(mat, nodes):
    m = mat.tolil()
    for p in nodes:
        m.rows[p] = [p]
        m.data[p] = [1.0 + 0.0j]
    return m


def _torus_kernel_basis(surface):
    """Orthonormal basis of the exact discrete kernel of K_1 (and of L_-1).

    Periodic centered stencils annihilate the two grid-parity patterns per
    axis, so beyond the density itself the kernel contains the density times
    each parity pattern.  Data produced by the smooth section calculus has
    parity content at truncation level only.
    """
    nu, nv = surface.shape
    su = np.where(np.arange(nu) % 2 == 0, 1.0, -1.0)
    sv = np.where(np.arange(nv) % 2 == 0, 1.0, -1.0)
    patterns = (
        np.ones((nu, nv)),
        np.outer(su, np.ones(nv)),
        np.outer(np.ones(nu), sv),
        np.outer(su, sv),
    )
    basis = []
    for pat in patterns:
        vec = (surface.lam * pat).astype(complex)
        for e in basis:
            vec = vec - _wsum(surface, vec, e) * e
        basis.append(vec / _l2(surface, vec))
    return basis


def _project_off(surface, values, basis):
    out = values
    for e in basis:
        out = out - _wsum(surface, out, e) * e
    return out


def _torus_factor(surface, tag, builder):
    key = (id(surface), tag)
    hit = _FACTOR_CACHE.get(key)
    if hit is not None and hit[0] is surface:
        return hit[1]
    lu = splu(builder())
    _FACTOR_CACHE[key] = (surface, lu)
    while len(_FACTOR_CACHE) > 12:
        _FACTOR_CACHE.pop(next(iter(_FACTOR_CACHE)))
    return lu


def _gmres(apply_fn, precond_lu, rhs, tol, shape, label):
    n = rhs.size
    op = sparse.linalg.LinearOperator(
        (n, n), matvec=lambda x: apply_fn(x.reshape(shape)).ravel(), dtype=complex
    )
    mop = sparse.linalg.LinearOperator(
        (n, n), matvec=precond_lu.solve, dtype=complex
    )
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        return np.zeros_like(rhs), 0
    counter = {"n": 0}

    def cb(_):
        counter["n"] += 1

    x = None
    for rtol in (tol, tol * 1e-2):
        x, info = gmres(
            op,
            rhs,
            x0=x,
            M=mop,
            rtol=rtol,
            atol=0.0,
            restart=80,
            maxiter=40,
            callback=cb,
            callback_type="pr_norm",
        )
        true_resid = np.linalg.norm(apply_fn(x.reshape(shape)).ravel() - rhs)
        if true_resid <= tol * rhs_norm:
            return x, counter["n"]
    raise SolverError(
        f"{label}: linear solve stalled at relative residual "
        f"{true_resid / rhs_norm:.3e}",
        stage=label,
    )


# ---------------------------------------------------------------------------
# Green's operator


def greens_apply(r, g, tolerance=LINEAR_TOL, return_report=False):
    """Invert (D_r - 2) on the grid of ``g``.

    Supported weights are r in {-1, 0, 1}.  At r = +1 the zeroth-order term
    vanishes and the discrete composition annihilates the density times the
    four grid-parity patterns, so those directions are deflated from the
    solve and the right-hand side; callers probing residuals there should
    supply data orthogonal to that kernel (smooth data is, up to truncation).
    """
    if r not in GREENS_WEIGHTS:
        raise DomainError(f"greens_apply supports weights {GREENS_WEIGHTS}, got {r}")
    if g.weight != r:
        raise TypeError(f"section has weight {g.weight}, expected {r}")
    surface = g.surface
    deflated = None
    if _is_radial(surface):
        out = _radial_solve(
            surface,
            ("greens", r),
            lambda rate: _mode_greens_matrix(surface, r, rate),
            g.values,
        )
        method = "mode-banded direct"
    else:
        rhs = g.values.astype(complex)
        if r == 1:
            deflated = _torus_kernel_basis(surface)
            rhs = _project_off(surface, rhs, deflated)
        lu = _torus_factor(
            surface,
            ("greens", r),
            lambda: _torus_greens_matrix(surface, r),
        )
        out = lu.solve(rhs.ravel()).reshape(surface.shape)
        if deflated is not None:
            out = _project_off(surface, out, deflated)
        method = "sparse direct"
    iterations = 1
    result = sections.section(surface, r, out)
    if not return_report:
        return result
    resid = _apply_dr(surface, r, out, shift=-2.0) - g.values
    if deflated is not None:
        resid = resid + (g.values - _project_off(surface, g.values, deflated))
    rhs_l2 = _l2(surface, g.values)
    h2 = sections.norms(result, holder_orders=()).sobolev[2]
    report = SolveReport(
        residual_sup=float(np.max(np.abs(resid))),
        residual_l2=_l2(surface, resid),
        iterations=iterations,
        converged=True,
        method=method,
        resolution=surface.shape,
        truncation=dict(surface.truncation),
        notes={
            "rhs_l2": rhs_l2,
            "h2_norm": h2,
            "h2_over_l2": h2 / rhs_l2 if rhs_l2 > 0.0 else 0.0,
        },
    )
    return result, report


def k2_potential_solve(
    g, harmonic_basis=None, tolerance=LINEAR_TOL, return_report=False
):
    """Solve K_-2 f = g with f in the image of L_-1 (perpendicular potential).

    Solves (D_-1 - 2) F = g through its alternate exact factorization
    4 K_-2 L_-1 and returns f = 4 L_-1 F, so the equation K_-2 f = g holds to
    linear-solver tolerance rather than to discretization tolerance.  If
    ``harmonic_basis`` (an iterable of weight -2 sections) is supplied the
    result is orthogonalized against it.

    On the torus the factorized operator annihilates the density times the
    four grid-parity patterns; data in the image of K_-2 is orthogonal to
    that kernel exactly, by discrete adjointness.
    """
    if g.weight != -1:
        raise TypeError(f"potential data must have weight -1, got {g.weight}")
    surface = g.surface
    if _is_radial(surface):
        big = _radial_solve(
            surface,
            ("k2",),
            lambda rate: _mode_k2_matrix(surface, rate),
            g.values,
        )
        method = "mode-banded direct"
    else:
        basis = _torus_kernel_basis(surface)
        rhs = _project_off(surface, g.values.astype(complex), basis)
        lu = _torus_factor(surface, ("k2",), lambda: _torus_k2_matrix(surface))
        big = lu.solve(rhs.ravel()).reshape(surface.shape)
        big = _project_off(surface, big, basis)
        method = "sparse direct"
    iterations = 1
    lam = surface.lam
    f_vals = 4.0 * surface.dzb(lam ** (-1.0) * big)
    if harmonic_basis is not None:
        for mu in harmonic_basis:
            f_vals = f_vals - _wsum(surface, f_vals, mu.values) * mu.values / _wsum(
                surface, mu.values, mu.values
            )
    result = sections.section(surface, -2, f_vals)
    if not return_report:
        return result
    lam_r = lam ** (-3.0)
    resid = lam_r * surface.dz(lam ** 2.0 * f_vals) - g.values
    report = SolveReport(
        residual_sup=float(np.max(np.abs(resid))),
        residual_l2=_l2(surface, resid),
        iterations=iterations,
        converged=True,
        method=method,
        resolution=surface.shape,
        truncation=dict(surface.truncation),
        notes={"rhs_l2": _l2(surface, g.values)},
    )
    return result, report


# ---------------------------------------------------------------------------
# deformed operators


@dataclass(frozen=True)
class DeformedOperators:
    """Coefficient fields of the pulled-back Laplacian and curvature term.

    ``apply`` evaluates the second-order operator on a real field through
    the exact chart derivatives; ``fd2_coefficients`` exposes the real
    coefficient decomposition used to assemble sparse preconditioners.
    """

    mu: object
    amplification: np.ndarray
    c_star: np.ndarray
    is_zero: bool
    _first_order: np.ndarray = field(repr=False, default=None)
    _mu_vals: np.ndarray = field(repr=False, default=None)
    _mu_z: np.ndarray = field(repr=False, default=None)

    @property
    def surface(self):
        return self.mu.surface

    def apply(self, h):
        """D_* h for real h, through the spectral/FD4 chart derivatives."""
        srf = self.surface
        lam2 = srf.lam**2.0
        hz = srf.dz(h)
        if self.is_zero:
            return 4.0 / lam2 * np.real(srf.dzb(hz))
        a = self.amplification
        mu = self._mu_vals
        hzz = srf.dz(hz)
        hzzb = srf.dzb(hz)
        out = (1.0 + np.abs(mu) ** 2) * a * np.real(hzzb)
        out += 2.0 * np.real(
            self._first_order * hz - a * (mu * hzz + self._mu_z * hz)
        )
        return 4.0 / lam2 * out

    def fd2_coefficients(self):
        """Real coefficients (huu, huv, hvv, hu, hv) of D_* acting on real h."""
        srf = self.surface
        lam2 = srf.lam**2.0
        cu = srf.cu + np.zeros_like(srf.lam, dtype=complex)
        cv = srf.cv + np.zeros_like(srf.lam, dtype=complex)
        if np.ndim(srf.cv) < 2 and not srf.v_periodic:
            cvp = np.broadcast_to(
                grids.fd4_derivative(
                    np.asarray(srf.cv, dtype=complex), srf.v_spacing, axis=0
                ),
                srf.lam.shape,
            )
        elif srf.v_periodic:
            cvp = np.zeros_like(cv)
        else:
            cvp = srf.d_v(cv)
        if self.is_zero:
            p = np.ones_like(srf.lam)
            w = np.zeros_like(cv)
            q = np.zeros_like(cv)
        else:
            mu = self._mu_vals
            p = (1.0 + np.abs(mu) ** 2) * self.amplification
            w = self._first_order - self.amplification * self._mu_z
            q = self.amplification * mu
        scale = 4.0 / lam2
        huu = scale * (p * np.abs(cu) ** 2 - 2.0 * np.real(q * cu**2))
        huv = scale * (
            2.0 * p * np.real(cu * np.conj(cv)) - 4.0 * np.real(q * cu * cv)
        )
        hvv = scale * (p * np.abs(cv) ** 2 - 2.0 * np.real(q * cv**2))
        hu = scale * 2.0 * np.real(w * cu)
        hv = scale * (
            2.0 * np.real(w * cv)
            + p * np.real(cv * np.conj(cvp))
            - 2.0 * np.real(q * cv * cvp)
        )
        return huu, huv, hvv, hu, hv


def assemble_deformed_operators(mu):
    """Coefficient fields of D_* and the deformed curvature C_* for ``mu``."""
    if mu.weight != -2:
        raise TypeError(f"deformation data must have weight -2, got {mu.weight}")
    srf = mu.surface
    vals = mu.values
    sup = float(np.max(np.abs(vals)))
    if sup >= 1.0:
        raise DomainError(f"deformation has sup modulus {sup:.3f} >= 1")
    if sup == 0.0:
        return DeformedOperators(
            mu=mu,
            amplification=np.ones_like(srf.lam),
            c_star=-np.ones_like(srf.lam),
            is_zero=True,
        )
    a = 1.0 / (1.0 - np.abs(vals) ** 2)
    mu_z = srf.dz(vals)
    mu_zz = srf.dz(mu_z)
    mu_zb = srf.dzb(vals)
    a_z = srf.dz(a)
    a_zb = srf.dzb(a)
    e = a_zb - vals * a_z
    ops = DeformedOperators(
        mu=mu,
        amplification=a,
        c_star=np.zeros_like(srf.lam),
        is_zero=False,
        _first_order=e,
        _mu_vals=vals,
        _mu_z=mu_z,
    )
    lam2 = srf.lam**2.0
    w = np.conj(vals) * mu_z * a
    div = srf.dzb(w) - vals * srf.dz(w)
    extra = 4.0 / lam2 * np.real(-div + np.conj(vals) * mu_z**2 * a + mu_zz)
    if "ref_z" in srf.extra:
        # The base curvature is -1 by construction, so only the difference
        # of the deformed and undeformed operators acts on log(lam^2).  The
        # difference coefficients vanish with mu, which suppresses the grid
        # noise that direct differentiation of the cusp density produces.
        # Chart derivatives of log(lam^2) = 2 log(sigma_ref) + 2u take the
        # stored closed-form jet for the steep reference factor and grid
        # stencils for the smooth correction u.
        u = np.real(srf.extra["liouville_u"])
        u_z = srf.dz(u)
        f_z = 2.0 * (u_z + srf.extra["ref_z"])
        f_zz = 2.0 * (srf.dz(u_z) + srf.extra["ref_zz"])
        f_zzb = 2.0 * (np.real(srf.dzb(u_z)) + srf.extra["ref_zzb"])
        delta_p = 2.0 * np.abs(vals) ** 2 * a
        w_coef = e - a * mu_z
        q_coef = a * vals
        d_diff = (
            4.0
            / lam2
            * (
                delta_p * np.real(f_zzb)
                + 2.0 * np.real(w_coef * f_z - q_coef * f_zz)
            )
        )
        log_a = np.log(np.real(a))
        c_star = -1.0 - 0.5 * (d_diff + ops.apply(log_a)) + extra
    else:
        log_field = np.log(srf.lam**2.0 * a)
        c_star = -0.5 * ops.apply(np.real(log_field)) + extra
    object.__setattr__(ops, "c_star", c_star)
    return ops


# ---------------------------------------------------------------------------
# prescribed-curvature Newton solver

CURVATURE_TOL = 1e-9
NEWTON_MAX = 50


def _theta_independent(values):
    return float(np.max(np.abs(values - values[:1]))) < 1e-12


def _mode0_real_matrix(ops):
    """Real banded matrix reproducing D_* on angle-independent real fields."""
    srf = ops.surface
    nv = srf.v.size
    dv = _dv_matrix(srf)
    cv = srf.cv[0] if np.ndim(srf.cv) == 2 else np.asarray(srf.cv)
    mz = sparse.diags(cv.astype(complex)) @ dv
    mzb = sparse.diags(np.conj(cv).astype(complex)) @ dv
    lam2 = _lam_profile(srf) ** 2.0
    if ops.is_zero:
        p = np.ones(nv)
        w = np.zeros(nv, dtype=complex)
        q = np.zeros(nv, dtype=complex)
    else:
        p = ((1.0 + np.abs(ops._mu_vals) ** 2) * ops.amplification)[0]
        w = (ops._first_order - ops.amplification * ops._mu_z)[0]
        q = (ops.amplification * ops._mu_vals)[0]
    core = sparse.diags(p) @ (mzb @ mz).real
    first = 2.0 * (sparse.diags(w) @ mz).real
    second = -2.0 * (sparse.diags(q) @ (mz @ mz)).real
    return sparse.diags(4.0 / lam2) @ (core + first + second)


def _dirichlet_rows(matrix, rows):
    m = matrix.tolil()
    for i in rows:
        m.rows[i] = [i]
        m.data[i] = [1.0]
    return m.tocsc()


def _torus_deformed_matrix(surface, ops, shift_field):
    """Exact sparse matrix of D_* + diag(shift) on real torus fields.

    Mirrors :meth:`DeformedOperators.apply` term by term through the same
    periodic stencil matrices, so Newton steps solve the true linearization.
    """
    mz = _torus_dz_matrix(surface)
    core = (_torus_dz_matrix(surface, conjugate=True) @ mz).real
    lam2 = (surface.lam**2.0).ravel()
    if ops.is_zero:
        total = core
    else:
        p = ((1.0 + np.abs(ops._mu_vals) ** 2) * ops.amplification).ravel()
        w = (ops._first_order - ops.amplification * ops._mu_z).ravel()
        q = (ops.amplification * ops._mu_vals).ravel()
        total = sparse.diags(p.real) @ core + (
            2.0 * (sparse.diags(w) @ mz - sparse.diags(q) @ (mz @ mz))
        ).real
    return (
        sparse.diags(4.0 / lam2) @ total
        + sparse.diags(np.asarray(shift_field, dtype=float).ravel())
    ).tocsc()


def _real_fd2_matrix(surface, ops, shift_field, dirichlet=False):
    """Sparse FD2 assembly of (D_* + diag(shift_field)) on the full grid."""
    nu, nv = surface.shape
    hu_ = surface.u_period / nu
    du = _fd2_first(nu, hu_, True)
    dv = _fd2_first(nv, surface.v_spacing, surface.v_periodic)
    ix = sparse.identity(nu)
    iv = sparse.identity(nv)
    dx = sparse.kron(du, iv, format="csr")
    dy = sparse.kron(ix, dv, format="csr")
    dxx = sparse.kron((du @ du).tocsr(), iv, format="csr")
    dyy = sparse.kron(ix, (dv @ dv).tocsr(), format="csr")
    dxy = (dx @ dy).tocsr()
    huu, huv, hvv, hu, hv = ops.fd2_coefficients()

    def dg(f):
        return sparse.diags(np.broadcast_to(f, (nu, nv)).ravel())

    mat = (
        dg(huu) @ dxx
        + dg(huv) @ dxy
        + dg(hvv) @ dyy
        + dg(hu) @ dx
        + dg(hv) @ dy
        + dg(shift_field)
    )
    if dirichlet:
        border = []
        for j in (0, 1, 2, 3, nv - 4, nv - 3, nv - 2, nv - 1):
            border.extend(range(j, nu * nv, nv))
        mat = _dirichlet_rows(mat, border)
    return mat.tocsc().astype(complex)


def solve_prescribed_curvature(
    mu,
    boundary_values=None,
    tolerance=CURVATURE_TOL,
    max_iterations=NEWTON_MAX,
):
    """Solve D_* h - C_* = e^{2h} for the conformal factor of the pullback.

    Returns ``(h, report)`` with h a real weight-0 section.  On truncated
    charts the outer two rows of each edge are held at ``boundary_values``
    (default zero); supply the known trace when comparing against a global
    closed form.  Requires C_* < 0 on the valid grid.
    """
    ops = assemble_deformed_operators(mu)
    srf = mu.surface
    nu, nv = srf.shape
    if ops.is_zero:
        h = sections.section(srf, 0, np.zeros((nu, nv)))
        report = SolveReport(
            residual_sup=0.0,
            residual_l2=0.0,
            iterations=1,
            converged=True,
            method="identity deformation",
            resolution=srf.shape,
            truncation=dict(srf.truncation),
        )
        return h, report
    interior = srf.erode_valid(srf.norm_mask) & np.isfinite(ops.c_star)
    if np.max(ops.c_star[interior]) >= 0.0:
        raise PreconditionError(
            "deformed curvature is not strictly negative; deformation too large"
        )
    h = np.zeros((nu, nv))
    radial = _is_radial(srf)
    if radial:
        # Two stencil passes each reach two rows past their input, so the
        # assembled C_* and D_* are clean only four rows in from a bounded
        # edge.  Hold that whole band at the supplied trace.
        if boundary_values is not None:
            h[:, :4] = boundary_values[:, :4]
            h[:, -4:] = boundary_values[:, -4:]
        band = np.zeros((nu, nv), dtype=bool)
        band[:, :4] = True
        band[:, -4:] = True
    else:
        band = np.zeros((nu, nv), dtype=bool)
    resid_mask = ~band

    def residual(hh):
        return ops.apply(hh) - ops.c_star - np.exp(2.0 * hh)

    mode0 = radial and ops._mu_vals is not None and _theta_independent(
        ops._mu_vals
    ) and _theta_independent(h)
    res = residual(h)
    sup = float(np.max(np.abs(res[resid_mask])))
    iterations = 0
    linear_iters = 0
    for iterations in range(1, max_iterations + 1):
        if sup <= tolerance:
            break
        rhs = -res
        rhs[band] = 0.0
        if mode0:
            m0 = _mode0_real_matrix(ops) - sparse.diags(np.exp(2.0 * h[0]) * 2.0)
            m0 = _dirichlet_rows(m0, [0, 1, 2, 3, nv - 4, nv - 3, nv - 2, nv - 1])
            delta_profile = splu(m0).solve(rhs[0])
            delta = np.broadcast_to(delta_profile, (nu, nv)).copy()
        elif not radial:
            mat = _torus_deformed_matrix(srf, ops, -2.0 * np.exp(2.0 * h))
            delta = splu(mat).solve(rhs.ravel()).reshape(nu, nv)
        else:
            shift = -2.0 * np.exp(2.0 * h)
            lu = splu(_real_fd2_matrix(srf, ops, shift, dirichlet=True))

            def apply_fn(x):
                xr = np.real(x)
                out = ops.apply(xr) + shift * xr
                out[band] = xr[band]
                return out.astype(complex)

            flat, its = _gmres(
                apply_fn,
                lu,
                rhs.ravel().astype(complex),
                LINEAR_TOL,
                srf.shape,
                "curvature newton",
            )
            linear_iters += its
            delta = np.real(flat.reshape(nu, nv))
        step = 1.0
        for _ in range(12):
            trial = h + step * delta
            res_t = residual(trial)
            sup_t = float(np.max(np.abs(res_t[resid_mask])))
            if sup_t < sup or sup_t <= tolerance:
                break
            step *= 0.5
        h = h + step * delta
        res = residual(h)
        sup = float(np.max(np.abs(res[resid_mask])))
    converged = sup <= tolerance
    if not converged:
        raise SolverError(
            f"curvature solve stalled at sup residual {sup:.3e}",
            report=None,
            stage="newton",
        )
    l2 = _l2(srf, np.where(resid_mask, res, 0.0))
    report = SolveReport(
        residual_sup=sup,
        residual_l2=l2,
        iterations=iterations,
        converged=True,
        method="mode-banded newton"
        if mode0
        else ("gmres newton" if radial else "sparse-direct newton"),
        resolution=srf.shape,
        truncation=dict(srf.truncation),
        notes={"linear_iterations": linear_iters},
    )
    return sections.section(srf, 0, h), report


def pullback_curvature(ops, h):
    """Gaussian curvature of the solved pullback metric ``e^{2h} lam^2 A |dz + mu dzb|^2``.

    Expands the metric into real components on the chart axes and applies
    the Brioschi determinant formula with the chart stencils.  This shares
    no algebra with the Newton residual (which never forms the metric
    tensor), so it cross-checks the solve.  Returns the curvature field and
    the mask where all stencils are clean: bounded charts lose four rows
    per edge to the two stencil passes, cusp charts keep the region outside
    the density's blend annulus.
    """
    srf = ops.surface
    h_vals = np.real(h.values if hasattr(h, "values") else np.asarray(h))
    if ops._mu_vals is None:
        mu = np.zeros_like(srf.lam, dtype=complex)
    else:
        mu = ops._mu_vals
    conf = np.exp(2.0 * h_vals) * srf.lam**2.0 * np.real(ops.amplification)
    # |dz + mu dzb|^2 as a quadratic form in (dx, dy) with z = x + i y.
    t11 = 1.0 + 2.0 * np.real(mu) + np.abs(mu) ** 2
    t12 = 2.0 * np.imag(mu)
    t22 = 1.0 - 2.0 * np.real(mu) + np.abs(mu) ** 2
    # Chart axes relate to (dx, dy) through du = 2 Re(cu dz), dv = 2 Re(cv dz).
    ones = np.ones_like(srf.lam)
    a11 = 2.0 * np.real(srf.cu) * ones
    a12 = -2.0 * np.imag(srf.cu) * ones
    a21 = 2.0 * np.real(srf.cv) * ones
    a22 = -2.0 * np.imag(srf.cv) * ones
    det_m = a11 * a22 - a12 * a21
    i11, i12 = a22 / det_m, -a12 / det_m
    i21, i22 = -a21 / det_m, a11 / det_m
    ee = conf * (t11 * i11**2 + 2.0 * t12 * i11 * i21 + t22 * i21**2)
    ff = conf * (t11 * i11 * i12 + t12 * (i11 * i22 + i12 * i21) + t22 * i21 * i22)
    gg = conf * (t11 * i12**2 + 2.0 * t12 * i12 * i22 + t22 * i22**2)

    def d_u(f):
        return np.real(srf.d_u(f))

    def d_v(f):
        return np.real(srf.d_v(f))

    e_u, e_v = d_u(ee), d_v(ee)
    g_u, g_v = d_u(gg), d_v(gg)
    f_u, f_v = d_u(ff), d_v(ff)
    e_vv = d_v(e_v)
    g_uu = d_u(g_u)
    f_uv = d_v(f_u)
    top = np.stack(
        [
            np.stack([-0.5 * e_vv + f_uv - 0.5 * g_uu, 0.5 * e_u, f_u - 0.5 * e_v], -1),
            np.stack([f_v - 0.5 * g_u, ee, ff], -1),
            np.stack([0.5 * g_v, ff, gg], -1),
        ],
        -2,
    )
    low = np.stack(
        [
            np.stack([np.zeros_like(ee), 0.5 * e_v, 0.5 * g_u], -1),
            np.stack([0.5 * e_v, ee, ff], -1),
            np.stack([0.5 * g_u, ff, gg], -1),
        ],
        -2,
    )
    denom = (ee * gg - ff**2) ** 2
    curv = (np.linalg.det(top) - np.linalg.det(low)) / denom
    if srf.v_periodic:
        if "dist" in srf.extra and "r_out" in srf.truncation:
            # The density correction carries derivative transients sized by
            # the reference blend annulus; one blend width past its outer
            # edge they have decayed below the stencil noise floor.
            r_in = srf.truncation.get("r_in", 0.0)
            r_out = srf.truncation["r_out"]
            mask = srf.extra["dist"] >= 2.0 * r_out - r_in
        else:
            mask = srf.norm_mask.copy()
    else:
        mask = srf.erode_valid(srf.norm_mask)
    return curv, mask


from .liouville import base_metric_solve  # noqa: E402  (shared solver stack)
