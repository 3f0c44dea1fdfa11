"""Quasiconformal deformation machinery on surface charts.

The pieces assembled here move tensor fields between a base surface and its
deformation by a weight -2 field mu with sup modulus below one:

* an orthonormal family of harmonic weight -2 fields and the orthogonal
  projection onto its span,
* a lattice Fourier-multiplier solver for the periodic Beltrami equation
  ``f_zbar = mu f_z`` on torus charts,
* the transported coordinate field on the deformed chart,
* the deformed raising derivative expressed through base-chart stencils,
* a Newton solve for the dual frame whose transported fields remain
  annihilated by the deformed lowering-adjoint.

Everything downstream of the Beltrami solve works in pullback components on
the base grid; the deformed surface is never re-gridded.  The deformed area
element pulled back is ``e^{2h}`` times the base one, with ``h`` supplied by
the prescribed-curvature solver, so deformed pairings are base quadratures
reweighted by ``e^{2h}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.sparse.linalg import LinearOperator, gmres

from . import sections
from .elliptic import SolveReport, k2_potential_solve, solve_prescribed_curvature
from .errors import (
    ConvergenceError,
    DomainError,
    PreconditionError,
    SolverError,
)

__all__ = [
    "HarmonicBasis",
    "harmonic_basis",
    "project_harmonic",
    "deformed_inner_product",
    "QCMap",
    "solve_beltrami",
    "beltrami_of_map",
    "stretch_map",
    "push_L",
    "pullback_K",
    "OmegaFrame",
    "omega_frame",
]

BELTRAMI_TOL = 1e-10
BELTRAMI_MAX = 400
# Plain fixed-point contraction degrades as the sup modulus approaches one;
# beyond ~0.7 the iteration count and the conditioning of the deformed
# operators both blow up, so larger data is refused outright.
MU_SUP_LIMIT = 0.7
GRAM_TOL = 1e-6
FRAME_TOL = 1e-10
FRAME_MAX = 40
ANDERSON_DEPTH = 5


# ---------------------------------------------------------------------------
# harmonic fields and projection


@dataclass(frozen=True)
class HarmonicBasis:
    """Orthonormal harmonic weight -2 fields with their source differentials.

    ``basis`` holds the normalized fields; ``quadratics`` the plain chart
    components of the holomorphic quadratic differentials they came from.
    """

    basis: tuple
    quadratics: tuple

    def __len__(self):
        return len(self.basis)

    def __iter__(self):
        return iter(self.basis)

    def __getitem__(self, j):
        return self.basis[j]


def harmonic_basis(surface):
    """Orthonormal family of harmonic weight -2 fields on a model chart.

    Each model chart carries one reference holomorphic quadratic
    differential; conjugating it and dividing by the squared density gives a
    field annihilated by the raising derivative.  Normalization uses the
    all-node Hermitian pairing, the one in which the discrete raising and
    lowering derivatives are exact negative adjoints.
    """
    q = sections.flat_quadratic_data(surface)
    quadratics = (q,)
    raw = [sections.section(surface, -2, np.conj(q) * surface.lam**-2.0)]
    basis = []
    for candidate in raw:
        vals = candidate.values.copy()
        for prev in basis:
            overlap = sections.inner_product(candidate, prev)
            vals = vals - overlap * prev.values
        norm = np.sqrt(
            np.real(
                np.sum(vals * np.conj(vals) * surface.area_weights)
            )
        )
        if norm <= 0.0:
            raise DomainError("degenerate harmonic candidate: zero norm")
        basis.append(sections.section(surface, -2, vals / norm))
    return HarmonicBasis(tuple(basis), quadratics)


def _pairing_weights(surface, h):
    w = surface.area_weights
    if h is None:
        return w
    h_vals = np.real(h.values if hasattr(h, "values") else np.asarray(h))
    return w * np.exp(2.0 * h_vals)


def deformed_inner_product(a, b, h=None):
    """Hermitian pairing against the deformed area element.

    Both arguments hold base-chart pullback components of deformed-surface
    fields; the pairing is the base quadrature reweighted by ``e^{2h}``.
    ``h = None`` gives the plain base pairing.
    """
    if a.surface is not b.surface:
        raise DomainError("sections live on different surfaces")
    if a.weight != b.weight:
        raise TypeError(f"weight mismatch: {a.weight} vs {b.weight}")
    w = _pairing_weights(a.surface, h)
    return complex(np.sum(a.values * np.conj(b.values) * w))


def _gram_matrix(items, h=None):
    n = len(items)
    gram = np.empty((n, n), dtype=complex)
    for i in range(n):
        for j in range(n):
            gram[i, j] = deformed_inner_product(items[i], items[j], h)
    return gram


def project_harmonic(nu, basis, h=None):
    """Orthogonal projection of a weight -2 field onto the basis span.

    ``basis`` is any iterable of weight -2 sections orthonormal in the
    pairing selected by ``h``; deviation of their Gram matrix from the
    identity beyond 1e-6 is refused.
    """
    items = list(basis)
    if nu.weight != -2:
        raise TypeError(f"projection acts on weight -2 fields, got {nu.weight}")
    gram = _gram_matrix(items, h)
    defect = float(np.max(np.abs(gram - np.eye(len(items)))))
    if defect > GRAM_TOL:
        raise PreconditionError(
            f"basis is not orthonormal: Gram defect {defect:.3e}"
        )
    out = np.zeros_like(nu.values)
    for item in items:
        out = out + deformed_inner_product(nu, item, h) * item.values
    return sections.section(nu.surface, -2, out)


# ---------------------------------------------------------------------------
# periodic Beltrami equation


@dataclass(frozen=True)
class QCMap:
    """Solved quasiconformal map of a torus chart.

    The map is ``f(z) = z + k conj(z) + s(z)`` with ``k`` the linear
    coefficient and ``s`` doubly periodic with zero mean; ``scale * f``
    sends the lattice generated by ``(1, tau)`` to the one generated by
    ``(1, tau_prime)``.
    """

    mu: sections.Section
    displacement: np.ndarray
    linear_coefficient: complex
    f_z: np.ndarray
    f_zbar: np.ndarray
    tau: complex
    tau_prime: complex
    generator_images: tuple
    report: SolveReport

    @property
    def surface(self):
        return self.mu.surface

    @property
    def scale(self):
        """Normalizer sending the first generator image to one."""
        return 1.0 / (1.0 + self.linear_coefficient)

    @property
    def jacobian(self):
        """Jacobian determinant field ``|f_z|^2 (1 - |mu|^2)``."""
        return np.abs(self.f_z) ** 2 * (1.0 - np.abs(self.mu.values) ** 2)

    @property
    def is_identity(self):
        return not np.any(self.mu.values)

    def map_values(self):
        """Grid samples of ``f`` in the chart coordinate."""
        srf = self.surface
        z = srf.u[:, np.newaxis] + self.tau * srf.v[np.newaxis, :]
        return z + self.linear_coefficient * np.conj(z) + self.displacement


def _torus_chart_constants(surface):
    if not surface.v_periodic or "tau" not in surface.extra:
        raise DomainError(
            f"lattice Beltrami solve needs a torus chart, got kind "
            f"{surface.kind!r}"
        )
    cu = complex(np.ravel(surface.cu)[0])
    cv = complex(np.ravel(surface.cv)[0])
    return surface.extra["tau"], cu, cv


def _lattice_symbols(surface):
    """Spectral symbols of d_z and d_zbar on the torus lattice."""
    tau, cu, cv = _torus_chart_constants(surface)
    nu_, nv_ = surface.shape
    m = np.fft.fftfreq(nu_, 1.0 / nu_)[:, np.newaxis]
    n = np.fft.fftfreq(nv_, 1.0 / nv_)[np.newaxis, :]
    dz_sym = 2j * np.pi * (cu * m + cv * n)
    dzb_sym = 2j * np.pi * (np.conj(cu) * m + np.conj(cv) * n)
    return tau, dz_sym, dzb_sym


def _anderson_update(hist_x, hist_r):
    """Type-II mixing step from the stored iterate and residual history."""
    d_r = np.stack(
        [hist_r[i + 1] - hist_r[i] for i in range(len(hist_r) - 1)], axis=1
    )
    d_x = np.stack(
        [hist_x[i + 1] - hist_x[i] for i in range(len(hist_x) - 1)], axis=1
    )
    gamma, *_ = np.linalg.lstsq(d_r, hist_r[-1], rcond=None)
    return hist_x[-1] + hist_r[-1] - (d_x + d_r) @ gamma


def solve_beltrami(mu, tolerance=BELTRAMI_TOL, max_iterations=BELTRAMI_MAX):
    """Solve ``f_zbar = mu f_z`` on the torus chart carrying ``mu``.

    Splitting ``f = z + k conj(z) + s`` with ``s`` doubly periodic reduces
    the equation to the fixed point ``s = dzbar^{-1}(mu (1 + s_z) - mean)``,
    with the inverse realized as a Fourier multiplier on lattice frequencies
    and the mean carried by the linear coefficient ``k``.  Plain iteration
    contracts at rate ``sup |mu|``; when it stalls the update switches to
    Anderson-style mixing over a short history.

    Returns a :class:`QCMap`; its report holds the re-evaluated residual
    of the solved map.
    """
    if mu.weight != -2:
        raise TypeError(f"deformation data must have weight -2, got {mu.weight}")
    srf = mu.surface
    tau, dz_sym, dzb_sym = _lattice_symbols(srf)
    mu_vals = mu.values
    sup = float(np.max(np.abs(mu_vals)))
    if sup >= MU_SUP_LIMIT:
        raise DomainError(
            f"deformation sup modulus {sup:.3f} >= {MU_SUP_LIMIT}; the fixed "
            "point is not reliably contracting there"
        )
    inv_dzb = np.zeros_like(dzb_sym)
    nonzero = dzb_sym != 0.0
    inv_dzb[nonzero] = 1.0 / dzb_sym[nonzero]

    def advance(s):
        s_z = np.fft.ifft2(np.fft.fft2(s) * dz_sym)
        g = mu_vals * (1.0 + s_z)
        g_hat = np.fft.fft2(g)
        k = complex(g_hat[0, 0] / g_hat.size)
        g_hat[0, 0] = 0.0
        return np.fft.ifft2(g_hat * inv_dzb), k

    s = np.zeros_like(mu_vals)
    k = 0.0 + 0.0j
    hist_x, hist_r = [], []
    prev_norm = np.inf
    rising = 0
    mixing = False
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        s_new, k = advance(s)
        r = s_new - s
        r_norm = float(np.max(np.abs(r)))
        if r_norm < tolerance * (1.0 + float(np.max(np.abs(s_new)))):
            s = s_new
            converged = True
            break
        if r_norm > prev_norm:
            rising += 1
            if rising >= 4:
                raise SolverError(
                    f"Beltrami fixed point is not contracting: increment "
                    f"{r_norm:.3e} after {iterations} iterations",
                    stage="beltrami fixed point",
                )
        else:
            rising = 0
        if not mixing and iterations >= 3 and r_norm > 0.5 * prev_norm:
            mixing = True
        hist_x.append(s.ravel().copy())
        hist_r.append(r.ravel().copy())
        if len(hist_x) > ANDERSON_DEPTH + 1:
            hist_x.pop(0)
            hist_r.pop(0)
        if mixing and len(hist_r) >= 2:
            s = _anderson_update(hist_x, hist_r).reshape(srf.shape)
        else:
            s = s_new
        prev_norm = r_norm
    if not converged:
        raise ConvergenceError(
            f"Beltrami fixed point missed tolerance {tolerance:.1e} in "
            f"{max_iterations} iterations (last increment {prev_norm:.3e})",
            report={"last_increment": prev_norm},
            stage="beltrami fixed point",
        )

    s_hat = np.fft.fft2(s)
    s_z = np.fft.ifft2(s_hat * dz_sym)
    s_zb = np.fft.ifft2(s_hat * dzb_sym)
    g = mu_vals * (1.0 + s_z)
    k = complex(np.mean(g))
    f_z = 1.0 + s_z
    f_zb = k + s_zb
    resid = f_zb - mu_vals * f_z
    w = srf.chart_weights / float(np.sum(srf.chart_weights))
    resid_l2 = float(np.sqrt(np.sum(np.abs(resid) ** 2 * w)))
    fz_l2 = float(np.sqrt(np.sum(np.abs(f_z) ** 2 * w)))
    jac = np.abs(f_z) ** 2 * (1.0 - np.abs(mu_vals) ** 2)
    min_jac = float(np.min(jac))
    if min_jac <= 0.0:
        raise SolverError(
            f"solved map is not orientation preserving: min Jacobian "
            f"{min_jac:.3e}",
            stage="beltrami fixed point",
        )
    gen1 = 1.0 + k
    gen2 = tau + k * np.conj(tau)
    report = SolveReport(
        residual_sup=float(np.max(np.abs(resid))),
        residual_l2=resid_l2,
        iterations=iterations,
        converged=True,
        method="lattice multiplier fixed point"
        + (" with mixing" if mixing else ""),
        resolution=srf.shape,
        truncation=dict(srf.truncation),
        notes={
            "relative_l2": resid_l2 / fz_l2,
            "linear_coefficient": complex(k),
            "tau_prime": complex(gen2 / gen1),
            "min_jacobian": min_jac,
        },
    )
    return QCMap(
        mu=mu,
        displacement=s,
        linear_coefficient=k,
        f_z=f_z,
        f_zbar=f_zb,
        tau=complex(tau),
        tau_prime=complex(gen2 / gen1),
        generator_images=(complex(gen1), complex(gen2)),
        report=report,
    )


def beltrami_of_map(qcmap):
    """Beltrami coefficient re-derived from the sampled map values.

    Differentiates the displacement with the chart stencils rather than the
    lattice multipliers, so on charts with local stencils this is an
    independent check of the spectral solve.
    """
    srf = qcmap.surface
    s = qcmap.displacement
    f_z = 1.0 + srf.dz(s)
    f_zb = qcmap.linear_coefficient + srf.dzb(s)
    return f_zb / f_z


def stretch_map(surface, ratio):
    """Closed-form transverse affine scaling of a cylinder chart.

    Scaling the conformal transverse coordinate by ``ratio`` maps the collar
    of core length ``ell`` onto the collar of core length ``ell / ratio``;
    the chart representation is ``f(z) = c (z + k conj(z))`` with
    ``k = (1 - ratio) / (1 + ratio)`` and ``c = (1 + ratio) / 2``, so the
    Beltrami coefficient is the constant ``k``.
    """
    ratio = float(ratio)
    if ratio <= 0.0:
        raise DomainError(f"stretch ratio must be positive, got {ratio}")
    k = (1.0 - ratio) / (1.0 + ratio)
    c = 0.5 * (1.0 + ratio)
    shape = surface.shape
    mu = sections.section(surface, -2, np.full(shape, k, dtype=complex))
    return QCMap(
        mu=mu,
        displacement=np.zeros(shape, dtype=complex),
        linear_coefficient=complex(k),
        f_z=np.full(shape, c, dtype=complex),
        f_zbar=np.full(shape, c * k, dtype=complex),
        tau=complex(0.0),
        tau_prime=complex(0.0),
        generator_images=(),
        report=None,
    )


# ---------------------------------------------------------------------------
# transport to the deformed chart


def _lattice_interp(values, z, tau, shape):
    """Bicubic interpolation of a doubly periodic grid field at points z."""
    nu_, nv_ = shape
    y = np.imag(z) / np.imag(tau)
    x = np.real(z) - y * np.real(tau)
    coords = np.stack(
        [np.mod(x, 1.0) * nu_, np.mod(y, 1.0) * nv_], axis=0
    )
    flat = coords.reshape(2, -1)
    out = map_coordinates(
        np.real(values), flat, order=3, mode="grid-wrap"
    ) + 1j * map_coordinates(np.imag(values), flat, order=3, mode="grid-wrap")
    return out.reshape(np.shape(z))


def push_L(mu, nu, qcmap, deformed_surface=None, tolerance=1e-12, max_iterations=200):
    """Transport a weight -2 field to the deformed chart grid.

    The transported components are ``(nu / (1 - |mu|^2)) (f_z / conj(f_z))``
    evaluated at the preimage of each deformed-chart node.  Preimages come
    from the contraction ``z = w (1 + k) - k conj(z) - s(z)`` and field
    values between nodes from bicubic lattice interpolation.  For the
    punctured torus the image chart is translated so the image of the base
    puncture lands on the deformed surface's puncture.
    """
    srf = qcmap.surface
    if mu is not qcmap.mu and not np.array_equal(mu.values, qcmap.mu.values):
        raise PreconditionError("mu does not match the solved map")
    if nu.surface is not srf:
        raise DomainError("field lives on a different surface than the map")
    if nu.weight != -2:
        raise TypeError(f"transport acts on weight -2 fields, got {nu.weight}")
    min_jac = float(np.min(qcmap.jacobian))
    if min_jac <= 0.0:
        raise SolverError(
            f"map is not invertible: min Jacobian {min_jac:.3e}",
            stage="chart transport",
        )
    if deformed_surface is None:
        from . import models

        deformed_surface = models.construct_model(
            srf.kind, {"tau": qcmap.tau_prime}, resolution=srf.shape
        )
    if qcmap.is_identity:
        return sections.section(deformed_surface, -2, nu.values.copy())
    k = qcmap.linear_coefficient
    s = qcmap.displacement
    tau = qcmap.tau
    zeta = (
        deformed_surface.u[:, np.newaxis]
        + qcmap.tau_prime * deformed_surface.v[np.newaxis, :]
    )
    shift = 0.0 + 0.0j
    if srf.kind == "punctured_torus":
        p = srf.extra["puncture_z"]
        image_p = qcmap.scale * (
            p + k * np.conj(p) + _lattice_interp(s, np.array([p]), tau, srf.shape)[0]
        )
        shift = deformed_surface.extra["puncture_z"] - image_p
    w0 = (zeta - shift) / qcmap.scale
    z = zeta.copy()
    converged = False
    for _ in range(max_iterations):
        z_new = w0 - k * np.conj(z) - _lattice_interp(s, z, tau, srf.shape)
        move = float(np.max(np.abs(z_new - z)))
        z = z_new
        if move < tolerance:
            converged = True
            break
    if not converged:
        raise SolverError(
            f"chart inversion stalled at move {move:.3e}",
            stage="chart transport",
        )
    # The chart the image grid carries is reached through scale * f, so the
    # derivative quotient picks up the phase of the complex normalizer.
    phase = qcmap.scale / np.conj(qcmap.scale)
    field = (
        phase
        * nu.values
        / (1.0 - np.abs(qcmap.mu.values) ** 2)
        * qcmap.f_z
        / np.conj(qcmap.f_z)
    )
    vals = _lattice_interp(field, z, tau, srf.shape)
    return sections.section(deformed_surface, -2, vals)


# ---------------------------------------------------------------------------
# pullback of the deformed raising derivative


def _h_values(surface, h):
    if h is None:
        return np.zeros(surface.shape)
    return np.real(h.values if hasattr(h, "values") else np.asarray(h))


def pullback_K(mu, r, eta, qcmap, h):
    """Deformed raising derivative acting through base-chart fields.

    ``eta`` holds the base-chart pullback components of a weight-``r``
    tensor of the deformed surface; the return value holds the pullback
    components of the deformed raising derivative applied to it, a weight
    ``r + 1`` section on the base chart.  ``h`` is the conformal factor of
    the pulled-back area element (``None`` means unchanged), and ``qcmap``
    supplies the map derivative ``f_z``.  For the identity deformation the
    plain raising derivative is returned unchanged.
    """
    srf = eta.surface
    if mu is not qcmap.mu and not np.array_equal(mu.values, qcmap.mu.values):
        raise PreconditionError("mu does not match the solved map")
    if mu.surface is not srf:
        raise DomainError("field lives on a different surface than the map")
    if eta.weight != r:
        raise TypeError(f"section has weight {eta.weight}, expected {r}")
    if qcmap.is_identity:
        return sections.k_derivative(eta)
    mu_vals = mu.values
    mu_bar = np.conj(mu_vals)
    abs2 = np.abs(mu_vals) ** 2
    amp = 1.0 / (1.0 - abs2)
    lam_star = np.exp(2.0 * _h_values(srf, h)) * srf.lam**2.0

    def d_mu(field):
        return srf.dz(field) - mu_bar * srf.dzb(field)

    sigma = eta.values
    term1 = lam_star ** (0.5 * (r - 1)) * d_mu(lam_star ** (-0.5 * r) * sigma)
    f_zbar_conj = np.conj(qcmap.f_z)
    log_der = 2.0 * d_mu(f_zbar_conj) / f_zbar_conj + d_mu(np.log1p(-abs2))
    term2 = 0.5 * r * lam_star ** (-0.5) * sigma * log_der
    vals = np.sqrt(amp) * (term1 + term2)
    return sections.section(srf, r + 1, vals, valid=srf.erode_valid(eta.valid))


# ---------------------------------------------------------------------------
# the dual frame


@dataclass(frozen=True)
class OmegaFrame:
    """Converged dual frame with its residual summary.

    ``frame`` holds weight -2 sections on the base chart; their amplified
    pullbacks represent the transported coordinate fields on the deformed
    surface.  ``pairing_residual`` is the deviation of the base pairings
    with the harmonic basis from the identity; the field residuals measure
    the transported-harmonicity defect.
    """

    mu: sections.Section
    frame: tuple
    basis: HarmonicBasis
    qcmap: QCMap
    h: sections.Section
    pairing_residual: float
    field_residual_sup: float
    field_residual_l2: float
    iterations: int

    def __len__(self):
        return len(self.frame)

    def __iter__(self):
        return iter(self.frame)

    def __getitem__(self, j):
        return self.frame[j]

    @property
    def amplification(self):
        return 1.0 / (1.0 - np.abs(self.mu.values) ** 2)

    def coordinate_pullbacks(self):
        """Pullback components of the transported frame fields."""
        amp = self.amplification
        return tuple(
            sections.section(self.mu.surface, -2, amp * w.values)
            for w in self.frame
        )

    def orthonormal_pullbacks(self):
        """Gram-Schmidt of the coordinate pullbacks in the deformed pairing.

        Returns ``(fields, transform)`` with ``fields[j] = sum_i
        pullbacks[i] transform[i, j]`` orthonormal for the ``e^{2h}``
        pairing.
        """
        vecs = self.coordinate_pullbacks()
        gram = _gram_matrix(vecs, self.h)
        chol = np.linalg.cholesky(gram)
        transform = np.linalg.inv(chol).conj().T
        out = []
        for j in range(len(vecs)):
            vals = np.zeros_like(vecs[0].values)
            for i in range(len(vecs)):
                vals = vals + vecs[i].values * transform[i, j]
            out.append(sections.section(self.mu.surface, -2, vals))
        return tuple(out), transform

    def residual_summary(self):
        return {
            "pairing_residual": self.pairing_residual,
            "field_residual_sup": self.field_residual_sup,
            "field_residual_l2": self.field_residual_l2,
            "iterations": self.iterations,
        }


def _masked_sup(surface, values, valid):
    mask = valid & surface.norm_mask
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(values)[mask]))


def _masked_l2(surface, values, valid):
    mask = valid & surface.norm_mask
    return float(
        np.sqrt(np.real(np.sum(np.abs(values[mask]) ** 2 * surface.area_weights[mask])))
    )


def omega_frame(
    mu,
    basis,
    qcmap=None,
    h=None,
    tolerance=FRAME_TOL,
    max_iterations=FRAME_MAX,
):
    """Newton solve for the dual frame of a deformation.

    The unknowns are weight -2 fields ``w_j`` required to keep their base
    pairings with the harmonic basis equal to the identity while the
    deformed raising derivative annihilates their transported images.  The
    update inverts the frozen origin differential: basis coefficients
    through the Gram matrix, the orthogonal complement through the
    perpendicular potential solve.  Both equations are linear in ``w_j``,
    so on a stall the same update map is resolved exactly by a matrix-free
    Krylov iteration.

    Returns an :class:`OmegaFrame`.  The pairing equations are satisfied to
    roundoff after the first update; the surviving field residual measures
    the discrete compatibility of the overdetermined system.
    """
    srf = mu.surface
    if mu.weight != -2:
        raise TypeError(f"deformation data must have weight -2, got {mu.weight}")
    items = list(basis)
    quick_gram = _gram_matrix(items)
    if float(np.max(np.abs(quick_gram - np.eye(len(items))))) > GRAM_TOL:
        raise PreconditionError("harmonic basis is not orthonormal")
    if not np.any(mu.values):
        zero_h = sections.section(srf, 0, np.zeros(srf.shape))
        return OmegaFrame(
            mu=mu,
            frame=tuple(items),
            basis=basis if isinstance(basis, HarmonicBasis) else HarmonicBasis(
                tuple(items), ()
            ),
            qcmap=qcmap,
            h=zero_h if h is None else h,
            pairing_residual=float(
                np.max(np.abs(quick_gram - np.eye(len(items))))
            ),
            field_residual_sup=0.0,
            field_residual_l2=0.0,
            iterations=0,
        )
    if qcmap is None:
        qcmap = solve_beltrami(mu)
    if h is None:
        h, _ = solve_prescribed_curvature(mu)
    amp = 1.0 / (1.0 - np.abs(mu.values) ** 2)

    def field_residual(w_vals):
        pulled = sections.section(srf, -2, amp * w_vals)
        return pullback_K(mu, -2, pulled, qcmap, h)

    def origin_inverse(coeffs, g_section):
        vals = np.zeros(srf.shape, dtype=complex)
        coef = np.linalg.solve(quick_gram.T, coeffs)
        for c, item in zip(coef, items):
            vals = vals + c * item.values
        vals = vals + k2_potential_solve(g_section, harmonic_basis=items).values
        return vals

    def newton_step(w_vals, target):
        coeffs = np.array(
            [
                sections.inner_product(
                    sections.section(srf, -2, w_vals), item
                )
                for item in items
            ]
        ) - target
        resid = field_residual(w_vals)
        return origin_inverse(coeffs, resid), resid

    frame = []
    total_iters = 0
    pairing_worst = 0.0
    field_sup = 0.0
    field_l2 = 0.0
    for j in range(len(items)):
        target = np.zeros(len(items), dtype=complex)
        target[j] = 1.0
        w = items[j].values.copy()
        converged = False
        prev_inc = np.inf
        stalls = 0
        resid = None
        for it in range(1, max_iterations + 1):
            delta, resid = newton_step(w, target)
            w = w - delta
            inc = float(np.max(np.abs(delta))) / (1.0 + float(np.max(np.abs(w))))
            total_iters += 1
            if inc < tolerance:
                converged = True
                break
            if inc > 0.95 * prev_inc:
                stalls += 1
                if stalls >= 3:
                    w = _resolve_stalled(srf, newton_step, target, w)
                    converged = True
                    break
            else:
                stalls = 0
            prev_inc = inc
        if not converged:
            raise ConvergenceError(
                f"frame solve missed tolerance {tolerance:.1e} "
                f"(last increment {prev_inc:.3e})",
                report={"last_increment": prev_inc},
                stage="frame newton",
            )
        w_sec = sections.section(srf, -2, w)
        resid = field_residual(w)
        pair = np.array(
            [sections.inner_product(w_sec, item) for item in items]
        ) - target
        pairing_worst = max(pairing_worst, float(np.max(np.abs(pair))))
        field_sup = max(field_sup, _masked_sup(srf, resid.values, resid.valid))
        field_l2 = max(field_l2, _masked_l2(srf, resid.values, resid.valid))
        frame.append(w_sec)
    return OmegaFrame(
        mu=mu,
        frame=tuple(frame),
        basis=basis if isinstance(basis, HarmonicBasis) else HarmonicBasis(
            tuple(items), ()
        ),
        qcmap=qcmap,
        h=h,
        pairing_residual=pairing_worst,
        field_residual_sup=field_sup,
        field_residual_l2=field_l2,
        iterations=total_iters,
    )


def _resolve_stalled(surface, newton_step, target, w_start):
    """Exact solve of the linear frame equations by matrix-free Krylov.

    The quasi-Newton map is affine in the unknown field; its fixed point
    solves ``(I - M) w = b`` with ``M`` the homogeneous part of one update.
    """
    shape = surface.shape
    size = w_start.size
    zero = np.zeros(shape, dtype=complex)
    step_zero, _ = newton_step(zero, target)

    # One update is w -> w - step(w) with step affine in w; the fixed point
    # solves (step(w) - step(0)) = -step(0) for the homogeneous part.
    def apply_homogeneous(x):
        w_vals = x.reshape(shape)
        step, _ = newton_step(w_vals, target)
        return (step - step_zero).ravel()

    op = LinearOperator(
        (size, size), matvec=apply_homogeneous, dtype=complex
    )
    rhs = -step_zero.ravel()
    sol, info = gmres(op, rhs, x0=w_start.ravel(), rtol=1e-12, maxiter=200)
    if info != 0:
        raise ConvergenceError(
            f"stalled frame solve did not close (krylov info {info})",
            stage="frame krylov",
        )
    return sol.reshape(shape)
