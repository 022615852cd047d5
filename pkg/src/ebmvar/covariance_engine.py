"""Covariance dynamics and stationary analysis of the anomaly field.

Matrix covariance ODE, its Kronecker-vectorised form, the stationary solve,
matrix-class certification (Z-matrix, irreducibility, sign of the inverse),
forcing-monotonicity sweeps, the spatial-variance proxy with its exceedance
bound, and the 2x2 negative-correlation counterexample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .errors import (
    NonFiniteState,
    NonPositiveThreshold,
    ParamOutOfRange,
    SolveFailed,
    UnstableK,
)
from .model_core import EbmParams
from .spatial_model import (
    BoundaryTrace,
    Grid2D,
    NoiseCovariance,
    SpatialField,
    SpatialOperators,
    assemble_laplacian,
    build_operators,
    operators_from_arrays,
    solve_equilibrium_profile,
)

DENSE_CAP = 2500  # largest d^2 handled by dense eigensolves / explicit inverses


@dataclass
class VectorisedSystem:
    """Column-stacked form of the covariance ODE: dq/dt = K q + F."""

    K: sp.csc_matrix
    F: np.ndarray
    d: int


@dataclass
class CovarianceState:
    gamma: np.ndarray
    spatial_variance: float
    is_psd: bool
    lam: float | None = None

    @classmethod
    def from_gamma(cls, gamma, lam=None) -> "CovarianceState":
        gamma = np.asarray(gamma, dtype=float)
        sym = 0.5 * (gamma + gamma.T)
        min_eig = float(np.min(np.linalg.eigvalsh(sym)))
        scale = float(np.linalg.norm(sym, 2)) or 1.0
        return cls(gamma=gamma, spatial_variance=float(np.trace(gamma)),
                   is_psd=min_eig >= -1e-8 * scale, lam=lam)


def covariance_rhs(gamma, ops: SpatialOperators) -> np.ndarray:
    """M G + G M^T + tau * (C o (D G D^T + f f^T)) with o the entrywise
    product; identical to the column-factor sum since sum_k l^k (l^k)^T = C."""
    gamma = np.asarray(gamma, dtype=float)
    M = ops.M
    lin = M @ gamma + (M @ gamma.T).T
    inner = np.outer(ops.d_vec, ops.d_vec) * gamma + np.outer(ops.f_vec, ops.f_vec)
    return lin + ops.tau * ops.C * inner


def covariance_rhs_factor_sum(gamma, ops: SpatialOperators) -> np.ndarray:
    """Literal sum over the factor columns; kept as an independent oracle."""
    gamma = np.asarray(gamma, dtype=float)
    M = ops.M
    D = np.diag(ops.d_vec)
    inner = D @ gamma @ D.T + np.outer(ops.f_vec, ops.f_vec)
    noise = np.zeros_like(inner)
    for k in range(ops.L.shape[1]):
        dk = np.diag(ops.L[:, k])
        noise += dk @ inner @ dk
    return M @ gamma + (M @ gamma.T).T + ops.tau * noise


def integrate_covariance(ops: SpatialOperators, T_end, dt,
                         gamma0=None) -> CovarianceState:
    """Classical RK4 on the matrix ODE from Gamma(0) = 0, symmetrising each
    step; the exact flow preserves symmetry, floating point does not."""
    d = ops.d
    gamma = np.zeros((d, d)) if gamma0 is None else np.asarray(gamma0, float).copy()
    n_steps = int(np.ceil(T_end / dt))
    h = T_end / n_steps
    for k in range(n_steps):
        k1 = covariance_rhs(gamma, ops)
        k2 = covariance_rhs(gamma + 0.5 * h * k1, ops)
        k3 = covariance_rhs(gamma + 0.5 * h * k2, ops)
        k4 = covariance_rhs(gamma + h * k3, ops)
        gamma = gamma + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        gamma = 0.5 * (gamma + gamma.T)
        if not np.all(np.isfinite(gamma)):
            raise NonFiniteState(k)
    return CovarianceState.from_gamma(gamma)


def assemble_vectorised(ops: SpatialOperators) -> VectorisedSystem:
    """K = I x M + M x I + tau diag(vec C)(D x D),
    F = tau diag(vec C) vec(f f^T), column-stacking convention."""
    d = ops.d
    M = ops.M.tocsr()
    I = sp.identity(d, format="csr")
    vec_c = np.asarray(ops.C, dtype=float).flatten(order="F")
    D = sp.diags(ops.d_vec)
    K = (sp.kron(I, M) + sp.kron(M, I)
         + ops.tau * sp.diags(vec_c) @ sp.kron(D, D))
    F = ops.tau * vec_c * np.outer(ops.f_vec, ops.f_vec).flatten(order="F")
    return VectorisedSystem(K=K.tocsc(), F=F, d=d)


def k_spectral_abscissa(vs: VectorisedSystem) -> tuple[float, str]:
    """Max real part of K's spectrum, with the route used ("dense" or
    "iterative")."""
    n = vs.K.shape[0]
    if n <= DENSE_CAP:
        return float(np.max(np.linalg.eigvals(vs.K.toarray()).real)), "dense"
    vals = spla.eigs(vs.K, k=1, which="LR", return_eigenvectors=False,
                     maxiter=5000)
    return float(vals.real.max()), "iterative"


def stationary_covariance(vs: VectorisedSystem, lam=None,
                          check_stability=True) -> CovarianceState:
    """Stationary covariance via the sparse direct solve (-K) q = F.

    `check_stability=False` skips the Hurwitz precondition (caller override).
    """
    if check_stability:
        abscissa, _ = k_spectral_abscissa(vs)
        if abscissa >= 0.0:
            raise UnstableK(f"K spectral abscissa {abscissa:.3g} >= 0")
    try:
        q = spla.splu((-vs.K).tocsc()).solve(vs.F)
    except RuntimeError as exc:
        raise SolveFailed(str(exc)) from exc
    resid = np.linalg.norm(vs.K @ q + vs.F, np.inf)
    scale = np.linalg.norm(vs.F, np.inf) or 1.0
    if resid > 1e-9 * scale:
        raise SolveFailed(f"stationary residual {resid:.3e} too large")
    gamma = q.reshape((vs.d, vs.d), order="F")
    defect = np.max(np.abs(gamma - gamma.T))
    gscale = np.max(np.abs(gamma)) or 1.0
    if defect > 1e-10 * gscale:
        raise SolveFailed(f"symmetry defect {defect:.3e} too large")
    return CovarianceState.from_gamma(0.5 * (gamma + gamma.T), lam=lam)


@dataclass
class StabilityCertificate:
    m_spectral_abscissa: float
    k_spectral_abscissa: float
    minus_k_is_Z: bool
    minus_k_irreducible: bool
    inverse_nonnegative: bool
    inverse_strictly_positive: bool
    coercivity_ok: bool
    k_symmetric_part_negative_definite: bool
    eig_route: str
    inverse_route: str

    def to_dict(self) -> dict:
        return {
            "m_spectral_abscissa": self.m_spectral_abscissa,
            "k_spectral_abscissa": self.k_spectral_abscissa,
            "minus_k_is_Z": self.minus_k_is_Z,
            "minus_k_irreducible": self.minus_k_irreducible,
            "inverse_nonnegative": self.inverse_nonnegative,
            "inverse_strictly_positive": self.inverse_strictly_positive,
            "coercivity_ok": self.coercivity_ok,
            "k_symmetric_part_negative_definite":
                self.k_symmetric_part_negative_definite,
            "eig_route": self.eig_route,
            "inverse_route": self.inverse_route,
        }


def certify(ops: SpatialOperators, vs: VectorisedSystem) -> StabilityCertificate:
    """Matrix-class certificate for the stationary solve.

    Nonsymmetric "negative definiteness" is reported two ways: the spectral
    abscissa (Hurwitz reading, the property the ODE limit actually uses) and
    negative definiteness of the symmetric part.  Inverse nonnegativity is
    verified by explicit columnwise solves when d^2 <= DENSE_CAP; otherwise
    it is asserted only through the Z-matrix + Hurwitz route.
    """
    m_absc = float(np.max(np.linalg.eigvals(ops.M.toarray()).real))
    k_absc, eig_route = k_spectral_abscissa(vs)

    K = vs.K.tocoo()
    off = K.row != K.col
    minus_k_is_Z = bool(np.all(K.data[off] >= -1e-14)) if off.any() else True

    n_comp, _ = connected_components(vs.K, directed=True, connection="strong")
    irreducible = n_comp == 1

    sym = 0.5 * (vs.K + vs.K.T)
    n = vs.K.shape[0]
    if n <= DENSE_CAP:
        sym_nd = bool(np.max(np.linalg.eigvalsh(sym.toarray())) < 0.0)
    else:
        top = spla.eigsh(sym, k=1, which="LA", return_eigenvectors=False,
                         maxiter=5000)
        sym_nd = bool(top[0] < 0.0)

    inv_nonneg = False
    inv_pos = False
    if n <= DENSE_CAP and k_absc < 0.0:
        try:
            lu = spla.splu((-vs.K).tocsc())
            inv = lu.solve(np.eye(n))
            scale = np.max(np.abs(inv)) or 1.0
            inv_nonneg = bool(np.min(inv) >= -1e-10 * scale)
            inv_pos = bool(np.min(inv) > 0.0)
            inverse_route = "explicit"
        except RuntimeError:
            inverse_route = "failed"
    elif k_absc < 0.0 and minus_k_is_Z:
        # M-matrix route: Z-matrix with eigenvalues in the right half plane
        # of -K has a nonnegative inverse; irreducibility upgrades to > 0.
        inv_nonneg = True
        inv_pos = irreducible
        inverse_route = "m-matrix"
    else:
        inverse_route = "not-asserted"

    return StabilityCertificate(
        m_spectral_abscissa=m_absc,
        k_spectral_abscissa=k_absc,
        minus_k_is_Z=minus_k_is_Z,
        minus_k_irreducible=irreducible,
        inverse_nonnegative=inv_nonneg,
        inverse_strictly_positive=inv_pos,
        coercivity_ok=bool(np.all(ops.b_vec >= 0.0)),
        k_symmetric_part_negative_definite=sym_nd,
        eig_route=eig_route,
        inverse_route=inverse_route,
    )


def spatial_variance(cs: CovarianceState) -> float:
    """Trace of the covariance matrix."""
    return float(np.trace(cs.gamma))


def markov_bound(var_sp, threshold) -> float:
    """Second-moment exceedance bound min(1, Var_sp / theta^2)."""
    if threshold <= 0.0:
        raise NonPositiveThreshold(f"threshold {threshold} must be > 0")
    return float(min(1.0, var_sp / threshold**2))


@dataclass
class SweepPoint:
    lam: float
    applicable: bool
    note: str = ""
    trace: float | None = None
    gamma: np.ndarray | None = None
    diff_quotient: np.ndarray | None = None
    min_diff_entry: float | None = None
    entrywise_positive: bool | None = None
    sensitivity: np.ndarray | None = None
    sensitivity_positive: bool | None = None
    sensitivity_fd_reldiff: float | None = None


@dataclass
class SweepReport:
    points: list[SweepPoint]
    h: float

    @property
    def verdict(self) -> str:
        applicable = [p for p in self.points if p.applicable]
        if not applicable:
            return "non-applicable"
        if all(p.entrywise_positive for p in applicable):
            return "entrywise positive"
        return "not monotone"

    def to_csv(self) -> str:
        lines = ["lambda,applicable,trace,min_dgamma_entry,verdict,note"]
        for p in self.points:
            verdict = ("entrywise-positive" if p.entrywise_positive
                       else "non-applicable" if not p.applicable else "mixed")
            trace = "" if p.trace is None else f"{p.trace:.17g}"
            mde = "" if p.min_diff_entry is None else f"{p.min_diff_entry:.17g}"
            lines.append(f"{p.lam:.17g},{p.applicable},{trace},{mde},"
                         f"{verdict},{p.note}")
        return "\n".join(lines) + "\n"


def _stationary_at(g, Q_field, theta, p, noise, lam, T_hint=None):
    T_star = solve_equilibrium_profile(g, Q_field, lam, theta, p, T0=T_hint)
    ops = build_operators(g, T_star, Q_field, p, noise)
    vs = assemble_vectorised(ops)
    return T_star, ops, vs, stationary_covariance(vs, lam=lam)


def monotonicity_sweep(g: Grid2D, Q_field: SpatialField, theta: BoundaryTrace,
                       p: EbmParams, noise: NoiseCovariance, lambda_grid,
                       h=None) -> SweepReport:
    """Central-difference test of the entrywise forcing-monotonicity of the
    stationary covariance, with the elliptic sensitivity cross-check.

    A grid point is applicable only when the equilibrium profile lies
    strictly inside the ice-sensitive band at every node, the coercivity
    r1 - Q s >= 0 holds, the noise covariance is entrywise nonnegative, and
    the vectorised operator is Hurwitz; otherwise the point is flagged and
    no verdict is asserted there.
    """
    points = []
    s = p.slope
    A = assemble_laplacian(g)
    if h is None:
        h_for = lambda lam: 1e-4 * max(1.0, abs(lam))
    else:
        h_for = lambda lam: h

    for lam in lambda_grid:
        hh = h_for(lam)
        try:
            T_star, ops, vs, cs = _stationary_at(g, Q_field, theta, p, noise, lam)
        except Exception as exc:  # keep partial results per grid point
            points.append(SweepPoint(lam=float(lam), applicable=False,
                                     note=f"solver error: {exc}"))
            continue

        inside = np.all((T_star.values > p.T_l) & (T_star.values < p.T_u))
        coercive = np.all(p.r1 - Q_field.values * s >= 0.0)
        c_nonneg = np.all(ops.C >= 0.0)
        applicable = bool(inside and coercive and c_nonneg)
        why = []
        if not inside:
            why.append("profile leaves the ice-sensitive band")
        if not coercive:
            why.append("coercivity violated")
        if not c_nonneg:
            why.append("noise covariance has negative entries")

        try:
            Tm, _, _, cs_m = _stationary_at(g, Q_field, theta, p, noise,
                                            lam - hh, T_hint=T_star.values)
            Tp, _, _, cs_p = _stationary_at(g, Q_field, theta, p, noise,
                                            lam + hh, T_hint=T_star.values)
        except Exception as exc:
            points.append(SweepPoint(lam=float(lam), applicable=False,
                                     trace=cs.spatial_variance,
                                     note=f"finite-difference solve failed: {exc}"))
            continue

        dgamma = (cs_p.gamma - cs_m.gamma) / (2.0 * hh)
        min_entry = float(np.min(dgamma))

        if not applicable:
            points.append(SweepPoint(
                lam=float(lam), applicable=False,
                trace=cs.spatial_variance, gamma=cs.gamma,
                diff_quotient=dgamma, min_diff_entry=min_entry,
                note="; ".join(why),
            ))
            continue

        # Discrete sensitivity of the equilibrium profile:
        # (A_delta - diag(r1 - Q s)) u = -1, expected u > 0 under coercivity.
        J = A - sp.diags(p.r1 - Q_field.values * s)
        u = spla.splu(J.tocsc()).solve(-np.ones(g.d))
        fd_u = (Tp.values - Tm.values) / (2.0 * hh)
        rel = float(np.max(np.abs(u - fd_u) / np.maximum(np.abs(u), 1e-300)))

        points.append(SweepPoint(
            lam=float(lam), applicable=True,
            trace=cs.spatial_variance, gamma=cs.gamma,
            diff_quotient=dgamma, min_diff_entry=min_entry,
            entrywise_positive=bool(min_entry > 0.0),
            sensitivity=u, sensitivity_positive=bool(np.min(u) > 0.0),
            sensitivity_fd_reldiff=rel,
        ))
    return SweepReport(points=points, h=h if h is not None else -1.0)


@dataclass
class CounterexampleResult:
    trace: float
    d_trace_d_lambda: float
    numeric_trace: float


def counterexample_operators(s, c, lam) -> SpatialOperators:
    """2x2 additive-noise system with anticorrelated noise:
    M = [[-1, s], [s, -1]], C = [[1, -c], [-c, 1]], f = (lam, 1)."""
    M = np.array([[-1.0, s], [s, -1.0]])
    C = np.array([[1.0, -c], [-c, 1.0]])
    L = np.linalg.cholesky(C)
    return operators_from_arrays(M, d_vec=[0.0, 0.0], f_vec=[lam, 1.0],
                                 C=C, L=L, tau=1.0)


def counterexample_trace(s, c, lam) -> CounterexampleResult:
    """Closed-form stationary trace (lam^2 - 2 c s lam + 1)/(2(1 - s^2)) and
    derivative (lam - c s)/(1 - s^2), alongside the Lyapunov-solver trace."""
    if not (0.0 < s < 1.0) or not (0.0 < c < 1.0):
        raise ParamOutOfRange("need 0 < s < 1 and 0 < c < 1")
    if lam < 0.0:
        raise ParamOutOfRange("lambda must be >= 0")
    trace = (lam**2 - 2.0 * c * s * lam + 1.0) / (2.0 * (1.0 - s**2))
    deriv = (lam - c * s) / (1.0 - s**2)
    ops = counterexample_operators(s, c, lam)
    cs = stationary_covariance(assemble_vectorised(ops), lam=lam)
    return CounterexampleResult(trace=float(trace),
                                d_trace_d_lambda=float(deriv),
                                numeric_trace=cs.spatial_variance)


def counterexample_sign_change(s, c, tol=1e-8) -> float:
    """Locate the zero of the numeric finite-difference trace derivative by
    bisection; the closed form predicts lambda = c*s."""
    h = 1e-6

    def fd(lam):
        lo = counterexample_trace(s, c, max(lam - h, 0.0))
        hi = counterexample_trace(s, c, lam + h)
        return (hi.numeric_trace - lo.numeric_trace) / (h + min(h, lam))

    lo, hi = 0.0, 1.0
    flo = fd(lo)
    if flo >= 0.0:
        return 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if fd(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
