"""Forward orthogonal deviations for factor removal, plus error filtering.

The weight rows are built from closed-form expressions: with
phi_t = sum_{tau>=t} (f_tau/sigma_tau)^2,

    pi_tt = sqrt(phi_{t+1}/phi_t) / sigma_t
    pi_ts = -f_t f_s sqrt(phi_{t+1}/phi_t) / (phi_{t+1} sigma_t sigma_s^2),  s > t
    pi_ts = 0,  s < t

which annihilates the factor column and whitens heteroskedastic periods
in one pass. Row t is proportional to (u_t - weighted mean of future
periods); for T=2, f=(1,1) this gives (u_1 - u_2)/sqrt(2), the negative
of the usual difference. Row signs carry no information: linear moments
flip sign and quadratic forms are invariant, so the constructive sign is
kept as is.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFactor, TooManyFactors

PHI_TOL = 1e-14


@dataclass(frozen=True)
class HelmertTransform:
    """Factor-removing forward transform.

    Fields
    ------
    pi : ndarray, shape (T-P, T)
        Weight matrix. Annihilates every factor column and satisfies
        pi @ diag(sigma2) @ pi' = I to 1e-12.
    f : ndarray, shape (T, P)
        Factor columns the transform removes.
    sigma2 : ndarray, shape (T,)
        Period variance profile the transform whitens.
    """

    pi: np.ndarray
    f: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        f = np.asarray(self.f, dtype=float)
        if f.ndim == 1:
            f = f[:, None]
        s2 = np.asarray(self.sigma2, dtype=float)
        T = s2.shape[0]
        if pi.shape != (T - f.shape[1], T) or f.shape[0] != T:
            raise ValueError(f"inconsistent shapes: pi {pi.shape}, f {f.shape}, sigma2 {s2.shape}")
        ann = np.max(np.abs(pi @ f)) if f.size else 0.0
        orth = np.max(np.abs(pi @ (s2[:, None] * pi.T) - np.eye(pi.shape[0])))
        if ann > 1e-12 or orth > 1e-12:
            raise ValueError(f"transform invariants violated: |pi f|={ann:.2e}, |pi S pi' - I|={orth:.2e}")
        for a in (pi, f, s2):
            a.flags.writeable = False
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "sigma2", s2)

    @property
    def T(self) -> int:
        return self.sigma2.shape[0]

    @property
    def n_rows(self) -> int:
        return self.pi.shape[0]

    def apply(self, arr: np.ndarray) -> np.ndarray:
        """Transform an n x T array to n x (T-P) forward deviations."""
        return forward_difference(self, arr)


def _pi_matrix(f: np.ndarray, sigma2: np.ndarray, tol: float, allow_trailing: bool) -> np.ndarray:
    """Build the (T-1) x T single-factor weight matrix.

    allow_trailing=True substitutes scaled shift rows e_{t+1}/sigma_{t+1}
    where the factor's tail is zero (phi_{t+1} <= tol); those rows stay
    orthogonal to the factor and to the formula rows because every
    pi_{s,tau} above them is proportional to f_tau = 0.
    """
    f = np.asarray(f, dtype=float)
    s2 = np.asarray(sigma2, dtype=float)
    if f.shape != s2.shape or f.ndim != 1:
        raise ValueError("f and sigma2 must be equal-length vectors")
    if np.any(s2 <= 0):
        raise DegenerateFactor("all sigma_t^2 must be positive")
    T = f.shape[0]
    s = np.sqrt(s2)
    # phi[t-1] = phi_t for t = 1..T, with a trailing phi_{T+1} = 0
    phi = np.concatenate([np.cumsum(((f / s) ** 2)[::-1])[::-1], [0.0]])
    if phi[0] <= tol:
        raise DegenerateFactor("factor loadings are all (numerically) zero")
    if not allow_trailing and np.any(phi[:T] <= tol):
        raise DegenerateFactor(f"phi_t <= {tol} for some t: transform weights undefined")
    t0 = int(np.flatnonzero(phi[:T] > tol).max()) + 1

    pi = np.zeros((T - 1, T))
    for t in range(1, T):
        if t < t0:
            ratio = np.sqrt(phi[t] / phi[t - 1])
            pi[t - 1, t - 1] = ratio / s[t - 1]
            pi[t - 1, t:] = -f[t - 1] * f[t:] * ratio / (phi[t] * s[t - 1] * s2[t:])
        else:
            pi[t - 1, t] = 1.0 / s[t]
    return pi


def helmert_weights(f, sigma2, tol: float = PHI_TOL) -> HelmertTransform:
    """Single-factor transform weights from loadings and variances.

    Parameters
    ----------
    f : array_like, shape (T,)
        Factor loadings.
    sigma2 : array_like, shape (T,)
        Period variances sigma_t^2, all positive.
    tol : float
        Degeneracy threshold on phi_t.

    Returns
    -------
    HelmertTransform

    Raises
    ------
    DegenerateFactor
        If some phi_t <= tol; the weights involve 1/phi and are undefined.
    """
    f = np.asarray(f, dtype=float)
    s2 = np.asarray(sigma2, dtype=float)
    pi = _pi_matrix(f, s2, tol, allow_trailing=False)
    return HelmertTransform(pi=pi, f=f, sigma2=s2)


def multi_factor_weights(F, sigma2, tol: float = PHI_TOL) -> HelmertTransform:
    """Transform removing P factor columns by recursive orthogonalization.

    Stage 1 removes the first column and whitens sigma2; later stages
    operate on already-whitened data (unit variances) and remove the
    transformed remaining columns, so Pi = Pi_P ... Pi_2 Pi_1 is
    (T-P) x T with Pi F = 0 and Pi diag(sigma2) Pi' = I.

    Stages whose transformed factor has a zero tail are completed with
    shift rows; a stage factor that is entirely zero (a linearly
    dependent factor column) raises DegenerateFactor.

    Raises
    ------
    TooManyFactors
        If P >= T.
    DegenerateFactor
        Propagated from any stage.
    """
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    T, P = F.shape
    s2 = np.asarray(sigma2, dtype=float)
    if s2.shape != (T,):
        raise ValueError(f"sigma2 must have length T={T}")
    if P >= T:
        raise TooManyFactors(f"cannot remove P={P} factors from T={T} periods")
    pi = np.eye(T)
    for p in range(P):
        g = pi @ F[:, p]
        stage_s2 = s2 if p == 0 else np.ones(T - p)
        pi = _pi_matrix(g, stage_s2, tol, allow_trailing=True) @ pi
    return HelmertTransform(pi=pi, f=F, sigma2=s2)


def cochrane_orcutt(rho, M_err_t, v: np.ndarray) -> np.ndarray:
    """Apply the spatial error filter (I - sum_q rho_q M_q) to v.

    No invertibility of the filter is required anywhere downstream; the
    moment conditions use the filtered residuals directly.

    Parameters
    ----------
    rho : array_like, shape (Q,)
    M_err_t : sequence of weight matrices at the relevant period
    v : ndarray, shape (n,) or (n, k)
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    out = np.array(v, dtype=float)
    if rho.size != len(M_err_t):
        raise ValueError(f"rho has {rho.size} entries but {len(M_err_t)} filter matrices given")
    for q, m in enumerate(M_err_t):
        if rho[q] != 0.0:
            mat = m.entries if hasattr(m, "entries") else m
            out -= rho[q] * (mat @ v)
    return out


def forward_difference(pi, residuals: np.ndarray) -> np.ndarray:
    """Forward deviations: column t of the output is residuals @ pi[t].

    Parameters
    ----------
    pi : HelmertTransform or ndarray, shape (T-P, T)
    residuals : ndarray, shape (n, T)
    """
    mat = pi.pi if isinstance(pi, HelmertTransform) else np.asarray(pi, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    if residuals.ndim != 2 or residuals.shape[1] != mat.shape[1]:
        raise ValueError(f"residuals must be n x {mat.shape[1]}, got {residuals.shape}")
    return residuals @ mat.T
