"""Strategic network formation and outcome simulation.

Links form between feasible pairs (close enough in the first distance
covariate) when both directed utilities clear zero:

    U_i(j) = alpha0 + sum_l alpha_zeta_l |zeta_il - zeta_jl|
             + alpha_mu |mu_i - mu_j| + upsilon_ij

with upsilon drawn independently per ordered pair. Because mu also moves
outcomes, the realized adjacency is endogenous by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import SingularSystem
from .panel import PanelData, SpatialWeightMatrix, row_normalize
from .streams import NETWORK_STAGE, OUTCOME_STAGE, substream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetworkParams:
    """Utility parameters of the link-formation rule."""

    alpha0: float = 1.0
    alpha_zeta: tuple = (-0.1,)
    alpha_mu: float = -0.1
    cutoff: float = 10.0
    upsilon: str = "logistic"

    def __post_init__(self):
        az = tuple(float(a) for a in np.atleast_1d(self.alpha_zeta))
        vals = (self.alpha0, self.alpha_mu, self.cutoff, *az)
        if not np.all(np.isfinite(vals)):
            raise ValueError("network parameters must be finite")
        if self.upsilon not in ("logistic", "normal"):
            raise ValueError(f"unknown upsilon distribution {self.upsilon!r}")
        object.__setattr__(self, "alpha_zeta", az)


@dataclass(frozen=True)
class ZetaSpec:
    """Anchored-uniform distance covariate: zeta_i ~ U[i*spacing, i*spacing + width]."""

    spacing: float = 1.0
    width: float = 2.0

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        base = self.spacing * np.arange(1, n + 1, dtype=float)
        return (base + self.width * rng.random(n))[:, None]


@dataclass(frozen=True)
class McDesign:
    """One Monte Carlo cell: panel sizes, coefficients, seeds, network.

    beta2 is derived as -(lambda0 + delta) * beta1, which makes the
    spatial-Durbin part vanish at delta = -lambda0 and controls the
    strength of the exogenous-lag signal through delta.
    """

    n: int = 100
    T: int = 2
    lambda0: float = 0.5
    delta: float = 0.5
    beta1: float = 1.0
    seed: int = 0
    replications: int = 1000
    zeta: ZetaSpec = field(default_factory=ZetaSpec)
    network: NetworkParams = field(default_factory=NetworkParams)

    def __post_init__(self):
        if self.n < 2 or self.T < 2:
            raise ValueError("need n >= 2 and T >= 2")
        if not abs(self.lambda0) < 1:
            raise ValueError("|lambda0| < 1 required")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")

    @property
    def beta2(self) -> float:
        return -(self.lambda0 + self.delta) * self.beta1

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.beta1, self.beta2])


def _utility_base(params: NetworkParams, zeta: np.ndarray, mu: np.ndarray) -> np.ndarray:
    base = np.full((zeta.shape[0], zeta.shape[0]), params.alpha0)
    for cl, a in enumerate(params.alpha_zeta):
        base += a * np.abs(zeta[:, cl, None] - zeta[None, :, cl])
    base += params.alpha_mu * np.abs(mu[:, None] - mu[None, :])
    return base


def _draw_upsilon(params: NetworkParams, rng: np.random.Generator, size) -> np.ndarray:
    if params.upsilon == "logistic":
        return rng.logistic(size=size)
    return rng.standard_normal(size=size)


def _coerce_zeta(zeta) -> np.ndarray:
    zeta = np.atleast_2d(np.asarray(zeta, dtype=float))
    if zeta.shape[0] == 1 and zeta.shape[1] > 1:
        zeta = zeta.T
    return zeta


def link_utilities(
    params: NetworkParams, zeta, mu: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Directed utilities U_i(j) = base_ij + upsilon_ij for every ordered pair."""
    zeta = _coerce_zeta(zeta)
    n = zeta.shape[0]
    return _utility_base(params, zeta, np.asarray(mu, dtype=float)) + _draw_upsilon(params, rng, (n, n))


def raw_adjacency(params: NetworkParams, zeta, mu, rng: np.random.Generator) -> np.ndarray:
    """One adjacency draw before any isolated-unit repair.

    d_ij = 1 iff U_i(j) > 0, U_j(i) > 0, and |zeta_i1 - zeta_j1| < cutoff.
    """
    zeta = _coerce_zeta(zeta)
    dist = np.abs(zeta[:, 0, None] - zeta[None, :, 0])
    feas = dist < params.cutoff
    np.fill_diagonal(feas, False)
    U = link_utilities(params, zeta, mu, rng)
    return ((U > 0) & (U.T > 0) & feas).astype(float)


def form_network(
    params: NetworkParams, zeta: np.ndarray, mu: np.ndarray, rng: np.random.Generator,
    max_redraws: int = 50,
) -> np.ndarray:
    """Draw one adjacency matrix from the formation model.

    Feasibility requires |zeta_i1 - zeta_j1| < cutoff; a link requires
    both directed utilities positive. Units left isolated get their
    utility shocks redrawn (up to max_redraws sweeps of attempts), after
    which they are attached to the nearest feasible neighbor; both events
    are logged. The result is exactly symmetric with a zero diagonal.

    Returns
    -------
    ndarray of shape (n, n), entries in {0.0, 1.0}.
    """
    zeta = _coerce_zeta(zeta)
    mu = np.asarray(mu, dtype=float)
    n = zeta.shape[0]
    if n < 2:
        raise ValueError("need at least two units")
    dist = np.abs(zeta[:, 0, None] - zeta[None, :, 0])
    feas = dist < params.cutoff
    np.fill_diagonal(feas, False)

    base = _utility_base(params, zeta, mu)
    U = base + _draw_upsilon(params, rng, (n, n))
    forced: list[tuple[int, int]] = []

    def adjacency() -> np.ndarray:
        D = (U > 0) & (U.T > 0) & feas
        for i, j in forced:
            D[i, j] = D[j, i] = True
        return D

    redrawn = attached = 0
    for _ in range(5):  # re-check: fixing one unit can in principle unlink another
        D = adjacency()
        isolated = np.flatnonzero(~D.any(axis=1))
        if isolated.size == 0:
            break
        for i in isolated:
            fixed = False
            for _ in range(max_redraws):
                U[i, :] = base[i, :] + _draw_upsilon(params, rng, n)
                redrawn += 1
                if ((U[i, :] > 0) & (U[:, i] > 0) & feas[i, :]).any():
                    fixed = True
                    break
            if not fixed:
                cand = np.flatnonzero(feas[i, :])
                if cand.size == 0:
                    logger.warning("form_network: unit %d has no feasible partner at all", i)
                    continue
                j = cand[np.argmin(dist[i, cand])]
                forced.append((i, int(j)))
                attached += 1
    if redrawn or attached:
        logger.info("form_network: %d row redraws, %d forced attachments", redrawn, attached)
    return adjacency().astype(float)


def generate_outcomes(
    M: SpatialWeightMatrix,
    design: McDesign,
    rng: np.random.Generator,
    mu: np.ndarray | None = None,
) -> PanelData:
    """Simulate outcomes on a given weight matrix.

    Draw order is mu (only when not supplied), then z, then u, all
    standard normal. Each period solves (I - lambda M) y_t = z_t beta1 +
    (M z_t) beta2 + mu + u_t by direct factorization, and the solution is
    rejected if its residual exceeds 1e-12 relative to the right side.

    Raises
    ------
    SingularSystem
        If any period's solve misses the residual tolerance.
    """
    n, T = design.n, design.T
    if M.n != n:
        raise ValueError(f"weight matrix is {M.n} x {M.n}, design has n={n}")
    if mu is None:
        mu = rng.standard_normal(n)
    z = rng.standard_normal((n, T))
    u = rng.standard_normal((n, T))
    Mz = M.dot(z)
    rhs = design.beta1 * z + design.beta2 * Mz + mu[:, None] + u

    lam = design.lambda0
    try:
        if M.is_sparse:
            A = (sparse.identity(n, format="csc") - lam * M.entries.tocsc())
            lu = splu(A)
            y = np.column_stack([lu.solve(rhs[:, t]) for t in range(T)])
            resid = np.abs(A @ y - rhs).max()
        else:
            A = np.eye(n) - lam * M.entries
            y = np.linalg.solve(A, rhs)
            resid = np.abs(A @ y - rhs).max()
    except (np.linalg.LinAlgError, RuntimeError) as exc:
        raise SingularSystem(f"I - lambda*M could not be factorized: {exc}") from exc
    if not np.all(np.isfinite(y)) or resid > 1e-12 * max(1.0, np.abs(rhs).max()):
        raise SingularSystem(f"solve residual {resid:.3e} above tolerance")
    return PanelData(y=y, z=z[:, None, :], M=M)


def build_mstar(zeta, cutoff: float, f_link=None, isolated_policy: str = "zero_row") -> SpatialWeightMatrix:
    """Exogenous proxy weights from the distance covariate alone.

    d*_ij = f_link(|zeta_i - zeta_j|) within the feasibility window, row
    normalized. f_link defaults to a uniform kernel (all ones) and must
    be nonnegative.
    """
    zeta = np.atleast_2d(np.asarray(zeta, dtype=float))
    if zeta.shape[0] == 1 and zeta.shape[1] > 1:
        zeta = zeta.T
    n = zeta.shape[0]
    dist = np.abs(zeta[:, 0, None] - zeta[None, :, 0])
    w = np.ones_like(dist) if f_link is None else np.asarray(f_link(dist), dtype=float)
    if np.any(w < 0):
        raise ValueError("f_link must be nonnegative")
    w = np.where(dist < cutoff, w, 0.0)
    np.fill_diagonal(w, 0.0)
    deg = w.sum(axis=1)
    isolated = np.flatnonzero(deg == 0)
    if isolated.size:
        if isolated_policy == "error":
            from .errors import IsolatedUnit

            raise IsolatedUnit(f"{isolated.size} unit(s) have no in-window partner")
        logger.warning("build_mstar: %d isolated unit(s) kept as zero rows", isolated.size)
    scale = np.where(deg > 0, deg, 1.0)
    m = w / scale[:, None]
    if n >= 200:
        m = sparse.csr_matrix(m)
    return SpatialWeightMatrix(m)


@dataclass(frozen=True)
class SimulatedPanel:
    """One replication's data with the pieces the estimators do not see."""

    panel: PanelData
    M: SpatialWeightMatrix
    zeta: np.ndarray
    mu: np.ndarray


def simulate_panel(design: McDesign, replication: int) -> SimulatedPanel:
    """Simulate one replication: network stage, then outcome stage.

    Stage streams are independent substreams of the design seed keyed by
    (replication, stage), so any replication can be regenerated in
    isolation, in any order, on any worker.
    """
    rng_net = substream(design.seed, replication, NETWORK_STAGE)
    zeta = design.zeta.draw(design.n, rng_net)
    mu = rng_net.standard_normal(design.n)
    D = form_network(design.network, zeta, mu, rng_net)
    M = row_normalize(D, isolated_policy="zero_row")
    rng_out = substream(design.seed, replication, OUTCOME_STAGE)
    panel = generate_outcomes(M, design, rng_out, mu=mu)
    return SimulatedPanel(panel=panel, M=M, zeta=zeta, mu=mu)
