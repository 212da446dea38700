""" Stability analyzers for the delayed dual iteration.

Matrix p-norms and spectral radii, the classical totally-asynchronous test
rho(|I + sum Phi_i|) < 1, the per-step gate condition sum_j ||R_1j||_p < 1,
and small-instance switched-system oracles (mode enumeration and the i.i.d. /
Markov mean-square tests on the Kronecker lift).
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize

from asyncpqp.exceptions import ConvergenceError, ModeOverflowError
from asyncpqp.problem import PhiSet, SeparableQpProblem, dual_curvature

# Largest matrix handed to the dense eigensolver on the "auto" path
DENSE_MAX_DIM = 200
# Largest Kronecker lift the mean-square oracles will build
MAX_LIFT_DIM = 2500


def parse_norm(p):
    """Normalize a norm selector to 1, 2 or np.inf."""
    if isinstance(p, str):
        key = p.strip().lower()
        if key in ("inf", "infinity", "max"):
            return np.inf
        try:
            p = float(key)
        except ValueError:
            raise ValueError(f"Unsupported norm {p!r}, expected 1, 2 or inf")
    if p == 1:
        return 1
    if p == 2:
        return 2
    if p == np.inf:
        return np.inf
    raise ValueError(f"Unsupported norm {p!r}, expected 1, 2 or inf")


def norm_label(p) -> str:
    p = parse_norm(p)
    return "inf" if p == np.inf else str(p)


def matrix_p_norm(M: np.ndarray, p=2) -> float:
    """Induced matrix norm.

    p=1 is the max absolute column sum, p=inf the max absolute row sum and
    p=2 the largest singular value.
    """
    return float(stacked_p_norms(np.asarray(M, dtype=np.float64)[None], p)[0])


def stacked_p_norms(Ms: np.ndarray, p=2) -> np.ndarray:
    """Induced p-norms of a (K, r, c) stack of matrices."""
    p = parse_norm(p)
    if Ms.shape[0] == 0:
        return np.zeros(0)
    if p == 1:
        return np.abs(Ms).sum(axis=1).max(axis=-1)
    if p == np.inf:
        return np.abs(Ms).sum(axis=2).max(axis=-1)
    return np.linalg.norm(Ms, ord=2, axis=(1, 2))


def _power_iteration(M: np.ndarray, tol: float = 1e-12, max_iter: int = 10000) -> float:
    """Perron root of an entrywise-nonnegative matrix."""
    n = M.shape[0]
    x = np.ones(n) / np.sqrt(n)
    lam = 0.0
    for _ in range(max_iter):
        y = M @ x
        y_norm = np.linalg.norm(y)
        if y_norm == 0:
            return 0.0
        x_new = y / y_norm
        # Rayleigh-type estimate ||M x|| for unit x, converges to the Perron root
        lam_new = float(np.linalg.norm(M @ x_new))
        if abs(lam_new - lam) <= tol * max(lam_new, 1.0):
            return lam_new
        x, lam = x_new, lam_new
    raise ConvergenceError(f"Power iteration did not converge in {max_iter} steps")


def spectral_radius(M: np.ndarray, method: str = "auto") -> float:
    """max |lambda_i| of a square matrix.

    Args:
        M: Square matrix.
        method: "dense" (LAPACK eigenvalues), "power" (entrywise-nonnegative
            matrices only) or "auto" (dense up to DENSE_MAX_DIM, power
            iteration above that when M >= 0, dense otherwise).

    Raises:
        ConvergenceError: power iteration stalled with ``method="power"``.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"Expected a square matrix, got shape {M.shape}")
    nonnegative = bool(np.all(M >= 0))

    if method == "power":
        if not nonnegative:
            raise ValueError("Power iteration needs an entrywise-nonnegative matrix")
        return _power_iteration(M)
    if method == "auto" and M.shape[0] > DENSE_MAX_DIM and nonnegative:
        try:
            return _power_iteration(M)
        except ConvergenceError as exc:
            logging.warning(f"{exc}; falling back to the dense eigensolver")
    elif method not in ("auto", "dense"):
        raise ValueError(f"Unknown method {method!r}")

    if M.shape[0] == 0:
        return 0.0
    return float(np.abs(scipy.linalg.eigvals(M)).max())


def bertsekas_condition(phi_set: PhiSet) -> float:
    """rho(|I + sum Phi_i|), entrywise absolute value; < 1 guarantees
    convergence under arbitrary bounded delays."""
    return spectral_radius(np.abs(phi_set.sync_matrix))


def sync_radius(phi_set: PhiSet) -> float:
    """rho(I + sum Phi_i)"""
    return spectral_radius(phi_set.sync_matrix)


def uniqueness_margin(phi_set: PhiSet) -> float:
    """Smallest eigenvalue of -sum Phi_i.

    A positive margin means I - R_s is invertible, so every stationary point
    of the delayed iteration equals the synchronous fixed point.
    """
    return float(np.linalg.eigvalsh(-phi_set.aggregate).min())


def step_condition_value(rset, p=2) -> float:
    """sum_j ||R_1j||_p for one assembled RBlockSet."""
    return float(stacked_p_norms(rset.r_blocks, p).sum())


def enumerate_modes(
    phi_set: PhiSet, q: int, cap: Optional[int] = None
) -> List[np.ndarray]:
    """Companion matrix of every joint delay pattern, ordered by mode_index.

    Raises:
        ModeOverflowError: q^N exceeds ``cap`` (default MAX_MODES).
    """
    from asyncpqp.asynchronous import assemble_r_blocks, build_w_matrix
    from asyncpqp.delay import MAX_MODES, _check_mode_count, decode_mode

    count = _check_mode_count(q, phi_set.N, MAX_MODES if cap is None else cap)
    return [
        build_w_matrix(assemble_r_blocks(phi_set, decode_mode(ix, q, phi_set.N), q))
        for ix in range(count)
    ]


def condition_mask(phi_set: PhiSet, q: int, p=2, cap: Optional[int] = None) -> np.ndarray:
    """Per mode, whether the gate condition sum_j ||R_1j||_p < 1 holds."""
    from asyncpqp.asynchronous import assemble_r_blocks
    from asyncpqp.delay import MAX_MODES, _check_mode_count, decode_mode

    count = _check_mode_count(q, phi_set.N, MAX_MODES if cap is None else cap)
    return np.array(
        [
            step_condition_value(
                assemble_r_blocks(phi_set, decode_mode(ix, q, phi_set.N), q), p
            )
            < 1
            for ix in range(count)
        ]
    )


def _check_lift(dim: int) -> None:
    if dim > MAX_LIFT_DIM:
        raise ModeOverflowError(
            f"Kronecker lift of dimension {dim} exceeds the oracle cap {MAX_LIFT_DIM}"
        )


def iid_kronecker_test(modes: Sequence[np.ndarray], joint_pmf: np.ndarray) -> float:
    """rho(sum_r pi_r W_r (x) W_r), the i.i.d. mean-square stability test.

    Stable in the mean-square sense iff the returned value is < 1.
    """
    joint_pmf = np.asarray(joint_pmf, dtype=np.float64)
    if len(modes) != len(joint_pmf):
        raise ValueError(f"{len(modes)} modes but {len(joint_pmf)} probabilities")
    dim = modes[0].shape[0]
    _check_lift(dim * dim)

    lifted = np.zeros((dim * dim, dim * dim))
    for W, pi in zip(modes, joint_pmf):
        if pi:
            lifted += pi * np.kron(W, W)
    return spectral_radius(lifted, method="dense")


def markov_kronecker_test(modes: Sequence[np.ndarray], transition: np.ndarray) -> float:
    """rho((P^T (x) I) diag(W_r (x) W_r)), the Markov-switching mean-square test."""
    transition = np.asarray(transition, dtype=np.float64)
    eta = len(modes)
    if transition.shape != (eta, eta):
        raise ValueError(f"Transition matrix must be {eta}x{eta}, got {transition.shape}")
    dim = modes[0].shape[0]
    _check_lift(eta * dim * dim)

    diag = scipy.linalg.block_diag(*[np.kron(W, W) for W in modes])
    lifted = np.kron(transition.T, np.eye(dim * dim)) @ diag
    return spectral_radius(lifted, method="dense")


def calibrate_alpha(
    problem: SeparableQpProblem,
    target: float,
    quantity: str = "bertsekas",
    grid: int = 2000,
) -> SeparableQpProblem:
    """Rescale a common step size until the dense oracle reports ``target``.

    The search runs over alpha in (0, 2 / lambda_max(G)), the range where the
    synchronous iteration is stable, with G = sum_i A_i Q_i^{-1} A_i^T. The
    first grid cell where the radius crosses ``target`` is refined with
    Brent's method.

    Args:
        problem: Instance whose blocks are rescaled; its own step sizes are ignored.
        target: Radius to hit.
        quantity: "bertsekas" for rho(|I + sum Phi_i|), "sync" for rho(I + sum Phi_i).
        grid: Number of grid cells scanned before refinement.

    Raises:
        ValueError: the radius never crosses ``target`` in the stable range.
    """
    G = dual_curvature(problem)
    eye = np.eye(problem.m)
    if quantity == "bertsekas":
        def radius(alpha):
            return spectral_radius(np.abs(eye - alpha * G))
    elif quantity == "sync":
        def radius(alpha):
            return spectral_radius(eye - alpha * G)
    else:
        raise ValueError(f"Unknown quantity {quantity!r}")

    alpha_max = 2.0 / np.linalg.eigvalsh(G).max()
    alphas = alpha_max * np.arange(1, grid) / grid
    # radius(0) == 1, so the sign at the origin is that of 1 - target
    start = np.sign(1.0 - target)
    prev = 0.0
    for alpha in alphas:
        gap = radius(alpha) - target
        if gap == 0:
            return problem.with_alpha(alpha)
        if np.sign(gap) != start:
            if prev == 0.0:
                return problem.with_alpha(alpha)
            root = scipy.optimize.brentq(lambda a: radius(a) - target, prev, alpha, xtol=1e-15)
            return problem.with_alpha(root)
        prev = alpha

    raise ValueError(
        f"{quantity} radius never reaches {target} for alpha in (0, {alpha_max:.6g})"
    )


@dataclass
class StabilityReport:
    """Pre-flight stability summary of an instance under a delay law."""

    bertsekas_rho: float
    sync_rho: float
    sync_norm: float
    uniqueness_margin: float
    p: str
    samples: int
    condition_min: float
    condition_mean: float
    condition_max: float
    fraction_below_one: float

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def summary_lines(self) -> List[str]:
        return [
            f"bertsekas_rho        {self.bertsekas_rho:.6g}",
            f"sync_rho             {self.sync_rho:.6g}",
            f"||I + sum Phi||_{self.p:<4} {self.sync_norm:.6g}",
            f"uniqueness_margin    {self.uniqueness_margin:.6g}",
            f"condition (p={self.p}, {self.samples} samples): "
            f"min {self.condition_min:.6g}  mean {self.condition_mean:.6g}  "
            f"max {self.condition_max:.6g}  fraction<1 {self.fraction_below_one:.4f}",
        ]


def build_report(phi_set: PhiSet, conditions: np.ndarray, p=2) -> StabilityReport:
    conditions = np.asarray(conditions, dtype=np.float64)
    return StabilityReport(
        bertsekas_rho=bertsekas_condition(phi_set),
        sync_rho=sync_radius(phi_set),
        sync_norm=matrix_p_norm(phi_set.sync_matrix, p),
        uniqueness_margin=uniqueness_margin(phi_set),
        p=norm_label(p),
        samples=int(conditions.size),
        condition_min=float(conditions.min()),
        condition_mean=float(conditions.mean()),
        condition_max=float(conditions.max()),
        fraction_below_one=float((conditions < 1).mean()),
    )
