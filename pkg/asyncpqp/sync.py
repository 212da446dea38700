""" Synchronous dual ascent, the baseline every asynchronous run converges to. """

import logging
from typing import Optional

import numpy as np

from asyncpqp.exceptions import DivergenceError, UnstableInstanceError
from asyncpqp.problem import PhiSet, SeparableQpProblem, compute_phi_set
from asyncpqp.stability import parse_norm, spectral_radius
from asyncpqp.trajectory import Trajectory

OVERFLOW_GUARD = 1e12


def vector_norm(v: np.ndarray, p=2) -> float:
    return float(np.linalg.norm(v, ord=p))


def sync_step(
    problem: SeparableQpProblem, phi_set: PhiSet, y: np.ndarray
) -> np.ndarray:
    """y <- (I + sum Phi_i) y + B"""
    if len(y) != problem.m:
        raise ValueError(f"y must have {problem.m} entries, got {len(y)}")
    return phi_set.sync_matrix @ y + phi_set.bias


def run_sync(
    problem: SeparableQpProblem,
    y0: np.ndarray,
    epsilon: float,
    max_iter: int,
    p=2,
    allow_divergence: bool = False,
    phi_set: Optional[PhiSet] = None,
) -> Trajectory:
    """Iterate sync_step until ||y^{k+1} - y^k||_p < epsilon or max_iter steps.

    Args:
        problem: The QP instance.
        y0: Initial dual vector.
        epsilon: Termination tolerance on the step residual.
        max_iter: Maximum number of steps.
        p: Norm used for the residual (1, 2 or np.inf).
        allow_divergence: Skip the rho(I + sum Phi_i) < 1 precondition.
        phi_set: Precomputed Phi_i / B, computed from ``problem`` when omitted.

    Raises:
        UnstableInstanceError: spectral radius of I + sum Phi_i is >= 1 and
            ``allow_divergence`` is False.
        DivergenceError: ||y||_inf exceeded the overflow guard; the partial
            trajectory is attached.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be positive, got {max_iter}")
    p = parse_norm(p)
    if phi_set is None:
        phi_set = compute_phi_set(problem)

    if not allow_divergence:
        rho = spectral_radius(phi_set.sync_matrix)
        if rho >= 1:
            raise UnstableInstanceError(
                f"rho(I + sum Phi_i) = {rho:.6g} >= 1, the step sizes are too large"
            )

    y = np.array(y0, dtype=np.float64)
    trajectory = Trajectory(y0=y.copy(), kind="sync")
    for k in range(1, max_iter + 1):
        y_next = sync_step(problem, phi_set, y)
        residual = vector_norm(y_next - y, p)
        trajectory.append(y_next, residual)
        y = y_next

        if not np.all(np.abs(y) <= OVERFLOW_GUARD):
            logging.warning(f"Synchronous run diverged at k={k}")
            trajectory.finalize("diverged")
            raise DivergenceError(
                f"||y||_inf exceeded {OVERFLOW_GUARD:g} at k={k}",
                trajectory=trajectory,
            )
        if residual < epsilon:
            return trajectory.finalize("converged")

    return trajectory.finalize("max_iter")
