""" Asynchronous dual update with randomly delayed worker contributions.

The master combines the q most recent dual iterates,

    y^{k+1} = sum_j R_1j^k y^{k-j+1} + B,

where worker i's Phi_i lands in block j = d_i + 1 and block 1 also carries I.
The stabilizing gate only executes an update when sum_j ||R_1j||_p < 1 and
otherwise holds y^{k+1} = y^k.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from asyncpqp.delay import (
    DelayDistribution,
    DelaySample,
    make_sampler_state,
    sample_delays,
)
from asyncpqp.exceptions import DivergenceError, StallError
from asyncpqp.problem import PhiSet, SeparableQpProblem, compute_phi_set
from asyncpqp.stability import parse_norm, stacked_p_norms, step_condition_value
from asyncpqp.sync import OVERFLOW_GUARD, vector_norm
from asyncpqp.trajectory import Trajectory

HOLD_POLICIES = ("decay", "freeze")


@dataclass
class HistoryBuffer:
    """The q most recent iterates, newest first: [y^k, y^{k-1}, ..., y^{k-q+1}]."""

    window: np.ndarray
    k: int = 0

    @classmethod
    def prefilled(cls, y0: np.ndarray, q: int) -> "HistoryBuffer":
        """Every slot holds y^0, so no iterate older than y^0 is ever referenced."""
        y0 = np.asarray(y0, dtype=np.float64)
        return cls(window=np.tile(y0, (q, 1)))

    @property
    def q(self) -> int:
        return self.window.shape[0]

    @property
    def newest(self) -> np.ndarray:
        return self.window[0]

    def push(self, y: np.ndarray) -> None:
        """Insert y^{k+1}, discarding the oldest entry."""
        self.window[1:] = self.window[:-1]
        self.window[0] = y
        self.k += 1

    def stacked(self) -> np.ndarray:
        """Augmented state Y^k as one (q*m,) vector."""
        return self.window.reshape(-1).copy()


@dataclass(frozen=True, eq=False)
class RBlockSet:
    """R_11 .. R_1q of one asynchronous update, shape (q, m, m)."""

    r_blocks: np.ndarray
    delays: DelaySample

    @property
    def q(self) -> int:
        return self.r_blocks.shape[0]


@dataclass
class GateState:
    """Masking index and hold bookkeeping of the stabilizing gate.

    zeta starts at 1 so the loop cannot terminate before a first update.
    """

    epsilon: float
    max_consecutive_holds: int
    zeta: int = 1
    holds: int = 0
    consecutive_holds: int = 0
    condition: float = np.nan

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_consecutive_holds < 1:
            raise ValueError(
                f"max_consecutive_holds must be positive, got {self.max_consecutive_holds}"
            )


def assemble_r_blocks(phi_set: PhiSet, sample: DelaySample, q: int) -> RBlockSet:
    """Place each Phi_i in block d_i + 1; block 1 also gets the identity."""
    staleness = sample.staleness
    if len(staleness) != phi_set.N:
        raise ValueError(f"Sample has {len(staleness)} nodes, expected {phi_set.N}")
    if np.any(staleness < 0) or np.any(staleness >= q):
        raise ValueError(f"Staleness outside [0, {q - 1}]: {staleness}")

    N, m = phi_set.N, phi_set.m
    selector = np.zeros((q, N))
    selector[staleness, np.arange(N)] = 1.0
    r_blocks = (selector @ phi_set.phis.reshape(N, m * m)).reshape(q, m, m)
    r_blocks[0] += np.eye(m)
    return RBlockSet(r_blocks, sample)


def async_step(buffer: HistoryBuffer, rset: RBlockSet, bias: np.ndarray) -> np.ndarray:
    """sum_j R_1j y^{k-j+1} + B"""
    if buffer.q != rset.q:
        raise ValueError(f"Buffer holds {buffer.q} iterates, R-blocks expect {rset.q}")
    return np.einsum("jab,jb->a", rset.r_blocks, buffer.window) + bias


def gated_step(
    buffer: HistoryBuffer,
    rset: RBlockSet,
    bias: np.ndarray,
    gate: GateState,
    p=2,
) -> Tuple[np.ndarray, bool]:
    """One pass of the stabilizing gate.

    Returns:
        The next iterate and whether it was an executed update (False for a hold).

    Raises:
        StallError: more than ``gate.max_consecutive_holds`` holds in a row.
    """
    gate.condition = step_condition_value(rset, p)
    if gate.condition < 1:
        gate.zeta = 0
        gate.consecutive_holds = 0
        return async_step(buffer, rset, bias), True

    gate.zeta = 1
    gate.holds += 1
    gate.consecutive_holds += 1
    if gate.consecutive_holds > gate.max_consecutive_holds:
        raise StallError(
            f"Gate held {gate.consecutive_holds} consecutive steps "
            f"(last condition value {gate.condition:.6g})"
        )
    return buffer.newest.copy(), False


def build_w_matrix(rset: RBlockSet) -> np.ndarray:
    """Companion matrix W: top block row [R_11 .. R_1q], identities below the diagonal.

    Y^{k+1} = W Y^k + C with C = [B; 0; ...; 0].
    """
    q, m, _ = rset.r_blocks.shape
    W = np.zeros((q * m, q * m))
    W[:m, :] = np.hstack(list(rset.r_blocks))
    W[m:, : (q - 1) * m] = np.eye((q - 1) * m)
    return W


def replay_conditions(phi_set: PhiSet, delays: np.ndarray, q: int, p=2) -> np.ndarray:
    """Gate condition of every logged delay sample, recomputed offline."""
    return np.array(
        [
            step_condition_value(assemble_r_blocks(phi_set, DelaySample(row), q), p)
            for row in delays
        ]
    )


def _effective_sample(sample, frozen, consecutive_holds, hold_policy):
    if consecutive_holds == 0:
        return sample
    if hold_policy == "freeze":
        return frozen
    # Data keeps arriving while the master waits: one slot fresher per held step
    return DelaySample(np.maximum(sample.staleness - consecutive_holds, 0))


def run_async(
    problem: SeparableQpProblem,
    dist: DelayDistribution,
    y0: np.ndarray,
    epsilon: float,
    max_iter: int,
    gate_enabled: bool = True,
    p=2,
    seed: int = 0,
    hold_policy: str = "decay",
    max_consecutive_holds: Optional[int] = None,
    record_delays: bool = True,
    phi_set: Optional[PhiSet] = None,
) -> Trajectory:
    """Asynchronous dual ascent, optionally under the stabilizing gate.

    Loops until ||y^{k+1} - y^k||_p < epsilon with zeta == 0, or max_iter steps.

    Args:
        problem: The QP instance.
        dist: Delay law; its node count must match the problem.
        y0: Initial dual vector, also used to pre-fill the history buffer.
        epsilon: Termination tolerance.
        max_iter: Maximum number of steps.
        gate_enabled: Hold updates that fail sum_j ||R_1j||_p < 1.
        p: Norm for the gate condition and the residual.
        seed: Seed of the run's private delay stream.
        hold_policy: "decay" lowers every node's staleness by one per
            consecutive held step (floor 0); "freeze" re-checks the sample
            that triggered the hold.
        max_consecutive_holds: Stall guard, defaults to 10 * q.
        record_delays: Keep the per-step delay samples on the trajectory.
        phi_set: Precomputed Phi_i / B.

    Raises:
        StallError: the gate held too long; partial trajectory attached.
        DivergenceError: ||y||_inf exceeded the overflow guard; partial
            trajectory attached.
    """
    if dist.N != problem.N:
        raise ValueError(f"Delay law covers {dist.N} nodes, problem has {problem.N}")
    if hold_policy not in HOLD_POLICIES:
        raise ValueError(f"hold_policy must be one of {HOLD_POLICIES}, got {hold_policy!r}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be positive, got {max_iter}")
    p = parse_norm(p)
    if phi_set is None:
        phi_set = compute_phi_set(problem)

    q = dist.q
    gate = GateState(
        epsilon=epsilon,
        max_consecutive_holds=10 * q if max_consecutive_holds is None else max_consecutive_holds,
    )
    state = make_sampler_state(dist, seed)
    buffer = HistoryBuffer.prefilled(y0, q)
    trajectory = Trajectory(y0=buffer.newest.copy(), kind="async", seed=seed)
    delay_dtype = np.min_scalar_type(q - 1)

    frozen = None
    for k in range(max_iter):
        sample = sample_delays(dist, state, k)
        if gate_enabled:
            sample = _effective_sample(sample, frozen, gate.consecutive_holds, hold_policy)
        rset = assemble_r_blocks(phi_set, sample, q)

        if gate_enabled:
            try:
                y_next, updated = gated_step(buffer, rset, phi_set.bias, gate, p)
            except StallError as exc:
                logging.warning(f"Run with seed {seed} stalled at k={k + 1}: {exc}")
                trajectory.finalize("stalled")
                raise StallError(str(exc), trajectory=trajectory) from exc
            if updated:
                frozen = None
            elif frozen is None:
                frozen = sample
        else:
            gate.condition = float(stacked_p_norms(rset.r_blocks, p).sum())
            gate.zeta = 0
            y_next, updated = async_step(buffer, rset, phi_set.bias), True

        residual = vector_norm(y_next - buffer.newest, p)
        buffer.push(y_next)
        trajectory.append(
            y_next,
            residual,
            condition=gate.condition,
            zeta=gate.zeta,
            updated=updated,
            delays=sample.staleness.astype(delay_dtype) if record_delays else None,
        )

        if not np.all(np.abs(y_next) <= OVERFLOW_GUARD):
            logging.warning(f"Run with seed {seed} diverged at k={k + 1}")
            trajectory.finalize("diverged")
            raise DivergenceError(
                f"||y||_inf exceeded {OVERFLOW_GUARD:g} at k={k + 1}",
                trajectory=trajectory,
            )
        if residual < epsilon and gate.zeta == 0:
            return trajectory.finalize("converged")

    return trajectory.finalize("max_iter")
