""" Separable quadratic programs, their per-block dual quantities and instance generators.

A problem is

    minimize    sum_i 1/2 x_i^T Q_i x_i + c_i^T x_i
    subject to  sum_i A_i x_i <= b

and its dual ascent is driven by Phi_i = -alpha_i A_i Q_i^{-1} A_i^T and the
bias B = sum_i (-alpha_i A_i Q_i^{-1} c_i - alpha_i b / N).
"""

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg

from asyncpqp.exceptions import (
    ExportError,
    SingularAggregateError,
    SingularBlockError,
)

SYMMETRY_TOL = 1e-10
# Relative eigenvalue floor under which sum(Phi_i) is treated as singular
SINGULAR_RTOL = 1e-12


def _frozen(array, ndim):
    array = np.array(array, dtype=np.float64)
    if array.ndim != ndim:
        raise ValueError(f"Expected a {ndim}-d array, got shape {array.shape}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Block:
    """One worker's share of the problem: Q_i, A_i, c_i and step size alpha_i.

    Q_i is factorized once at construction; a failed Cholesky factorization
    raises SingularBlockError.
    """

    Q: np.ndarray
    A: np.ndarray
    c: np.ndarray
    alpha: float
    _cho: tuple = field(init=False, repr=False)

    def __post_init__(self):
        Q = _frozen(self.Q, 2)
        A = _frozen(self.A, 2)
        c = _frozen(self.c, 1)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "alpha", float(self.alpha))

        n = Q.shape[0]
        if Q.shape != (n, n):
            raise ValueError(f"Q must be square, got shape {Q.shape}")
        if A.shape[1] != n or c.shape[0] != n:
            raise ValueError(
                f"Inconsistent block dimensions: Q {Q.shape}, A {A.shape}, c {c.shape}"
            )
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if np.max(np.abs(Q - Q.T)) > SYMMETRY_TOL:
            raise ValueError("Q is not symmetric")
        try:
            cho = scipy.linalg.cho_factor(Q)
        except np.linalg.LinAlgError as exc:
            raise SingularBlockError(
                f"Cholesky factorization of Q failed: {exc}"
            ) from exc
        object.__setattr__(self, "_cho", cho)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply Q_i^{-1} through its Cholesky factor."""
        return scipy.linalg.cho_solve(self._cho, rhs)


@dataclass(frozen=True, eq=False)
class SeparableQpProblem:
    """N blocks coupled through the shared constraint vector b."""

    blocks: Sequence[Block]
    b: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        blocks = tuple(self.blocks)
        b = _frozen(self.b, 1)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "b", b)

        if len(blocks) < 1:
            raise ValueError("A problem needs at least one block")
        for ix, block in enumerate(blocks):
            if block.m != b.shape[0]:
                raise ValueError(
                    f"Block {ix} has {block.m} constraint rows, expected {b.shape[0]}"
                )

    @property
    def N(self) -> int:
        return len(self.blocks)

    @property
    def m(self) -> int:
        return self.b.shape[0]

    @property
    def alphas(self) -> np.ndarray:
        return np.array([block.alpha for block in self.blocks])

    def with_alpha(self, alpha: float) -> "SeparableQpProblem":
        """Copy of the problem with every step size set to ``alpha``."""
        blocks = [Block(bl.Q, bl.A, bl.c, alpha) for bl in self.blocks]
        return SeparableQpProblem(blocks, self.b, seed=self.seed)

    def homogeneous(self) -> "SeparableQpProblem":
        """Copy with c_i = 0 and b = 0, whose fixed point is the origin."""
        blocks = [
            Block(bl.Q, bl.A, np.zeros(bl.n), bl.alpha) for bl in self.blocks
        ]
        return SeparableQpProblem(blocks, np.zeros(self.m), seed=self.seed)

    def to_dict(self) -> Dict[str, object]:
        return {
            "N": self.N,
            "m": self.m,
            "seed": self.seed,
            "blocks": [
                {
                    "Q": bl.Q.tolist(),
                    "A": bl.A.tolist(),
                    "c": bl.c.tolist(),
                    "alpha": bl.alpha,
                }
                for bl in self.blocks
            ],
            "b": self.b.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "SeparableQpProblem":
        blocks = [
            Block(bl["Q"], bl["A"], bl["c"], bl["alpha"]) for bl in data["blocks"]
        ]
        problem = cls(blocks, data["b"], seed=data.get("seed"))
        if "N" in data and data["N"] != problem.N:
            raise ValueError(f"N={data['N']} does not match {problem.N} blocks")
        if "m" in data and data["m"] != problem.m:
            raise ValueError(f"m={data['m']} does not match len(b)={problem.m}")
        return problem


@dataclass(frozen=True, eq=False)
class PhiSet:
    """Stacked Phi_i matrices (N x m x m) and the bias vector B."""

    phis: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "phis", _frozen(self.phis, 3))
        object.__setattr__(self, "bias", _frozen(self.bias, 1))

    @property
    def N(self) -> int:
        return self.phis.shape[0]

    @property
    def m(self) -> int:
        return self.phis.shape[1]

    @cached_property
    def aggregate(self) -> np.ndarray:
        """sum_i Phi_i"""
        return self.phis.sum(axis=0)

    @cached_property
    def sync_matrix(self) -> np.ndarray:
        """R_s = I + sum_i Phi_i, the synchronous iteration matrix."""
        return np.eye(self.m) + self.aggregate


def compute_phi(block: Block) -> np.ndarray:
    """Phi_i = -alpha_i A_i Q_i^{-1} A_i^T, symmetrized."""
    phi = -block.alpha * block.A @ block.solve(block.A.T)
    return 0.5 * (phi + phi.T)


def compute_bias(problem: SeparableQpProblem) -> np.ndarray:
    """B = sum_i (-alpha_i A_i Q_i^{-1} c_i - alpha_i b / N)."""
    bias = np.zeros(problem.m)
    for block in problem.blocks:
        bias -= block.alpha * block.A @ block.solve(block.c)
        bias -= block.alpha * problem.b / problem.N
    return bias


def compute_phi_set(problem: SeparableQpProblem) -> PhiSet:
    phis = np.stack([compute_phi(block) for block in problem.blocks])
    return PhiSet(phis, compute_bias(problem))


def dual_curvature(problem: SeparableQpProblem) -> np.ndarray:
    """G = sum_i A_i Q_i^{-1} A_i^T, so that sum(Phi_i) = -alpha G for a common alpha."""
    G = np.zeros((problem.m, problem.m))
    for block in problem.blocks:
        G += block.A @ block.solve(block.A.T)
    return 0.5 * (G + G.T)


def primal_from_dual(block: Block, y: np.ndarray) -> np.ndarray:
    """Block minimizer of the Lagrangian at fixed y: x_i = -Q_i^{-1}(A_i^T y + c_i)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (block.m,):
        raise ValueError(f"y must have shape ({block.m},), got {y.shape}")
    return -block.solve(block.A.T @ y + block.c)


def primal_solution(problem: SeparableQpProblem, y: np.ndarray) -> List[np.ndarray]:
    return [primal_from_dual(block, y) for block in problem.blocks]


def constraint_residual(
    problem: SeparableQpProblem, xs: Sequence[np.ndarray]
) -> np.ndarray:
    """sum_i A_i x_i - b"""
    return sum(bl.A @ x for bl, x in zip(problem.blocks, xs)) - problem.b


def sync_fixed_point(
    problem: SeparableQpProblem, phi_set: Optional[PhiSet] = None
) -> np.ndarray:
    """Stationary dual point y* = -(sum Phi_i)^{-1} B.

    Raises:
        SingularAggregateError: when sum(Phi_i) is numerically singular.
    """
    if phi_set is None:
        phi_set = compute_phi_set(problem)

    # -sum(Phi_i) is symmetric positive semidefinite by construction
    neg = -phi_set.aggregate
    eigs = np.linalg.eigvalsh(neg)
    if eigs.max() <= 0 or eigs.min() <= SINGULAR_RTOL * eigs.max():
        raise SingularAggregateError(
            f"sum(Phi_i) is singular (eigenvalues of -sum(Phi_i): {eigs}); "
            "the coupling matrix is rank deficient"
        )
    return scipy.linalg.solve(neg, phi_set.bias, assume_a="pos")


def _spd_matrix(rng: np.random.Generator, n: int, conditioning: float) -> np.ndarray:
    M = rng.uniform(-1.0, 1.0, size=(n, n))
    MtM = M.T @ M
    eigs = np.linalg.eigvalsh(MtM)
    mu_min, mu_max = eigs[0], eigs[-1]
    if conditioning == 1.0:
        Q = max(mu_max, 1.0) * np.eye(n)
    else:
        # smallest shift with (mu_max + delta) / (mu_min + delta) <= conditioning
        delta = max((mu_max - conditioning * mu_min) / (conditioning - 1.0), 0.0)
        Q = MtM + delta * np.eye(n)
    return 0.5 * (Q + Q.T)


def generate_random_problem(
    seed: int,
    N: int,
    n: int,
    m: int,
    alpha: float,
    conditioning: float = 10.0,
) -> SeparableQpProblem:
    """Random instance with entries drawn uniform(-1, 1).

    Q_i = M^T M + delta I with delta chosen so cond(Q_i) <= conditioning; the
    shared b is scaled by N, standing in for the sum of per-block b_i.
    Draws come from a Philox generator, so a seed reproduces the problem
    bit-for-bit.
    """
    for name, value in (("N", N), ("n", n), ("m", m)):
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if not conditioning >= 1.0:
        raise ValueError(f"conditioning must be >= 1, got {conditioning}")

    rng = np.random.Generator(np.random.Philox(seed))
    blocks = []
    for _ in range(N):
        Q = _spd_matrix(rng, n, float(conditioning))
        A = rng.uniform(-1.0, 1.0, size=(m, n))
        c = rng.uniform(-1.0, 1.0, size=n)
        blocks.append(Block(Q, A, c, alpha))
    b = N * rng.uniform(-1.0, 1.0, size=m)

    return SeparableQpProblem(blocks, b, seed=seed)


def save_problem(problem: SeparableQpProblem, path) -> None:
    try:
        with open(path, "w") as f:
            json.dump(problem.to_dict(), f)
    except OSError as exc:
        raise ExportError(f"Could not write problem to {path}: {exc}") from exc


def load_problem(path) -> SeparableQpProblem:
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as exc:
        raise ExportError(f"Could not read problem from {path}: {exc}") from exc
    return SeparableQpProblem.from_dict(data)
