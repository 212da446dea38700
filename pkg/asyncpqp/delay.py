""" Bounded random staleness of worker contributions and switching-mode bookkeeping.

Staleness is stored as d_i = k - k_i^* in {0, ..., q-1}; d_i = 0 means the
master uses worker i's current contribution. A pmf entry j (0-based) is the
probability of staleness d = j.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from asyncpqp.exceptions import ConfigError, ModeOverflowError

PMF_TOL = 1e-12
DEFAULT_RATE = 1.2
# Largest joint outcome count materialized by the oracles
MAX_MODES = 10 ** 4


def exponential_pmf(q: int, rate: float) -> np.ndarray:
    """pmf(j) proportional to exp(-rate * j), j = 1..q, returned for d = j - 1."""
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    if not rate > 0:
        raise ValueError(f"rate must be positive, got {rate}")
    # exp(-rate * j) / sum == exp(-rate * (j - 1)) / sum, the shift avoids underflow
    weights = np.exp(-rate * np.arange(q))
    return weights / weights.sum()


def uniform_pmf(q: int) -> np.ndarray:
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    return np.full(q, 1.0 / q)


def _check_pmf(pmf: np.ndarray, what: str) -> None:
    if np.any(pmf < 0) or abs(pmf.sum() - 1.0) > PMF_TOL:
        raise ConfigError(f"{what} must be non-negative and sum to 1, got {pmf}")


@dataclass(frozen=True, eq=False)
class DelayDistribution:
    """Per-node staleness law over the window {0, ..., q-1}.

    ``kind == "iid"``: ``pmfs`` has shape (N, q).
    ``kind == "markov"``: ``transitions`` has shape (N, q, q) (row-stochastic)
    and ``initials`` shape (N, q).
    """

    q: int
    kind: str
    pmfs: Optional[np.ndarray] = None
    transitions: Optional[np.ndarray] = None
    initials: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.q < 1:
            raise ConfigError(f"q must be >= 1, got {self.q}")
        if self.kind == "iid":
            pmfs = np.atleast_2d(np.array(self.pmfs, dtype=np.float64))
            if pmfs.shape[1] != self.q:
                raise ConfigError(f"pmfs must have {self.q} columns, got {pmfs.shape}")
            for ix, pmf in enumerate(pmfs):
                _check_pmf(pmf, f"pmf of node {ix}")
            pmfs.setflags(write=False)
            object.__setattr__(self, "pmfs", pmfs)
        elif self.kind == "markov":
            transitions = np.array(self.transitions, dtype=np.float64)
            initials = np.atleast_2d(np.array(self.initials, dtype=np.float64))
            if transitions.ndim != 3 or transitions.shape[1:] != (self.q, self.q):
                raise ConfigError(
                    f"transitions must have shape (N, {self.q}, {self.q}), "
                    f"got {transitions.shape}"
                )
            if initials.shape != (transitions.shape[0], self.q):
                raise ConfigError(
                    f"initials must have shape ({transitions.shape[0]}, {self.q}), "
                    f"got {initials.shape}"
                )
            for ix, P in enumerate(transitions):
                for row in P:
                    _check_pmf(row, f"transition row of node {ix}")
                _check_pmf(initials[ix], f"initial distribution of node {ix}")
            transitions.setflags(write=False)
            initials.setflags(write=False)
            object.__setattr__(self, "transitions", transitions)
            object.__setattr__(self, "initials", initials)
        else:
            raise ConfigError(f"Unknown delay kind {self.kind!r}")

    @property
    def N(self) -> int:
        if self.kind == "iid":
            return self.pmfs.shape[0]
        return self.transitions.shape[0]

    @classmethod
    def iid(cls, pmfs) -> "DelayDistribution":
        pmfs = np.atleast_2d(np.asarray(pmfs, dtype=np.float64))
        return cls(q=pmfs.shape[1], kind="iid", pmfs=pmfs)

    @classmethod
    def identical(cls, pmf, N: int) -> "DelayDistribution":
        """Every node draws from the same pmf."""
        pmf = np.asarray(pmf, dtype=np.float64)
        return cls.iid(np.tile(pmf, (N, 1)))

    @classmethod
    def markov(cls, transitions, initials) -> "DelayDistribution":
        transitions = np.asarray(transitions, dtype=np.float64)
        return cls(
            q=transitions.shape[-1],
            kind="markov",
            transitions=transitions,
            initials=initials,
        )

    @classmethod
    def from_spec(
        cls, spec: Dict[str, object], N: int, q: Optional[int] = None
    ) -> "DelayDistribution":
        """Build from a config dictionary.

        Recognized forms::

            {"kind": "exponential", "rate": 1.2}
            {"kind": "uniform"}
            {"kind": "iid", "pmf": [...]}  or  {"kind": "iid", "pmfs": [[...], ...]}
            {"kind": "markov", "transition": [[...]], "initial": [...]}
            {"kind": "markov", "transitions": [...], "initials": [...]}
            {"kind": "markov", "rate": 1.2}   rows all equal the exponential pmf

        A "q" key or the length of a pmf must agree with the ``q`` argument
        when both are given.

        Raises:
            ConfigError: malformed spec, missing key or mismatched window length.
        """
        if not isinstance(spec, dict):
            raise ConfigError(f"Delay spec must be a JSON object, got {spec!r}")
        spec = dict(spec)
        if "q" in spec:
            spec_q = spec.pop("q")
            if q is not None and spec_q != q:
                raise ConfigError(f"Delay spec has q={spec_q}, the window length is q={q}")
            q = spec_q
        try:
            dist = cls._from_spec(spec, N, int(q or 0))
        except ConfigError:
            raise
        except KeyError as exc:
            raise ConfigError(f"Delay spec {spec} is missing key {exc}") from exc
        except (TypeError, ValueError, IndexError) as exc:
            raise ConfigError(f"Malformed delay spec {spec}: {exc}") from exc
        if q and dist.q != q:
            raise ConfigError(f"Delay law covers q={dist.q} staleness values, expected q={q}")
        return dist

    @classmethod
    def _from_spec(cls, spec: Dict[str, object], N: int, q: int) -> "DelayDistribution":
        kind = spec.pop("kind", "exponential")

        def _base_pmf():
            if "pmf" in spec:
                return np.asarray(spec["pmf"], dtype=np.float64)
            if not q:
                raise ConfigError("Delay spec needs q")
            if "rate" in spec:
                return exponential_pmf(q, float(spec["rate"]))
            return uniform_pmf(q)

        if kind == "exponential":
            spec.setdefault("rate", DEFAULT_RATE)
            return cls.identical(_base_pmf(), N)
        if kind == "uniform":
            return cls.identical(uniform_pmf(q), N)
        if kind == "iid":
            if "pmfs" in spec:
                pmfs = np.asarray(spec["pmfs"], dtype=np.float64)
                if pmfs.shape[0] != N:
                    raise ConfigError(f"pmfs must list {N} nodes, got {pmfs.shape[0]}")
                return cls.iid(pmfs)
            return cls.identical(_base_pmf(), N)
        if kind == "markov":
            if "transitions" in spec or "initials" in spec:
                missing = [key for key in ("transitions", "initials") if key not in spec]
                if missing:
                    raise ConfigError(f"Markov delay spec is missing {missing}")
                transitions = np.asarray(spec["transitions"], dtype=np.float64)
                initials = np.asarray(spec["initials"], dtype=np.float64)
            else:
                if "transition" in spec:
                    P = np.asarray(spec["transition"], dtype=np.float64)
                else:
                    # Rows equal to the iid pmf reduce the chain to iid draws
                    P = np.tile(_base_pmf(), (len(_base_pmf()), 1))
                initial = np.asarray(spec.get("initial", P[0]), dtype=np.float64)
                transitions = np.tile(P, (N, 1, 1))
                initials = np.tile(initial, (N, 1))
            if transitions.shape[0] != N:
                raise ConfigError(
                    f"transitions must list {N} nodes, got {transitions.shape[0]}"
                )
            return cls.markov(transitions, initials)
        raise ConfigError(f"Unknown delay kind {kind!r}")


@dataclass(frozen=True)
class DelaySample:
    """Staleness d_i of every node at one iteration."""

    staleness: np.ndarray

    def __post_init__(self):
        staleness = np.array(self.staleness, dtype=np.int64)
        staleness.setflags(write=False)
        object.__setattr__(self, "staleness", staleness)

    @property
    def N(self) -> int:
        return len(self.staleness)

    def __eq__(self, other):
        return isinstance(other, DelaySample) and np.array_equal(
            self.staleness, other.staleness
        )

    def __hash__(self):
        return hash(tuple(self.staleness.tolist()))


@dataclass
class SamplerState:
    """Private per-run RNG stream plus the Markov chain positions."""

    rng: np.random.Generator
    chain: Optional[np.ndarray] = None
    _cdfs: Optional[np.ndarray] = field(default=None, repr=False)


def make_sampler_state(dist: DelayDistribution, seed: int) -> SamplerState:
    """Philox4x64-10 stream keyed by ``seed``."""
    rng = np.random.Generator(np.random.Philox(seed))
    state = SamplerState(rng=rng)
    if dist.kind == "iid":
        state._cdfs = _cumulative(dist.pmfs)
    return state


def _cumulative(pmfs: np.ndarray) -> np.ndarray:
    cdfs = np.cumsum(pmfs, axis=-1)
    cdfs[..., -1] = 1.0
    return cdfs


def _draw(cdfs: np.ndarray, u: np.ndarray) -> np.ndarray:
    # Inverse-CDF draw: number of cdf entries <= u
    return (u[:, None] >= cdfs).sum(axis=1)


def sample_delays(dist: DelayDistribution, state: SamplerState, k: int) -> DelaySample:
    """Draw the staleness of every node for iteration ``k``.

    Exactly N uniforms are consumed per call, so a seed and a call sequence
    replay identically. Markov chains start from their initial distribution
    at ``k == 0`` (or on the first call) and step once per call afterwards.
    """
    u = state.rng.random(dist.N)
    if dist.kind == "iid":
        if state._cdfs is None:
            state._cdfs = _cumulative(dist.pmfs)
        return DelaySample(_draw(state._cdfs, u))

    if k == 0 or state.chain is None:
        state.chain = _draw(_cumulative(dist.initials), u)
    else:
        rows = dist.transitions[np.arange(dist.N), state.chain]
        state.chain = _draw(_cumulative(rows), u)
    return DelaySample(state.chain.copy())


def _check_mode_count(q: int, N: int, cap: Optional[int] = None) -> int:
    if q > 1 and N * np.log2(q) > 62:
        raise ModeOverflowError(f"q^N = {q}^{N} does not fit a 64-bit index")
    count = q ** N
    if cap is not None and count > cap:
        raise ModeOverflowError(
            f"{count} switching modes exceed the enumeration cap of {cap}"
        )
    return count


def mode_index(sample: DelaySample, q: int) -> int:
    """Base-q code of (d_1, ..., d_N), d_1 the least significant digit.

    Mode 0 is the all-current (synchronous) outcome.
    """
    staleness = sample.staleness
    _check_mode_count(q, len(staleness))
    if np.any(staleness < 0) or np.any(staleness >= q):
        raise ValueError(f"Staleness outside [0, {q - 1}]: {staleness}")
    index = 0
    for d in staleness[::-1]:
        index = index * q + int(d)
    return index


def decode_mode(index: int, q: int, N: int) -> DelaySample:
    count = _check_mode_count(q, N)
    if not 0 <= index < count:
        raise ValueError(f"Mode index {index} outside [0, {count - 1}]")
    staleness = []
    for _ in range(N):
        index, d = divmod(index, q)
        staleness.append(d)
    return DelaySample(np.array(staleness))


def _kron_in_mode_order(factors):
    # d_1 is the least significant digit, so node 1 is the innermost factor
    out = np.ones((1,) * factors[0].ndim)
    for factor in factors:
        out = np.kron(factor, out)
    return out


def joint_pmf(dist: DelayDistribution, cap: int = MAX_MODES) -> np.ndarray:
    """Probability of every joint outcome, indexed by mode_index."""
    if dist.kind != "iid":
        raise ValueError("joint_pmf needs an iid distribution")
    _check_mode_count(dist.q, dist.N, cap)
    return _kron_in_mode_order(list(dist.pmfs))


def joint_transition(dist: DelayDistribution, cap: int = MAX_MODES) -> np.ndarray:
    """Transition matrix of the joint chain over modes (independent nodes)."""
    if dist.kind == "iid":
        # iid draws are a chain whose rows all equal the pmf
        transitions = [np.tile(pmf, (dist.q, 1)) for pmf in dist.pmfs]
    else:
        transitions = list(dist.transitions)
    _check_mode_count(dist.q, dist.N, cap)
    return _kron_in_mode_order(transitions)


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    """Left eigenvector for eigenvalue 1 of a row-stochastic matrix, normalized."""
    eigvals, eigvecs = np.linalg.eig(np.asarray(transition).T)
    vec = np.real(eigvecs[:, np.argmin(np.abs(eigvals - 1.0))])
    return vec / vec.sum()
