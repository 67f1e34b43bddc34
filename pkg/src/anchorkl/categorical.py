"""Categorical policies over one vocabulary slot.

A slot is a single next-token distribution: logits, stable log-softmax,
inverse-CDF sampling, top-k index selection, and the exact divergences
(with analytic gradients) that every sampled estimator is audited
against.  Ratios are always formed as ``exp(log difference)`` so that
nothing underflows at vocabulary sizes in the tens of thousands.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tape as tp
from .tape import DiffScalar, Tape


class KLDirection(enum.Enum):
    REVERSE = "reverse"  # KL(pi_theta || pi_ref), expectation under pi_theta
    FORWARD = "forward"  # KL(pi_ref || pi_theta), expectation under pi_ref


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax (max-subtraction); shift-invariant."""
    z = np.asarray(logits, dtype=float)
    if z.ndim != 1 or z.size < 2:
        raise ValueError("logits must be a 1-D array with at least 2 entries")
    if not np.all(np.isfinite(z)):
        raise tp.TapeDomainError("log_softmax: non-finite logit")
    m = float(np.max(z))
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted)))


def log_softmax_nodes(logit_nodes: Sequence[DiffScalar]) -> list[DiffScalar]:
    """Log-softmax built on the tape over logit leaves.

    The max shift uses the plain float value (an exact identity for any
    constant shift), so node count stays linear in V.
    """
    if len(logit_nodes) < 2:
        raise ValueError("need at least 2 logits")
    vals = [n.value for n in logit_nodes]
    if not all(np.isfinite(v) for v in vals):
        raise tp.TapeDomainError("log_softmax: non-finite logit")
    m = max(vals)
    exps = [tp.exp(n - m) for n in logit_nodes]
    total = exps[0]
    for e in exps[1:]:
        total = total + e
    lse = tp.log(total) + m
    return [n - lse for n in logit_nodes]


@dataclass(frozen=True)
class ProbSlot:
    """Per-index log-probabilities; ``nodes`` present iff differentiable."""

    log_probs: np.ndarray
    nodes: tuple[DiffScalar, ...] | None = None

    def __post_init__(self) -> None:
        lp = np.asarray(self.log_probs, dtype=float)
        object.__setattr__(self, "log_probs", lp)
        if not np.all(np.isfinite(lp)):
            raise ValueError("log-probabilities must be finite (all probabilities positive)")
        total = float(np.sum(np.exp(lp)))
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {total}, not 1")

    @property
    def size(self) -> int:
        return int(self.log_probs.size)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def frozen(self) -> "ProbSlot":
        return ProbSlot(self.log_probs.copy()) if self.nodes is not None else self


@dataclass(frozen=True)
class PolicyPair:
    """(current, reference, sampling) policies sharing one vocabulary slot.

    ``theta`` carries tape nodes so estimator expressions differentiate
    through it; ``ref`` and ``sampling`` are constants.  When no
    sampling policy is given it is a frozen value-copy of ``theta`` and
    the importance weight is identically 1.
    """

    theta: ProbSlot
    ref: ProbSlot
    sampling: ProbSlot
    params: tuple[DiffScalar, ...]
    on_policy: bool

    def __post_init__(self) -> None:
        if not (self.theta.size == self.ref.size == self.sampling.size):
            raise ValueError("policy slots must share one vocabulary size")

    @property
    def size(self) -> int:
        return self.theta.size


def pair_from_parts(
    params: Sequence[DiffScalar],
    nodes: Sequence[DiffScalar],
    ref_log_probs: np.ndarray,
    sampling_log_probs: np.ndarray | None = None,
) -> PolicyPair:
    """Build a pair around already-constructed theta log-prob nodes."""
    theta = ProbSlot(np.array([n.value for n in nodes]), nodes=tuple(nodes))
    ref = ProbSlot(np.asarray(ref_log_probs, dtype=float))
    if sampling_log_probs is None:
        sampling = theta.frozen()
        on_policy = True
    else:
        sampling = ProbSlot(np.asarray(sampling_log_probs, dtype=float))
        on_policy = False
    return PolicyPair(theta=theta, ref=ref, sampling=sampling, params=tuple(params), on_policy=on_policy)


def make_pair(
    tape: Tape,
    theta_logits: np.ndarray,
    ref_logits: np.ndarray,
    sampling_logits: np.ndarray | None = None,
) -> PolicyPair:
    """Register theta logits as tape parameters and build the slot triple."""
    params = tuple(tape.parameters(np.asarray(theta_logits, dtype=float)))
    nodes = tuple(log_softmax_nodes(params))
    sampling_lp = None
    if sampling_logits is not None:
        sampling_lp = log_softmax(np.asarray(sampling_logits, dtype=float))
    return pair_from_parts(params, nodes, log_softmax(np.asarray(ref_logits, dtype=float)), sampling_lp)


def sample(probs: ProbSlot, rng: np.random.Generator) -> int:
    """Inverse-CDF draw over cumulative probabilities in index order."""
    cum = np.cumsum(probs.probs)
    u = rng.random()
    return int(np.searchsorted(cum, u, side="right"))


@dataclass(frozen=True)
class TopkIndexSet:
    """Ordered set of distinct vocabulary indices, |q| = k."""

    indices: tuple[int, ...]
    vocab_size: int
    members: frozenset[int] = field(init=False)

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate indices in top-k set")
        if idx and (min(idx) < 0 or max(idx) >= self.vocab_size):
            raise ValueError("index outside vocabulary")
        object.__setattr__(self, "indices", tuple(sorted(idx)))
        object.__setattr__(self, "members", frozenset(idx))

    def __contains__(self, token: int) -> bool:
        return int(token) in self.members

    def __len__(self) -> int:
        return len(self.indices)


def topk_indices(probs: ProbSlot, k: int) -> TopkIndexSet:
    """The k most probable indices; ties broken toward the smaller index."""
    if not 0 <= k <= probs.size:
        raise ValueError(f"k={k} outside [0, {probs.size}]")
    order = np.argsort(-probs.log_probs, kind="stable")
    return TopkIndexSet(tuple(int(i) for i in order[:k]), probs.size)


# ---------------------------------------------------------------------------
# Exact divergences and their analytic gradients (the oracle side).
# ---------------------------------------------------------------------------

Generator = Callable[[float], float]  # duck-typed: fdiv.FGenerator also accepted


def _ratio_terms(pair: PolicyPair) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = pair.theta.probs
    lp = pair.theta.log_probs
    lref = pair.ref.log_probs
    return p, lp, lref


def exact_divergence(pair: PolicyPair, gen) -> float:
    """Full-vocabulary sum: KL in either direction, or sum_j Q_j f(P_j/Q_j)."""
    p, lp, lref = _ratio_terms(pair)
    if gen is KLDirection.REVERSE:
        return float(np.sum(p * (lp - lref)))
    if gen is KLDirection.FORWARD:
        q = np.exp(lref)
        return float(np.sum(q * (lref - lp)))
    t = np.exp(lp - lref)  # P/Q, formed in log space
    q = np.exp(lref)
    return float(np.sum(q * np.array([gen.f(ti) for ti in t])))


def exact_divergence_grad(pair: PolicyPair, gen) -> np.ndarray:
    """Analytic gradient w.r.t. theta logits by full-vocabulary summation.

    Score form: d/dz_a sum_j Q_j f(P_j/Q_j) = P_a (f'(t_a) - sum_j P_j f'(t_j)).
    """
    p, lp, lref = _ratio_terms(pair)
    if gen is KLDirection.REVERSE:
        ell = lp - lref
        kl = float(np.sum(p * ell))
        return p * (ell - kl)
    if gen is KLDirection.FORWARD:
        return p - np.exp(lref)
    t = np.exp(lp - lref)
    fp = np.array([gen.f_prime(ti) for ti in t])
    return p * (fp - float(np.sum(p * fp)))


def exact_divergence_expr(pair: PolicyPair, gen) -> DiffScalar:
    """The same full-vocabulary sum built on the tape (independent cross-check)."""
    nodes = pair.theta.nodes
    if nodes is None:
        raise ValueError("theta slot is not differentiable")
    lref = pair.ref.log_probs
    if gen is KLDirection.REVERSE:
        total = None
        for j, n in enumerate(nodes):
            term = tp.exp(n) * (n - float(lref[j]))
            total = term if total is None else total + term
        return total
    if gen is KLDirection.FORWARD:
        total = None
        for j, n in enumerate(nodes):
            term = float(np.exp(lref[j])) * (float(lref[j]) - n)
            total = term if total is None else total + term
        return total
    total = None
    for j, n in enumerate(nodes):
        t_j = tp.exp(n - float(lref[j]))
        term = float(np.exp(lref[j])) * gen.f(t_j)
        total = term if total is None else total + term
    return total
