"""Sampled and top-k KL estimators as tape expressions.

Each estimator is built literally from its defining formula so value
and gradient come out of the same expression:

    K1    = -log w
    K2    = (log w)^2 / 2
    K3    = -log w + w - 1
    K3++  = r * (-log w + w - 1)
    K4    = r * sg(-log w)
    K5    = sg(w) * log w + log r

with ``w = pi_ref(p)/pi_theta(p)`` and ``r = pi_theta(p)/sg(pi_theta(p))``
(both formed as ``exp`` of log differences).  Off-policy draws multiply
the whole expression by the clipped, stop-gradient importance weight
``s = sg(pi_theta(p)/pi_sampling(p))``.

The top-k estimators add a fully differentiable truncated exact sum
over an index set ``q`` and mask the sampled tail with the frozen
indicator ``1(p not in q)``; they are unbiased for *any* ``q``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

from . import tape as tp
from .categorical import PolicyPair, TopkIndexSet, topk_indices
from .tape import DiffScalar


class EstimatorVariant(enum.Enum):
    K1 = "k1"
    K2 = "k2"
    K3 = "k3"
    K3PP = "k3pp"
    K4 = "k4"
    K5 = "k5"
    TOPK_REV = "topk_rev"
    TOPK_FWD = "topk_fwd"


SAMPLED_VARIANTS = (
    EstimatorVariant.K1,
    EstimatorVariant.K2,
    EstimatorVariant.K3,
    EstimatorVariant.K3PP,
    EstimatorVariant.K4,
    EstimatorVariant.K5,
)


@dataclass(frozen=True)
class ClipRange:
    """Importance-weight clip bounds; ``s_min = s_max = 1`` disables correction."""

    s_min: float = 0.0
    s_max: float = math.inf

    def __post_init__(self) -> None:
        if not 0.0 <= self.s_min <= self.s_max:
            raise ValueError(f"need 0 <= s_min <= s_max, got [{self.s_min}, {self.s_max}]")

    def clip(self, s: float) -> float:
        return min(max(s, self.s_min), self.s_max)


# App B ablation: reverse-direction KL tolerates a lenient range, forward
# benefits from a tighter one.
DEFAULT_CLIP_REVERSE = ClipRange(0.0, 10.0)
DEFAULT_CLIP_FORWARD = ClipRange(0.0, 2.5)
NO_CORRECTION = ClipRange(1.0, 1.0)


@dataclass(frozen=True)
class EstimatorSample:
    """One token draw plus the tape expression of the estimator at it."""

    token: int
    expr: DiffScalar
    w: float
    s: float
    in_topk: bool | None = None


def _token_terms(pair: PolicyPair, p: int) -> tuple[DiffScalar, float, DiffScalar, DiffScalar]:
    """(log pi_theta(p) node, log pi_ref(p), w expr, r expr) for token p."""
    if pair.theta.nodes is None:
        raise ValueError("theta slot is not differentiable")
    if not 0 <= p < pair.size:
        raise ValueError(f"token {p} outside vocabulary of size {pair.size}")
    lp = pair.theta.nodes[p]
    lref = float(pair.ref.log_probs[p])
    w = tp.exp(lref - lp)
    r = tp.exp(lp - tp.sg(lp))
    return lp, lref, w, r


def importance_weight(pair: PolicyPair, p: int, clip: ClipRange) -> float:
    """Clipped s = sg(pi_theta(p)/pi_sampling(p)); exactly 1 on-policy."""
    if pair.on_policy:
        return clip.clip(1.0)
    s = math.exp(float(pair.theta.log_probs[p]) - float(pair.sampling.log_probs[p]))
    return clip.clip(s)


def sampled_kl(
    variant: EstimatorVariant,
    pair: PolicyPair,
    p: int,
    clip: ClipRange = NO_CORRECTION,
) -> EstimatorSample:
    """One of K1..K5 at token p, times the clipped importance weight."""
    lp, lref, w, r = _token_terms(pair, p)
    ell = lp - lref  # -log w, differentiable
    if variant is EstimatorVariant.K1:
        expr = ell
    elif variant is EstimatorVariant.K2:
        expr = ell * ell * 0.5
    elif variant is EstimatorVariant.K3:
        expr = ell + w - 1.0
    elif variant is EstimatorVariant.K3PP:
        expr = r * (ell + w - 1.0)
    elif variant is EstimatorVariant.K4:
        expr = r * tp.sg(ell)
    elif variant is EstimatorVariant.K5:
        expr = tp.sg(w) * (-ell) + (lp - tp.sg(lp))
    else:
        raise ValueError(f"{variant} is not a sampled estimator")
    s = importance_weight(pair, p, clip)
    if s != 1.0 or not pair.on_policy:
        expr = expr * s
    return EstimatorSample(token=p, expr=expr, w=w.value, s=s)


def truncated_reverse_sum(pair: PolicyPair, q: TopkIndexSet) -> DiffScalar:
    """sum_{j in q} pi_theta(j) (log pi_theta(j) - log pi_ref(j)), differentiable.

    Memoized per (pair, q) on the tape: group members sharing a slot
    reuse one subexpression instead of rebuilding it.
    """
    nodes = pair.theta.nodes
    if nodes is None:
        raise ValueError("theta slot is not differentiable")
    tape = nodes[0].tape
    key = (id(pair), "trunc_rev", q.indices)
    hit = tape.cache.get(key)
    if hit is not None and hit[0] is pair:
        return hit[1]
    total: DiffScalar | None = None
    for j in q.indices:
        term = tp.exp(nodes[j]) * (nodes[j] - float(pair.ref.log_probs[j]))
        total = term if total is None else total + term
    if total is None:
        total = tape.constant(0.0)
    tape.cache[key] = (pair, total)
    return total


def truncated_forward_sum(pair: PolicyPair, q: TopkIndexSet) -> DiffScalar:
    """sum_{j in q} pi_ref(j) (log pi_ref(j) - log pi_theta(j)), differentiable."""
    nodes = pair.theta.nodes
    if nodes is None:
        raise ValueError("theta slot is not differentiable")
    tape = nodes[0].tape
    key = (id(pair), "trunc_fwd", q.indices)
    hit = tape.cache.get(key)
    if hit is not None and hit[0] is pair:
        return hit[1]
    total: DiffScalar | None = None
    for j in q.indices:
        lref = float(pair.ref.log_probs[j])
        term = math.exp(lref) * (lref - nodes[j])
        total = term if total is None else total + term
    if total is None:
        total = tape.constant(0.0)
    tape.cache[key] = (pair, total)
    return total


def canonical_reverse_tail(pair: PolicyPair, p: int, clip: ClipRange) -> EstimatorSample:
    """r * (-log w): the reverse-KL sampled form without the K4 baseline.

    K4's sg(-log w) baseline is unbiased only when the score expectation
    runs over the whole vocabulary; masked to a tail set it leaves a
    gradient bias of exactly the truncated-mass gradient.  The tail
    therefore keeps -log w differentiable.  Values coincide with K4.
    """
    lp, lref, w, r = _token_terms(pair, p)
    expr = r * (lp - lref)
    s = importance_weight(pair, p, clip)
    if s != 1.0 or not pair.on_policy:
        expr = expr * s
    return EstimatorSample(token=p, expr=expr, w=w.value, s=s)


def canonical_forward_tail(pair: PolicyPair, p: int, clip: ClipRange) -> EstimatorSample:
    """sg(w) * log w: the forward-KL sampled form without the K5 baseline."""
    lp, lref, w, r = _token_terms(pair, p)
    expr = tp.sg(w) * (lref - lp)
    s = importance_weight(pair, p, clip)
    if s != 1.0 or not pair.on_policy:
        expr = expr * s
    return EstimatorSample(token=p, expr=expr, w=w.value, s=s)


def topk_reverse_kl(
    pair: PolicyPair,
    p: int,
    q: TopkIndexSet,
    clip: ClipRange = DEFAULT_CLIP_REVERSE,
) -> EstimatorSample:
    """Truncated exact reverse KL over q plus the masked sampled tail at p."""
    trunc = truncated_reverse_sum(pair, q)
    in_q = p in q
    if in_q:
        expr = trunc
        s = importance_weight(pair, p, clip)
        w = math.exp(float(pair.ref.log_probs[p]) - float(pair.theta.log_probs[p]))
    else:
        tail = canonical_reverse_tail(pair, p, clip)
        expr = trunc + tail.expr
        s, w = tail.s, tail.w
    return EstimatorSample(token=p, expr=expr, w=w, s=s, in_topk=in_q)


def topk_forward_kl(
    pair: PolicyPair,
    p: int,
    q: TopkIndexSet,
    clip: ClipRange = DEFAULT_CLIP_FORWARD,
) -> EstimatorSample:
    """Truncated exact forward KL over q plus the masked sampled tail at p."""
    trunc = truncated_forward_sum(pair, q)
    in_q = p in q
    if in_q:
        expr = trunc
        s = importance_weight(pair, p, clip)
        w = math.exp(float(pair.ref.log_probs[p]) - float(pair.theta.log_probs[p]))
    else:
        tail = canonical_forward_tail(pair, p, clip)
        expr = trunc + tail.expr
        s, w = tail.s, tail.w
    return EstimatorSample(token=p, expr=expr, w=w, s=s, in_topk=in_q)


def default_topk_set(variant: EstimatorVariant, pair: PolicyPair, k: int) -> TopkIndexSet:
    """q per the algorithm conventions: sampling policy for reverse, anchor for forward.

    Unbiasedness holds for arbitrary q; this is only the default source.
    """
    if variant is EstimatorVariant.TOPK_REV:
        return topk_indices(pair.sampling, k)
    if variant is EstimatorVariant.TOPK_FWD:
        return topk_indices(pair.ref, k)
    raise ValueError(f"{variant} has no top-k index set")


def estimate(
    variant: EstimatorVariant,
    pair: PolicyPair,
    p: int,
    k: int = 0,
    clip: ClipRange | None = None,
    q: TopkIndexSet | None = None,
) -> EstimatorSample:
    """Uniform entry point over the whole estimator zoo."""
    if variant is EstimatorVariant.TOPK_REV:
        if q is None:
            q = default_topk_set(variant, pair, k)
        return topk_reverse_kl(pair, p, q, DEFAULT_CLIP_REVERSE if clip is None else clip)
    if variant is EstimatorVariant.TOPK_FWD:
        if q is None:
            q = default_topk_set(variant, pair, k)
        return topk_forward_kl(pair, p, q, DEFAULT_CLIP_FORWARD if clip is None else clip)
    return sampled_kl(variant, pair, p, NO_CORRECTION if clip is None else clip)


# ---------------------------------------------------------------------------
# Sequence-level estimator and per-token sums.
# ---------------------------------------------------------------------------


def sequence_kl_estimator(trajectory: Sequence[int], pairs: Sequence[PolicyPair]) -> DiffScalar:
    """Loss expression -sg(KLhat_seq) * sum_n log pi_theta(y_n | h_n).

    KLhat_seq = -sum_n (log pi_theta - log pi_ref) at the sampled tokens;
    the expected gradient equals the gradient of the joint sequence KL.
    """
    if len(trajectory) != len(pairs):
        raise ValueError("trajectory and pair lists differ in length")
    if not trajectory:
        raise ValueError("empty trajectory")
    seq_lp: DiffScalar | None = None
    khat = 0.0
    for y, pair in zip(trajectory, pairs):
        lp, lref, _, _ = _token_terms(pair, y)
        seq_lp = lp if seq_lp is None else seq_lp + lp
        khat -= lp.value - lref
    return -tp.sg(khat) * seq_lp


def token_kl_sum(
    trajectory: Sequence[int],
    pairs: Sequence[PolicyPair],
    variant: EstimatorVariant,
    k: int = 0,
    clip: ClipRange | None = None,
) -> DiffScalar:
    """Sum over positions of the chosen per-token estimator."""
    if len(trajectory) != len(pairs):
        raise ValueError("trajectory and pair lists differ in length")
    if not trajectory:
        raise ValueError("empty trajectory")
    total: DiffScalar | None = None
    for y, pair in zip(trajectory, pairs):
        sample = estimate(variant, pair, int(y), k=k, clip=clip)
        total = sample.expr if total is None else total + sample.expr
    return total
