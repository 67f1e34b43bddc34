"""f-divergence generators and everything built on them.

The catalog keys generators by the divergence direction they produce
with the current policy as first argument and the reference as second:
``rkl`` is ``f(t) = t log t`` (giving KL(theta, ref)) and ``fkl`` is
``f(t) = -log t`` (giving KL(ref, theta)).  The policy-gradient weight
tables elsewhere swap those two labels; here phi/psi are always derived
from the generator's own ``f``, which keeps every identity internally
consistent.

Provided on top of the catalog:
  * the generic sampled estimator ``r * g_f(w)`` and its top-k variant,
  * REINFORCE weights ``phi_f(w) = f'(1/w)`` / ``psi_f(w) = f(w) - w f'(w)``,
  * optimal policies under f-divergence regularization (bisection on the
    normalizer) and reward transformations between divergences,
  * the group-based policy-gradient losses each sampled KL estimator
    induces (L1, L2, L3, L3++, L4, L5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tape as tp
from .categorical import PolicyPair, ProbSlot, TopkIndexSet
from .estimators import ClipRange, EstimatorSample, NO_CORRECTION, importance_weight
from .tape import DiffScalar, Real

LOG2 = math.log(2.0)


class SolverError(RuntimeError):
    """Normalizer bracketing/bisection failed for an optimal-policy solve."""


@dataclass(frozen=True)
class FGenerator:
    """Convex f with f(1)=0 plus the callables derived from it.

    ``f`` is polymorphic over tape scalars and floats.  ``sampled_form``
    is the simplified sampling expression (the estimator column), kept
    separate from ``g`` purely for numerical form; tests assert they
    agree.  ``inv_domain`` is the open s-interval where ``f_prime_inv``
    is defined and lands in t > 0.
    """

    name: str
    f: Callable[[Real], Real]
    f_prime: Callable[[float], float]
    f_prime_inv: Callable[[float], float] | None
    inv_domain: tuple[float, float]
    sampled_form: Callable[[Real, Real, Real], Real]  # (r, w, ell=-log w) -> expr
    alpha: float | None = None

    def g(self, w: Real) -> Real:
        """Sampling form g_f(w) = w f(1/w): E_p[g_f(w(p))] = D_f."""
        return w * self.f(1.0 / w)

    def phi(self, w: float) -> float:
        """REINFORCE weight for minimizing D_f(pi_theta, pi_star)."""
        return self.f_prime(1.0 / w)

    def psi(self, w: float) -> float:
        """REINFORCE weight for minimizing D_f(pi_star, pi_theta)."""
        return self.f(w) - w * self.f_prime(w)

    def conjugate(self) -> "FGenerator":
        """Generator f*(t) = t f(1/t), so D_f(Q, P) = D_{f*}(P, Q)."""

        def fstar(t: Real) -> Real:
            return t * self.f(1.0 / t)

        def fstar_prime(t: float) -> float:
            return self.f(1.0 / t) - self.f_prime(1.0 / t) / t

        return FGenerator(
            name=f"{self.name}*",
            f=fstar,
            f_prime=fstar_prime,
            f_prime_inv=None,
            inv_domain=(-math.inf, math.inf),
            sampled_form=self.sampled_form,
            alpha=self.alpha,
        )


def _alpha_generator(alpha: float) -> FGenerator:
    if alpha in (-1.0, 0.0, 1.0):
        raise ValueError(f"alpha-divergence parameter must avoid -1, 0, 1; got {alpha}")
    a = float(alpha)
    norm = a * (a - 1.0)

    def f(t: Real) -> Real:
        return (t**a - 1.0 - a * (t - 1.0)) / norm

    def f_prime(t: float) -> float:
        return (t ** (a - 1.0) - 1.0) / (a - 1.0)

    def f_prime_inv(s: float) -> float:
        return (1.0 + (a - 1.0) * s) ** (1.0 / (a - 1.0))

    # 1 + (a-1) s > 0 delimits both the inverse's domain and t > 0.
    if a > 1.0:
        dom = (-1.0 / (a - 1.0), math.inf)
    else:
        dom = (-math.inf, 1.0 / (1.0 - a))

    def sampled(r: Real, w: Real, ell: Real) -> Real:
        return r * ((w ** (1.0 - a) + (a - 1.0) * w - a) / norm)

    return FGenerator("alpha", f, f_prime, f_prime_inv, dom, sampled, alpha=a)


def _build_catalog() -> dict[str, FGenerator]:
    inf = math.inf
    cat: dict[str, FGenerator] = {}

    cat["fkl"] = FGenerator(
        name="fkl",
        f=lambda t: -tp.log(t),
        f_prime=lambda t: -1.0 / t,
        f_prime_inv=lambda s: -1.0 / s,
        inv_domain=(-inf, 0.0),
        sampled_form=lambda r, w, ell: tp.sg(w) * (-ell),
    )
    cat["rkl"] = FGenerator(
        name="rkl",
        f=lambda t: t * tp.log(t),
        f_prime=lambda t: math.log(t) + 1.0,
        f_prime_inv=lambda s: math.exp(s - 1.0),
        inv_domain=(-inf, inf),
        sampled_form=lambda r, w, ell: r * ell,
    )
    cat["pearson"] = FGenerator(
        name="pearson",
        f=lambda t: (t - 1.0) * (t - 1.0),
        f_prime=lambda t: 2.0 * (t - 1.0),
        f_prime_inv=lambda s: 1.0 + 0.5 * s,
        inv_domain=(-2.0, inf),
        sampled_form=lambda r, w, ell: r * ((1.0 - w) * (1.0 - w) / w),
    )
    cat["neyman"] = FGenerator(
        name="neyman",
        f=lambda t: (t - 1.0) * (t - 1.0) / t,
        f_prime=lambda t: 1.0 - 1.0 / (t * t),
        f_prime_inv=lambda s: 1.0 / math.sqrt(1.0 - s),
        inv_domain=(-inf, 1.0),
        sampled_form=lambda r, w, ell: r * ((1.0 - w) * (1.0 - w)),
    )
    cat["hellinger"] = FGenerator(
        name="hellinger",
        f=lambda t: 0.5 * (tp.sqrt(t) - 1.0) * (tp.sqrt(t) - 1.0),
        f_prime=lambda t: 0.5 - 0.5 / math.sqrt(t),
        f_prime_inv=lambda s: 1.0 / ((1.0 - 2.0 * s) * (1.0 - 2.0 * s)),
        inv_domain=(-inf, 0.5),
        sampled_form=lambda r, w, ell: r * (0.5 * (1.0 - tp.sqrt(w)) * (1.0 - tp.sqrt(w))),
    )
    cat["js"] = FGenerator(
        name="js",
        f=lambda t: 0.5 * (t * tp.log(t) - (t + 1.0) * tp.log((t + 1.0) / 2.0)),
        f_prime=lambda t: 0.5 * math.log(2.0 * t / (t + 1.0)),
        f_prime_inv=lambda s: math.exp(2.0 * s) / (2.0 - math.exp(2.0 * s)),
        inv_domain=(-inf, 0.5 * LOG2),
        sampled_form=lambda r, w, ell: r
        * (0.5 * (ell - (1.0 + w) * (tp.log(1.0 + w) - LOG2 + ell))),
    )
    cat["tv"] = FGenerator(
        name="tv",
        f=lambda t: 0.5 * tp.absval(t - 1.0),
        f_prime=lambda t: 0.5 * tp.sign_value(t - 1.0),
        f_prime_inv=None,
        inv_domain=(-inf, inf),
        sampled_form=lambda r, w, ell: r * (0.5 * tp.absval(1.0 - w)),
    )
    return cat


_CATALOG = _build_catalog()

CATALOG_NAMES = ("fkl", "rkl", "pearson", "neyman", "hellinger", "js", "tv", "alpha")
DEFAULT_ALPHA = 3.0  # generic non-KL member for audits; avoids the excluded -1, 0, 1


def catalog(name: str, alpha: float = DEFAULT_ALPHA) -> FGenerator:
    """Named generator; alpha applies only to the alpha-divergence."""
    key = name.lower()
    if key == "alpha":
        return _alpha_generator(alpha)
    try:
        return _CATALOG[key]
    except KeyError:
        raise ValueError(f"unknown f-divergence generator {name!r}") from None


def all_generators(alpha: float = DEFAULT_ALPHA) -> list[FGenerator]:
    return [catalog(n, alpha) for n in CATALOG_NAMES]


# ---------------------------------------------------------------------------
# Sampled and top-k estimators for any generator.
# ---------------------------------------------------------------------------


def sampled_fdiv(
    gen: FGenerator,
    pair: PolicyPair,
    p: int,
    clip: ClipRange = NO_CORRECTION,
) -> EstimatorSample:
    """Estimator r(p) * g_f(w(p)) at the sampled token, times the clipped IW."""
    if pair.theta.nodes is None:
        raise ValueError("theta slot is not differentiable")
    lp = pair.theta.nodes[p]
    lref = float(pair.ref.log_probs[p])
    ell = lp - lref
    w = tp.exp(lref - lp)
    r = tp.exp(lp - tp.sg(lp))
    expr = gen.sampled_form(r, w, ell)
    s = importance_weight(pair, p, clip)
    if s != 1.0 or not pair.on_policy:
        expr = expr * s
    return EstimatorSample(token=p, expr=expr, w=w.value, s=s)


def topk_fdiv(
    gen: FGenerator,
    pair: PolicyPair,
    p: int,
    q: TopkIndexSet,
    clip: ClipRange = NO_CORRECTION,
) -> EstimatorSample:
    """Truncated exact sum over q plus the masked sampled tail; unbiased for any q."""
    nodes = pair.theta.nodes
    if nodes is None:
        raise ValueError("theta slot is not differentiable")
    trunc: DiffScalar | None = None
    for j in q.indices:
        lref_j = float(pair.ref.log_probs[j])
        t_j = tp.exp(nodes[j] - lref_j)
        term = math.exp(lref_j) * gen.f(t_j)
        trunc = term if trunc is None else trunc + term
    if trunc is None:
        trunc = nodes[0].tape.constant(0.0)
    in_q = p in q
    if in_q:
        s = importance_weight(pair, p, clip)
        w = math.exp(float(pair.ref.log_probs[p]) - float(pair.theta.log_probs[p]))
        return EstimatorSample(token=p, expr=trunc, w=w, s=s, in_topk=True)
    tail = sampled_fdiv(gen, pair, p, clip)
    return EstimatorSample(
        token=p, expr=trunc + tail.expr, w=tail.w, s=tail.s, in_topk=False
    )


def pg_weight(gen: FGenerator, w: float, direction: str) -> float:
    """REINFORCE weight: phi_f(w) toward the target, psi_f(w) from it.

    ``theta-to-star`` minimizes D_f(pi_theta, pi*); ``star-to-theta``
    minimizes D_f(pi*, pi_theta).  ``w = pi*(y)/pi_theta(y)``.
    """
    if w <= 0.0:
        raise ValueError("w must be positive")
    if direction == "theta-to-star":
        return gen.phi(w)
    if direction == "star-to-theta":
        return gen.psi(w)
    raise ValueError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# Optimal policies under f-divergence regularization (App-style KKT form).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimalPolicySolution:
    lam: float
    policy: ProbSlot
    residual: float


def _lambda_domain(gen: FGenerator, rewards: np.ndarray, beta: float) -> tuple[float, float]:
    s_lo, s_hi = gen.inv_domain
    lo = -math.inf if math.isinf(s_hi) else float(np.max(rewards)) - beta * s_hi
    hi = math.inf if math.isinf(s_lo) else float(np.min(rewards)) - beta * s_lo
    return lo, hi


def _residual(gen: FGenerator, rewards: np.ndarray, ref: np.ndarray, beta: float, lam: float) -> float:
    inv = gen.f_prime_inv
    return float(sum(ref[j] * inv((rewards[j] - lam) / beta) for j in range(rewards.size))) - 1.0


def optimal_policy(
    gen: FGenerator,
    rewards: Sequence[float],
    ref: ProbSlot,
    beta: float,
    tol: float = 1e-12,
    max_iter: int = 200,
) -> OptimalPolicySolution:
    """pi*(y) = ref(y) (f')^{-1}((R(y) - lambda)/beta), lambda from bisection.

    The normalization residual is strictly decreasing in lambda, so the
    root is bracketed by geometric expansion inside the admissible
    lambda interval and then bisected.
    """
    if gen.f_prime_inv is None:
        raise ValueError(f"{gen.name} has no invertible f'; optimal policy unsupported")
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    r = np.asarray(rewards, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    lo, hi = _lambda_domain(gen, r, beta)
    if not lo < hi:
        raise tp.TapeDomainError(
            f"{gen.name}: rewards leave no admissible normalizer range ({lo} >= {hi})"
        )

    def rho(lam: float) -> float:
        return _residual(gen, r, ref.probs, beta, lam)

    # Seed strictly inside the domain on the beta scale.
    if math.isfinite(lo) and math.isfinite(hi):
        a = b = 0.5 * (lo + hi)
    elif math.isfinite(lo):
        a = b = lo + max(beta, 1e-9 * (1.0 + abs(lo)))
    elif math.isfinite(hi):
        a = b = hi - max(beta, 1e-9 * (1.0 + abs(hi)))
    else:
        a = b = float(np.max(r))

    step = beta
    it = 0
    while rho(a) <= 0.0:  # need a point with residual > 0: walk left
        it += 1
        if it > max_iter:
            raise SolverError(f"{gen.name}: no bracket below after {max_iter} expansions")
        a = (a + lo) / 2.0 if math.isfinite(lo) else a - step
        step *= 2.0
    step = beta
    it = 0
    while rho(b) >= 0.0:  # need a point with residual < 0: walk right
        it += 1
        if it > max_iter:
            raise SolverError(f"{gen.name}: no bracket above after {max_iter} expansions")
        b = (b + hi) / 2.0 if math.isfinite(hi) else b + step
        step *= 2.0

    last_rho_a, last_rho_b = rho(a), rho(b)
    if not (last_rho_a > 0.0 > last_rho_b):
        raise SolverError(f"{gen.name}: residual not monotone across bracket")
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        if rho(mid) > 0.0:
            a = mid
        else:
            b = mid
        if b - a <= tol * max(1.0, abs(a), abs(b)):
            break
    lam = 0.5 * (a + b)
    residual = rho(lam)
    entries = ref.probs * np.array([gen.f_prime_inv((rj - lam) / beta) for rj in r])
    total = float(np.sum(entries))
    if total <= 0.0:
        raise SolverError(f"{gen.name}: nonpositive policy mass at solved normalizer")
    policy = ProbSlot(np.log(entries / total))
    return OptimalPolicySolution(lam=lam, policy=policy, residual=residual)


def reward_transform(
    from_gen: FGenerator,
    rewards: Sequence[float],
    ref: ProbSlot,
    beta: float,
) -> np.ndarray:
    """Rewards whose reverse-KL optimum equals from_gen's optimum under ``rewards``.

    R~ = beta * log((f')^{-1}((R - lambda)/beta)); the free additive
    constant is fixed to 0 (reverse-KL normalization absorbs it).
    """
    sol = optimal_policy(from_gen, rewards, ref, beta)
    r = np.asarray(rewards, dtype=float)
    vals = np.array([from_gen.f_prime_inv((rj - sol.lam) / beta) for rj in r])
    if np.any(vals <= 0.0):
        raise tp.TapeDomainError(f"{from_gen.name}: transform hit a nonpositive policy ratio")
    return beta * np.log(vals)


def reward_transform_to_forward_kl(
    rewards: Sequence[float],
    ref: ProbSlot,
    beta: float,
) -> np.ndarray:
    """Inverse direction: rewards for the forward-KL objective matching the
    reverse-KL optimum under ``rewards``.

    R_f = Z* - beta Z exp(-R/beta) with the free constant Z* fixed to 0;
    Z is the reverse-KL partition function of ``rewards``.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size != ref.size:
        raise ValueError("rewards must cover the reference support")
    scaled = r / beta
    m = float(np.max(scaled))
    z = float(np.sum(ref.probs * np.exp(scaled - m))) * math.exp(m)
    return -beta * z * np.exp(-scaled)


# ---------------------------------------------------------------------------
# Policy-gradient losses induced by the sampled KL estimators (group form).
# ---------------------------------------------------------------------------

PG_VARIANTS = ("L1", "L2", "L3", "L3PP", "L4", "L5")


def _group_terms(pair: PolicyPair, tokens: Sequence[int], rewards: Sequence[float]):
    if len(tokens) != len(rewards):
        raise ValueError("tokens and rewards differ in length")
    n = len(tokens)
    if n < 2:
        raise ValueError("need a group of at least 2 rollouts")
    if pair.theta.nodes is None:
        raise ValueError("theta slot is not differentiable")
    lps = [pair.theta.nodes[int(t)] for t in tokens]
    lrefs = [float(pair.ref.log_probs[int(t)]) for t in tokens]
    rs = [float(x) for x in rewards]
    # E-step partition estimate: Z ~ (1/N) sum_j sg(pi_ref/pi_theta) exp R.
    log_z = math.log(
        sum(math.exp(rs[j] - (lps[j].value - lrefs[j])) for j in range(n)) / n
    )
    return n, lps, lrefs, rs, log_z


def pg_loss(
    variant: str,
    pair: PolicyPair,
    tokens: Sequence[int],
    rewards: Sequence[float],
) -> DiffScalar:
    """Group loss on the tape for one Table-2 policy-gradient variant.

    All variants share the target ratio log w = log pi_ref + R - log
    pi_theta - log Z with the group E-step estimate of Z held constant.
    """
    n, lps, lrefs, rs, log_z = _group_terms(pair, tokens, rewards)
    terms: list[DiffScalar] = []
    for i in range(n):
        lp = lps[i]
        neg_log_w = lp - (lrefs[i] + rs[i] - log_z)  # -log w_i, differentiable
        w = tp.exp(-neg_log_w)
        log_r = lp - tp.sg(lp)
        if variant == "L1":
            term = -(rs[i] - log_z) * log_r
        elif variant == "L2":
            term = neg_log_w * neg_log_w * 0.5
        elif variant == "L4":
            term = tp.exp(log_r) * tp.sg(neg_log_w)
        elif variant == "L5":
            term = -tp.sg(w) * log_r
        elif variant == "L3":
            term = -(rs[i] - log_z) * log_r + w
        elif variant == "L3PP":
            term = -(rs[i] - log_z) * log_r + tp.exp(log_r) * tp.sg(neg_log_w)
        else:
            raise ValueError(f"unknown policy-gradient variant {variant!r}")
        terms.append(term)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / n)


def pg_loss_gradient(
    variant: str,
    pair: PolicyPair,
    tokens: Sequence[int],
    rewards: Sequence[float],
) -> np.ndarray:
    """Gradient of the group loss w.r.t. the theta logits."""
    expr = pg_loss(variant, pair, tokens, rewards)
    return expr.tape.backward(expr, pair.params)
