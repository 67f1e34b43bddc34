"""Desk-scale anchored policy-gradient training on tabular sequence tasks.

The policy is a logit table (one row per position, or per
position-and-previous-token for the Markov variant).  Each step samples
a group of N sequences from a frozen snapshot, computes group-centered
advantages with clip-higher masking, and descends the masked surrogate
plus beta times the per-token KL sum against the moving-average anchor.
The KL term goes through :func:`anchorkl.estimators.token_kl_sum`
verbatim, so the training loop exercises the same expressions the
audits certify.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import estimators as est
from .categorical import PolicyPair, log_softmax, log_softmax_nodes, pair_from_parts
from .estimators import ClipRange, EstimatorVariant
from .rng import stream
from .tape import DiffScalar, Tape


@dataclass(frozen=True)
class TaskSpec:
    """Deterministic bounded reward over fixed-length token sequences."""

    vocab: int
    length: int
    reward: Callable[[Sequence[int]], float]
    name: str = "task"


def target_token_task(vocab: int, length: int, target: int = 0) -> TaskSpec:
    """R(y) = fraction of positions equal to the target token.

    Enumerable, smooth improvement signal; a uniform policy scores 1/V
    in expectation.
    """

    def reward(tokens: Sequence[int]) -> float:
        return sum(1 for t in tokens if t == target) / len(tokens)

    return TaskSpec(vocab=vocab, length=length, reward=reward, name=f"target_token_{target}")


@dataclass
class PolicyParams:
    """Per-position logit table; Markov variant keys rows by the previous token."""

    tables: np.ndarray  # (L, V) or (L, V, V)
    markov: bool = False

    def __post_init__(self) -> None:
        self.tables = np.asarray(self.tables, dtype=float)
        want = 3 if self.markov else 2
        if self.tables.ndim != want:
            raise ValueError(f"expected a {want}-D logit table")
        if not np.all(np.isfinite(self.tables)):
            raise ValueError("logits must be finite")

    @property
    def length(self) -> int:
        return int(self.tables.shape[0])

    @property
    def vocab(self) -> int:
        return int(self.tables.shape[-1])

    def row(self, position: int, prev_token: int) -> np.ndarray:
        if self.markov:
            return self.tables[position, prev_token if position else 0]
        return self.tables[position]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.tables.copy(), self.markov)

    @staticmethod
    def zeros(task: TaskSpec, markov: bool = False) -> "PolicyParams":
        shape = (task.length, task.vocab, task.vocab) if markov else (task.length, task.vocab)
        return PolicyParams(np.zeros(shape), markov)


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 64
    lr: float = 0.05
    beta: float = 0.001
    eta: float = 0.9
    t_ema: int = 10
    inner_epochs: int = 1
    estimator: EstimatorVariant = EstimatorVariant.TOPK_REV
    k: int = 8
    clip: ClipRange | None = None
    eps_high: float = 0.28
    eps_low: float = 0.2
    optimizer: str = "adam"  # "adam" or "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 500
    seed: int = 0
    std_floor: float = 1e-6

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group size must be at least 2")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.eps_high < 0.0 or self.eps_low < 0.0:
            raise ValueError("clip-higher epsilons must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainMetrics:
    steps: list[int] = field(default_factory=list)
    mean_reward: list[float] = field(default_factory=list)
    kl_value: list[float] = field(default_factory=list)
    lag_norm: list[float] = field(default_factory=list)
    adv_std: list[float] = field(default_factory=list)
    clip_rate: list[float] = field(default_factory=list)

    def append(self, step: int, reward: float, kl: float, lag: float, std: float, clip: float) -> None:
        self.steps.append(step)
        self.mean_reward.append(reward)
        self.kl_value.append(kl)
        self.lag_norm.append(lag)
        self.adv_std.append(std)
        self.clip_rate.append(clip)


@dataclass
class RolloutBatch:
    tokens: np.ndarray  # (N, L) int
    rewards: np.ndarray  # (N,)
    old_log_probs: np.ndarray  # (N, L) log pi_old at the sampled tokens
    old_params: PolicyParams  # frozen snapshot used for sampling


def _row_log_softmax(row: np.ndarray) -> np.ndarray:
    z = row - np.max(row)
    return z - np.log(np.sum(np.exp(z)))


def rollout(params: PolicyParams, task: TaskSpec, n: int, rng: np.random.Generator) -> RolloutBatch:
    """Sample N sequences position-wise from a frozen copy of the policy."""
    old = params.copy()
    uniforms = rng.random((n, task.length))
    tokens = np.zeros((n, task.length), dtype=int)
    old_lp = np.zeros((n, task.length))
    if not old.markov:
        cums = [np.cumsum(np.exp(_row_log_softmax(old.row(pos, 0)))) for pos in range(task.length)]
        lps = [_row_log_softmax(old.row(pos, 0)) for pos in range(task.length)]
        for pos in range(task.length):
            tokens[:, pos] = np.searchsorted(cums[pos], uniforms[:, pos], side="right")
            old_lp[:, pos] = lps[pos][tokens[:, pos]]
    else:
        for i in range(n):
            prev = 0
            for pos in range(task.length):
                lp = _row_log_softmax(old.row(pos, prev))
                t = int(np.searchsorted(np.cumsum(np.exp(lp)), uniforms[i, pos], side="right"))
                tokens[i, pos] = t
                old_lp[i, pos] = lp[t]
                prev = t
    rewards = np.array([task.reward(list(row)) for row in tokens])
    return RolloutBatch(tokens=tokens, rewards=rewards, old_log_probs=old_lp, old_params=old)


def grpo_advantages(rewards: np.ndarray) -> tuple[np.ndarray, float]:
    """Group-centered advantages and the N-1 sample standard deviation."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("need at least 2 rewards")
    adv = r - float(np.mean(r))
    std = float(np.sqrt(np.sum(adv**2) / (r.size - 1)))
    return adv, std


def clip_mask(advantage: float, s: float, eps_high: float, eps_low: float) -> int:
    """Clip-higher mask: drop upweighted moves past 1+eps_high and
    downweighted moves past 1-eps_low; advantage 0 is never masked."""
    if s < 0.0:
        raise ValueError("importance weight must be nonnegative")
    if advantage > 0.0 and s > 1.0 + eps_high:
        return 0
    if advantage < 0.0 and s < 1.0 - eps_low:
        return 0
    return 1


class _SlotCache:
    """Per-step tape slots: one parameter row, log-softmax, and policy
    pair per (pos, ctx), shared across all group members."""

    def __init__(self, tape: Tape, params: PolicyParams, ema: PolicyParams, old: PolicyParams):
        self.tape = tape
        self.params = params
        self.ema = ema
        self.old = old
        self._leaves: dict[tuple[int, int], list[DiffScalar]] = {}
        self._pairs: dict[tuple[int, int], PolicyPair] = {}

    def pair(self, pos: int, ctx: int) -> PolicyPair:
        key = (pos, ctx if self.params.markov else 0)
        if key not in self._pairs:
            leaves = self.tape.parameters(self.params.row(pos, ctx))
            nodes = log_softmax_nodes(leaves)
            self._leaves[key] = leaves
            self._pairs[key] = pair_from_parts(
                leaves,
                nodes,
                _row_log_softmax(self.ema.row(pos, ctx)),
                sampling_log_probs=_row_log_softmax(self.old.row(pos, ctx)),
            )
        return self._pairs[key]

    def scatter_grad(self, grads: dict[int, float]) -> np.ndarray:
        """Map node-indexed gradients back onto the logit table."""
        out = np.zeros_like(self.params.tables)
        for (pos, ctx), leaves in self._leaves.items():
            for j, leaf in enumerate(leaves):
                g = grads.get(leaf.index, 0.0)
                if self.params.markov:
                    out[pos, ctx, j] = g
                else:
                    out[pos, j] = g
        return out

    def all_leaves(self) -> list[DiffScalar]:
        return [leaf for leaves in self._leaves.values() for leaf in leaves]


def build_step_loss(
    params: PolicyParams,
    ema_params: PolicyParams,
    batch: RolloutBatch,
    cfg: TrainConfig,
) -> tuple[DiffScalar, _SlotCache, dict[str, float]]:
    """Group loss -J + beta * mean token KL sum, on a fresh tape.

    The KL anchors on the EMA table; the sampling slot is the rollout
    snapshot, so importance weights and the top-k sets follow it.
    """
    n, length = batch.tokens.shape
    tape = Tape()
    cache = _SlotCache(tape, params, ema_params, batch.old_params)
    adv, std = grpo_advantages(batch.rewards)
    denom = max(std, cfg.std_floor)
    clip = cfg.clip
    if clip is None:
        clip = (
            est.DEFAULT_CLIP_FORWARD
            if cfg.estimator is EstimatorVariant.TOPK_FWD
            else est.DEFAULT_CLIP_REVERSE
        )

    surrogate: DiffScalar | None = None
    kl_total: DiffScalar | None = None
    masked = 0
    for i in range(n):
        traj = [int(t) for t in batch.tokens[i]]
        pairs = [cache.pair(pos, traj[pos - 1] if pos else 0) for pos in range(length)]
        for pos in range(length):
            node = pairs[pos].theta.nodes[traj[pos]]
            s = math.exp(node.value - batch.old_log_probs[i, pos])
            m = clip_mask(float(adv[i]), s, cfg.eps_high, cfg.eps_low)
            masked += 1 - m
            if m:
                term = node * (s * float(adv[i]))
                surrogate = term if surrogate is None else surrogate + term
        kl_i = est.token_kl_sum(traj, pairs, cfg.estimator, k=cfg.k, clip=clip)
        kl_total = kl_i if kl_total is None else kl_total + kl_i

    scale = 1.0 / (n * length * denom)
    if surrogate is None:
        surrogate = tape.constant(0.0)
    loss = surrogate * (-scale) + kl_total * (cfg.beta / n)
    stats = {
        "adv_std": std,
        "clip_rate": masked / (n * length),
        "kl_value": kl_total.value / n,
    }
    return loss, cache, stats


class AdamState:
    def __init__(self, shape: tuple[int, ...]):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def update(self, grad: np.ndarray, cfg: TrainConfig) -> np.ndarray:
        self.t += 1
        self.m = cfg.adam_beta1 * self.m + (1.0 - cfg.adam_beta1) * grad
        self.v = cfg.adam_beta2 * self.v + (1.0 - cfg.adam_beta2) * grad**2
        m_hat = self.m / (1.0 - cfg.adam_beta1**self.t)
        v_hat = self.v / (1.0 - cfg.adam_beta2**self.t)
        return cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def train_step(
    params: PolicyParams,
    ema_params: PolicyParams,
    batch: RolloutBatch,
    cfg: TrainConfig,
    opt_state: AdamState | None = None,
) -> dict[str, float]:
    """Run the inner-epoch updates in place; EMA scheduling happens in train()."""
    stats: dict[str, float] = {}
    for _ in range(cfg.inner_epochs):
        loss, cache, stats = build_step_loss(params, ema_params, batch, cfg)
        if not math.isfinite(loss.value):
            raise RuntimeError(f"non-finite loss {loss.value}; stats={stats}")
        leaves = cache.all_leaves()
        flat = loss.tape.backward(loss, leaves)
        grads = {leaf.index: g for leaf, g in zip(leaves, flat)}
        table_grad = cache.scatter_grad(grads)
        if cfg.optimizer == "adam":
            assert opt_state is not None
            params.tables -= opt_state.update(table_grad, cfg)
        else:
            params.tables -= cfg.lr * table_grad
    return stats


def train(task: TaskSpec, cfg: TrainConfig, markov: bool = False) -> tuple[PolicyParams, TrainMetrics]:
    """Full training run; deterministic per (task, cfg)."""
    params = PolicyParams.zeros(task, markov)
    ema_params = params.copy()
    opt_state = AdamState(params.tables.shape) if cfg.optimizer == "adam" else None
    metrics = TrainMetrics()
    for step_idx in range(1, cfg.steps + 1):
        rng = stream(cfg.seed, step_idx, "rollout")
        batch = rollout(params, task, cfg.group_size, rng)
        stats = train_step(params, ema_params, batch, cfg, opt_state)
        if step_idx % cfg.t_ema == 0:
            ema_params.tables = cfg.eta * ema_params.tables + (1.0 - cfg.eta) * params.tables
        lag = float(np.linalg.norm(params.tables - ema_params.tables))
        metrics.append(
            step_idx,
            float(np.mean(batch.rewards)),
            stats["kl_value"],
            lag,
            stats["adv_std"],
            stats["clip_rate"],
        )
    return params, metrics


def exact_slot_kl(params: PolicyParams, ref: PolicyParams) -> np.ndarray:
    """Exact reverse KL per context-free slot (diagnostic for regularized runs)."""
    if params.markov or ref.markov:
        raise ValueError("slot KL diagnostic is for the context-free table")
    out = np.zeros(params.length)
    for pos in range(params.length):
        lp = _row_log_softmax(params.row(pos, 0))
        lref = _row_log_softmax(ref.row(pos, 0))
        out[pos] = float(np.sum(np.exp(lp) * (lp - lref)))
    return out
