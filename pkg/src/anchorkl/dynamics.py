"""Lag dynamics of a policy trained against its own moving average.

Under a frozen ascent direction g and Fisher matrix F, one step of the
anchored update is affine in (theta, delta):

    theta' = theta + alpha g - alpha beta F delta
    delta' = (eta I - alpha beta F) delta + alpha g

All closed forms live in the Fisher eigenbasis, where each mode evolves
as the scalar recursion x' = chi x + alpha g with chi = eta - alpha
beta lambda.  That keeps every inverse a per-mode division and avoids
conditioning issues.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class Regime(enum.Enum):
    STABLE_MONOTONE = "stable_monotone"
    STABLE_OSCILLATORY = "stable_oscillatory"
    UNSTABLE = "unstable"


@dataclass(frozen=True)
class FisherSpec:
    """Symmetric PSD matrix given by eigenvalues and an orthonormal basis."""

    eigenvalues: np.ndarray
    basis: np.ndarray  # columns are eigenvectors

    def __post_init__(self) -> None:
        lam = np.asarray(self.eigenvalues, dtype=float)
        v = np.asarray(self.basis, dtype=float)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "basis", v)
        if lam.ndim != 1 or v.shape != (lam.size, lam.size):
            raise ValueError("basis must be d x d for d eigenvalues")
        if np.any(lam < 0.0):
            raise ValueError("Fisher eigenvalues must be nonnegative")
        if np.max(np.abs(v.T @ v - np.eye(lam.size))) > 1e-10:
            raise ValueError("basis is not orthonormal within 1e-10")

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def matrix(self) -> np.ndarray:
        return (self.basis * self.eigenvalues) @ self.basis.T

    @property
    def lambda_max(self) -> float:
        return float(np.max(self.eigenvalues)) if self.eigenvalues.size else 0.0

    def trace_bound_holds(self) -> bool:
        # lambda_max <= tr(F) for any PSD matrix; one-line sanity check.
        return self.lambda_max <= float(np.sum(self.eigenvalues)) + 1e-12

    @staticmethod
    def random(dim: int, rng: np.random.Generator, eig_range: tuple[float, float] = (1e-3, 10.0)) -> "FisherSpec":
        """Random orthogonal basis (QR of a Gaussian), log-uniform eigenvalues."""
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))  # deterministic sign convention
        lo, hi = eig_range
        lam = np.exp(rng.uniform(np.log(lo), np.log(hi), size=dim))
        return FisherSpec(lam, q)


@dataclass(frozen=True)
class DynamicsConfig:
    alpha: float
    beta: float
    eta: float
    g: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float))
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if self.beta < 0.0:
            raise ValueError("beta must be nonnegative")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError("eta must lie in [0, 1)")


@dataclass(frozen=True)
class DynamicsState:
    theta: np.ndarray
    delta: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=float))
        if self.theta.shape != self.delta.shape:
            raise ValueError("theta and delta must share a shape")


def step(state: DynamicsState, cfg: DynamicsConfig, fisher: FisherSpec) -> DynamicsState:
    """One affine update of (theta, delta)."""
    if state.theta.size != fisher.dim or cfg.g.size != fisher.dim:
        raise ValueError("dimension mismatch")
    f_delta = fisher.matrix @ state.delta
    ab = cfg.alpha * cfg.beta
    theta = state.theta + cfg.alpha * cfg.g - ab * f_delta
    delta = cfg.eta * state.delta - ab * f_delta + cfg.alpha * cfg.g
    return DynamicsState(theta, delta)


def _mode_sums(chi: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(chi^k, S_k, M_k) per mode; S_k geometric sum, M_k its partial sums.

    With eta < 1 every chi is < 1, so 1 - chi > 0 and the closed forms
    S_k = (1 - chi^k)/(1 - chi), M_k = (k - S_k)/(1 - chi) are safe.
    """
    one_minus = 1.0 - chi
    chi_k = chi**k
    s_k = (1.0 - chi_k) / one_minus
    m_k = (k - s_k) / one_minus
    return chi_k, s_k, m_k


def closed_form(k: int, cfg: DynamicsConfig, fisher: FisherSpec, init: DynamicsState) -> DynamicsState:
    """State after k steps from the block closed form, per Fisher mode."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    if init.theta.size != fisher.dim or cfg.g.size != fisher.dim:
        raise ValueError("dimension mismatch")
    v = fisher.basis
    lam = fisher.eigenvalues
    chi = cfg.eta - cfg.alpha * cfg.beta * lam
    d0 = v.T @ init.delta
    g = v.T @ cfg.g
    chi_k, s_k, m_k = _mode_sums(chi, k)
    delta_k = chi_k * d0 + cfg.alpha * s_k * g
    ab = cfg.alpha * cfg.beta
    theta_k = (v.T @ init.theta) + cfg.alpha * k * g - ab * lam * (s_k * d0 + cfg.alpha * m_k * g)
    return DynamicsState(v @ theta_k, v @ delta_k)


def mode_solution(cfg: DynamicsConfig, lam_i: float, delta0_i: float, g_i: float, k: int) -> float:
    """Scalar mode value chi^k d0 + alpha (1 - chi^k)/(1 - chi) g."""
    chi = cfg.eta - cfg.alpha * cfg.beta * lam_i
    chi_k = chi**k
    return chi_k * delta0_i + cfg.alpha * (1.0 - chi_k) / (1.0 - chi) * g_i


def classify_regime(eta: float, alpha_beta_lambda_max: float) -> Regime:
    """Three-regime split of the lag transient.

    Boundaries are closed deterministically: exactly eta counts as
    monotone, exactly 1 + eta counts as unstable.
    """
    x = alpha_beta_lambda_max
    if x < 0.0:
        raise ValueError("alpha beta lambda_max must be nonnegative")
    if x <= eta:
        return Regime.STABLE_MONOTONE
    if x < 1.0 + eta:
        return Regime.STABLE_OSCILLATORY
    return Regime.UNSTABLE


def simulated_regime(
    eta: float,
    alpha_beta_lambda: float,
    steps: int = 10_000,
    blow_up: float = 1e6,
) -> Regime:
    """Label the max-curvature mode by simulating delta' = chi delta, g = 0.

    Monotone: no sign flips.  Oscillatory: flips and the transient
    decays.  Unstable: the magnitude reaches blow_up times the initial
    value (or fails to decay while flipping, which only happens on the
    closed regime boundary).
    """
    chi = eta - alpha_beta_lambda
    delta = 1.0
    flipped = False
    for _ in range(steps):
        nxt = chi * delta
        if nxt != 0.0 and (nxt > 0.0) != (delta > 0.0):
            flipped = True
        delta = nxt
        if abs(delta) >= blow_up:
            return Regime.UNSTABLE
        if abs(delta) < 1e-12:
            break
    if not flipped:
        return Regime.STABLE_MONOTONE
    return Regime.STABLE_OSCILLATORY if abs(delta) < 1.0 else Regime.UNSTABLE


PROBE_ETAS = (0.0, 0.5, 0.9, 0.95, 0.99)
PROBE_ALPHA_BETA_LAMBDA = (0.5, 0.9, 1.2, 1.5, 1.9)


def closed_form_agreement(
    rng: np.random.Generator,
    dim_max: int = 64,
    k_max: int = 1000,
) -> tuple[int, int, float]:
    """Random instance: iterate k steps vs the closed form, relative error.

    Unstable spectra grow like rho^k; k is capped so magnitudes stay
    within float64 range, otherwise both sides overflow and the
    comparison is vacuous.
    """
    dim = int(rng.integers(1, dim_max + 1))
    fisher = FisherSpec.random(dim, rng)
    cfg = DynamicsConfig(
        alpha=float(rng.uniform(0.01, 0.2)),
        beta=float(rng.uniform(0.1, 2.0)),
        eta=float(rng.uniform(0.0, 0.99)),
        g=rng.standard_normal(dim),
    )
    state = DynamicsState(rng.standard_normal(dim), rng.standard_normal(dim))
    k = int(rng.integers(1, k_max + 1))
    rho = float(np.max(np.abs(cfg.eta - cfg.alpha * cfg.beta * fisher.eigenvalues)))
    if rho > 1.0:
        k = min(k, max(1, int(250.0 / math.log10(rho))))
    iterated = state
    for _ in range(k):
        iterated = step(iterated, cfg, fisher)
    closed = closed_form(k, cfg, fisher, state)
    scale = max(
        float(np.max(np.abs(iterated.delta))), float(np.max(np.abs(iterated.theta))), 1e-30
    )
    err = max(
        float(np.max(np.abs(iterated.delta - closed.delta))),
        float(np.max(np.abs(iterated.theta - closed.theta))),
    ) / scale
    if not math.isfinite(err):
        raise FloatingPointError(f"non-finite agreement error at dim={dim}, k={k}")
    return dim, k, err


def log_spaced_grid(n: int = 9, lo: float = 1e-3, hi: float = 4.0) -> np.ndarray:
    return np.exp(np.linspace(np.log(lo), np.log(hi), n))


def steady_state(cfg: DynamicsConfig, fisher: FisherSpec) -> tuple[np.ndarray, float, float]:
    """(delta*, quasi-steady KL, norm bound) for a stable configuration.

    delta*_i = alpha g_i / ((1 - eta) + alpha beta lambda_i)
    KL*      = (alpha^2 / 2) sum_i lambda_i g_i^2 / ((1 - eta) + alpha beta lambda_i)^2
    bound    = alpha ||g|| / (1 - eta)
    """
    if classify_regime(cfg.eta, cfg.alpha * cfg.beta * fisher.lambda_max) is Regime.UNSTABLE:
        raise ValueError("steady state undefined for an unstable configuration")
    v = fisher.basis
    lam = fisher.eigenvalues
    g = v.T @ cfg.g
    denom = (1.0 - cfg.eta) + cfg.alpha * cfg.beta * lam
    delta_star_modes = cfg.alpha * g / denom
    kl_star = 0.5 * cfg.alpha**2 * float(np.sum(lam * g**2 / denom**2))
    bound = cfg.alpha * float(np.linalg.norm(cfg.g)) / (1.0 - cfg.eta)
    return v @ delta_star_modes, kl_star, bound
