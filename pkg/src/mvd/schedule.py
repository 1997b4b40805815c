"""Diffusion schedule constants and the deterministic sampling algebra.

Latents are plain numpy arrays of shape (channels, height, width); sampler
state is stored float32 while the algebra here runs in float64 so that the
noise/original inversions stay exact even at timesteps where 1 - alpha_bar
is tiny. Timesteps run t = T..1; ``alpha_bar`` has length T+1 with
``alpha_bar[0] = 1`` so the final update lands exactly on the predicted
original.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError

DEFAULT_NUM_STEPS = 150
DEFAULT_BETA_START = 8.5e-4
DEFAULT_BETA_END = 1.2e-2


@dataclass(frozen=True)
class BetaSpec:
    """How the cumulative alpha products were built."""

    kind: str = "linear"  # "linear" | "cosine"
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def validate(self) -> None:
        if self.kind not in ("linear", "cosine"):
            raise ConfigurationError(f"beta_spec.kind: unknown kind {self.kind!r}")
        if self.kind == "linear":
            if not (0.0 < self.beta_start <= self.beta_end < 1.0):
                raise ConfigurationError(
                    "beta_spec: need 0 < beta_start <= beta_end < 1, got "
                    f"beta_start={self.beta_start}, beta_end={self.beta_end}"
                )


@dataclass(frozen=True)
class Schedule:
    """Immutable sampling constants, safe to share across view workers."""

    num_steps: int
    alpha_bar: np.ndarray  # (T+1,) float64, strictly decreasing, alpha_bar[0]=1
    beta_spec: BetaSpec = field(default_factory=BetaSpec)

    def __post_init__(self) -> None:
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if self.num_steps < 1:
            raise ConfigurationError(f"num_steps: must be >= 1, got {self.num_steps}")
        if ab.shape != (self.num_steps + 1,):
            raise ConfigurationError(
                f"alpha_bar: expected length {self.num_steps + 1}, got {ab.shape}"
            )
        if ab[0] != 1.0:
            raise ConfigurationError(f"alpha_bar[0]: must be 1.0, got {ab[0]}")
        if np.any(np.diff(ab) >= 0.0):
            raise ConfigurationError("alpha_bar: must be strictly decreasing")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ConfigurationError("alpha_bar: values must lie in (0, 1]")
        ab.flags.writeable = False

    @classmethod
    def from_alpha_bar(cls, values, beta_spec: BetaSpec | None = None) -> "Schedule":
        values = np.asarray(values, dtype=np.float64)
        return cls(len(values) - 1, values, beta_spec or BetaSpec(kind="linear"))

    def check_timestep(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ContractError(f"timestep {t} outside [1, {self.num_steps}]")


def build_schedule(num_steps: int, beta_spec: BetaSpec | None = None) -> Schedule:
    """Build the cumulative alpha products for a T-step deterministic sampler."""
    if num_steps < 1:
        raise ConfigurationError(f"num_steps: must be >= 1, got {num_steps}")
    spec = beta_spec or BetaSpec()
    spec.validate()
    if spec.kind == "linear":
        betas = np.linspace(spec.beta_start, spec.beta_end, num_steps, dtype=np.float64)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:  # cosine
        s = 0.008
        t = np.arange(num_steps + 1, dtype=np.float64) / num_steps
        f = np.cos((t + s) / (1.0 + s) * math.pi / 2.0) ** 2
        alpha_bar = np.clip(f / f[0], 1e-8, 1.0)
        alpha_bar[0] = 1.0
        # clamp per-step drops so the products stay strictly decreasing
        for i in range(1, num_steps + 1):
            alpha_bar[i] = min(alpha_bar[i], alpha_bar[i - 1] * (1.0 - 1e-8))
    return Schedule(num_steps, alpha_bar, spec)


def _check_pair(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def predict_original(x_t: np.ndarray, eps: np.ndarray, t: int, s: Schedule) -> np.ndarray:
    """Recover the denoiser-implied clean signal from the latent and its noise."""
    s.check_timestep(t)
    _check_pair(x_t, eps, "predict_original")
    ab = float(s.alpha_bar[t])
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    return (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def ddim_step(x_t: np.ndarray, eps: np.ndarray, t: int, s: Schedule) -> np.ndarray:
    """One deterministic update x_t -> x_{t-1}; exact at t=1 (alpha_bar[0]=1)."""
    s.check_timestep(t)
    _check_pair(x_t, eps, "ddim_step")
    ab_prev = float(s.alpha_bar[t - 1])
    x0 = predict_original(x_t, eps, t, s)
    eps = np.asarray(eps, dtype=np.float64)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps


def noise_from_original(x_t: np.ndarray, x0: np.ndarray, t: int, s: Schedule) -> np.ndarray:
    """Invert predict_original: the noise that maps x_t onto a given clean signal."""
    s.check_timestep(t)
    _check_pair(x_t, x0, "noise_from_original")
    ab = float(s.alpha_bar[t])
    if ab >= 1.0:
        raise ContractError(f"noise_from_original: alpha_bar[{t}] = 1 divides by zero")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    return (x_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
