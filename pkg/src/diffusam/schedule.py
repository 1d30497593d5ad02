"""Noise schedule, forward noising and the few-step x0 sampler.

Timesteps are 1-based throughout: ``t`` runs over 1..T and
``alpha_bar(t)`` is the cumulative product up to and including step t.
The denoiser predicts the clean sample directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import math

import numpy as np
import torch

from .errors import NonFiniteError

# denoiser(x_t, t, z_img, label) -> predicted clean memory embedding
Denoiser = Callable[[torch.Tensor, int, torch.Tensor, Union[int, torch.Tensor]], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "constant"

    def ab(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bar[t - 1])

    def ab_prev(self, t: int) -> float:
        """alpha_bar(t - 1) with alpha_bar(0) = 1."""
        return 1.0 if t == 1 else self.ab(t - 1)

    def ab_tensor(self, t: torch.Tensor) -> torch.Tensor:
        if int(t.min()) < 1 or int(t.max()) > self.T:
            raise ValueError(f"timesteps outside [1, {self.T}]")
        return torch.from_numpy(self.alpha_bar)[t.long() - 1]


def make_schedule(T: int = 1000, beta_const: float = 0.008, kind: str = "constant", beta_end: Optional[float] = None) -> NoiseSchedule:
    """Constant-beta schedule by default; ``kind="linear"`` ramps to ``beta_end``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_const < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta_const}")
    if kind == "constant":
        beta = np.full(T, float(beta_const))
    elif kind == "linear":
        end = 0.02 if beta_end is None else beta_end
        if not 0.0 < end < 1.0:
            raise ValueError(f"beta_end must lie in (0, 1), got {end}")
        beta = np.linspace(beta_const, end, T)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, kind=kind)


def add_noise(x0: torch.Tensor, t: Union[int, torch.Tensor], eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Sample of q(x_t | x0) for given noise: sqrt(ab) * x0 + sqrt(1 - ab) * eps.

    ``t`` may be an int or a tensor of per-sample timesteps for batched x0.
    """
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != sample shape {tuple(x0.shape)}")
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        ab = sched.ab_tensor(t).to(x0.dtype).view(-1, *([1] * (x0.dim() - 1)))
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    ab = sched.ab(int(t))
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class SamplerConfig:
    k_steps: int = 2
    timestep_selection: str = "even"
    stochastic: bool = False

    def __post_init__(self):
        if self.k_steps < 1:
            raise ValueError("k_steps must be >= 1")
        if self.timestep_selection != "even":
            raise ValueError(f"unknown timestep selection rule {self.timestep_selection!r}")


def select_timesteps(cfg: SamplerConfig, sched: NoiseSchedule) -> list[int]:
    """Evenly spaced, strictly descending, starting at T."""
    k, T = cfg.k_steps, sched.T
    if k > T:
        raise ValueError(f"k_steps={k} exceeds T={T}")
    steps = [int(round(T * (k - j) / k)) for j in range(k)]
    if any(a <= b for a, b in zip(steps, steps[1:])) or steps[-1] < 1:
        raise ValueError(f"degenerate timestep selection {steps}")
    return steps


def _memory_shape(denoiser, z_img: torch.Tensor, shape: Optional[Sequence[int]]) -> tuple:
    if shape is None:
        shape = getattr(denoiser, "memory_shape", None)
    if shape is None:
        raise ValueError("memory shape unknown: pass shape= or give the denoiser a memory_shape")
    shape = tuple(shape)
    if z_img.dim() == 4:
        shape = (z_img.shape[0],) + shape
    return shape


def _checked(pred: torch.Tensor, t: int) -> torch.Tensor:
    if not torch.all(torch.isfinite(pred)):
        raise NonFiniteError(f"denoiser produced non-finite output at t={t}")
    return pred


@torch.no_grad()
def sample(
    denoiser: Denoiser,
    z_img: torch.Tensor,
    label: Union[int, torch.Tensor],
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    seed: int,
    shape: Optional[Sequence[int]] = None,
) -> torch.Tensor:
    """Truncated sampler: start from pure noise, predict x0 at each selected step.

    Between steps the sample is moved to the next timestep along the
    deterministic DDIM path implied by the x0 prediction, or with fresh noise
    when ``cfg.stochastic``. The last step returns the x0 prediction itself.
    """
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(_memory_shape(denoiser, z_img, shape), generator=gen)
    steps = select_timesteps(cfg, sched)
    for j, t in enumerate(steps):
        x0_hat = _checked(denoiser(x, t, z_img, label), t)
        if j == len(steps) - 1:
            return x0_hat
        t_next = steps[j + 1]
        ab, ab_next = sched.ab(t), sched.ab(t_next)
        if cfg.stochastic:
            eps = torch.randn(x.shape, generator=gen)
        else:
            eps = (x - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)
        x = math.sqrt(ab_next) * x0_hat + math.sqrt(1.0 - ab_next) * eps
    raise AssertionError("unreachable")


@torch.no_grad()
def posterior_sample_full(
    denoiser: Denoiser,
    z_img: torch.Tensor,
    label: Union[int, torch.Tensor],
    sched: NoiseSchedule,
    seed: int,
    shape: Optional[Sequence[int]] = None,
) -> torch.Tensor:
    """Full T-step ancestral sampling through q(x_{t-1} | x_t, x0_hat)."""
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(_memory_shape(denoiser, z_img, shape), generator=gen)
    for t in range(sched.T, 0, -1):
        x0_hat = _checked(denoiser(x, t, z_img, label), t)
        if t == 1:
            # alpha_bar(0) = 1: the posterior collapses onto the prediction
            return x0_hat
        ab, ab_prev = sched.ab(t), sched.ab_prev(t)
        beta = float(sched.beta[t - 1])
        alpha = float(sched.alpha[t - 1])
        coef_x0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
        coef_xt = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
        var = beta * (1.0 - ab_prev) / (1.0 - ab)
        x = coef_x0 * x0_hat + coef_xt * x + math.sqrt(var) * torch.randn(x.shape, generator=gen)
    raise AssertionError("unreachable")
