"""Diffusion mathematics: noise schedules, the closed-form forward process,
DDPM and DDIM reverse steps, guidance combination, and the masked loss.

All functions are pure given an explicit torch.Generator. Schedules are
computed once in float64 and indexed by integer timestep t in [1, T]
(alpha_bar(0) == 1 by convention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence, Tuple

import numpy as np
import torch

from .errors import ShapeError, ValidationError
from .substrate import Tensor

ScheduleKind = Literal["linear", "cosine"]
GuidanceRule = Literal["standard", "paper"]

LINEAR_BETA_START = 1e-4  # endpoints of the 1000-step linear chain
LINEAR_BETA_END = 0.02
BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-chain constants: betas, alphas, alpha-bar products, and the
    posterior variances beta_tilde_t = beta_t (1-abar_{t-1}) / (1-abar_t).

    beta_tilde_1 is 0 by that formula (abar_0 == 1); the t = 1 reverse step
    injects no noise, so the value is never consumed.
    """

    kind: str
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variances: np.ndarray

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def posterior_variance(self, t: int) -> float:
        self._check_t(t)
        return float(self.posterior_variances[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValidationError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(kind: ScheduleKind, T: int) -> NoiseSchedule:
    """Build a noise schedule.

    linear: beta runs evenly between the canonical 1000-step endpoints
    (1e-4, 0.02) rescaled by 1000/T, clipped to <= 0.999, so that the chain
    destroys signal (abar_T < 0.01) at every supported T, not only at 1000.
    cosine: abar_t = f(t)/f(0) with f(t) = cos^2(((t/T + 0.008)/1.008) * pi/2),
    betas clipped to <= 0.999, with abar recomputed from the clipped betas
    so the derived arrays stay consistent.
    """
    if T < 2:
        raise ValidationError(f"schedule needs T >= 2, got {T}")
    if kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(scale * LINEAR_BETA_START, scale * LINEAR_BETA_END, T, dtype=np.float64)
        betas = np.clip(betas, 0.0, BETA_MAX)
    elif kind == "cosine":
        s = 0.008
        ts = np.arange(T + 1, dtype=np.float64)
        f = np.cos(((ts / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 0.0, BETA_MAX)
    else:
        raise ValidationError(f"unknown schedule kind {kind!r}")

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior = betas * (1.0 - prev) / (1.0 - alpha_bars)

    sched = NoiseSchedule(kind, T, betas, alphas, alpha_bars, posterior)
    _validate_schedule(sched)
    return sched


def _validate_schedule(s: NoiseSchedule) -> None:
    if not ((s.betas > 0.0).all() and (s.betas < 1.0).all()):
        raise ValidationError("schedule betas must lie in (0, 1)")
    if not (np.diff(s.alpha_bars) < 0.0).all():
        raise ValidationError("alpha-bar must be strictly decreasing")
    if not s.alpha_bars[-1] < 0.01:
        raise ValidationError(
            f"chain does not destroy signal: abar_T = {s.alpha_bars[-1]:.4g} >= 0.01"
        )


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-chain settings for one inference run."""

    kind: Literal["ddpm", "ddim"] = "ddim"
    steps: int = 50
    eta: float = 0.0
    weight: float = 0.4
    rule: GuidanceRule = "standard"

    def validate(self, T: int) -> None:
        if self.kind not in ("ddpm", "ddim"):
            raise ValidationError(f"unknown sampler kind {self.kind!r}")
        if self.kind == "ddpm" and self.steps != T:
            raise ValidationError(f"ddpm requires steps == T ({T}), got {self.steps}")
        if self.kind == "ddim" and not 1 <= self.steps <= T:
            raise ValidationError(f"ddim steps must lie in [1, {T}], got {self.steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValidationError(f"eta must lie in [0, 1], got {self.eta}")
        if self.weight < 0.0:
            raise ValidationError(f"guidance weight must be >= 0, got {self.weight}")
        if self.rule not in ("standard", "paper"):
            raise ValidationError(f"unknown guidance rule {self.rule!r}")


def _gather(schedule_values: np.ndarray, t, like: Tensor) -> Tensor:
    """Per-sample schedule constants for integer t (scalar or (B,) tensor),
    broadcastable against `like`."""
    vals = torch.as_tensor(schedule_values, dtype=like.dtype)
    if isinstance(t, int):
        return vals[t - 1]
    t = torch.as_tensor(t, dtype=torch.long)
    out = vals[t - 1]
    return out.view(-1, *([1] * (like.dim() - 1)))


def forward_diffuse(x0: Tensor, t, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Closed-form forward process: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    `t` may be a python int or a (B,) tensor of per-sample timesteps.
    """
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    _check_t_range(t, schedule.T)
    abar = _gather(schedule.alpha_bars, t, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def predict_x0(
    x_t: Tensor, t, eps_hat: Tensor, schedule: NoiseSchedule, clip: bool = True
) -> Tensor:
    """Invert the forward process: x0_hat = (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t),
    clipped to [-1, 1] unless `clip` is False."""
    _check_t_range(t, schedule.T)
    abar = _gather(schedule.alpha_bars, t, x_t)
    x0 = (x_t - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)
    return x0.clamp(-1.0, 1.0) if clip else x0


def ddpm_step(
    x_t: Tensor,
    t: int,
    eps_hat: Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    clip_x0: bool = False,
    noise: Tensor | None = None,
) -> Tensor:
    """One ancestral reverse step x_t -> x_{t-1}.

    mean = (x_t - (beta_t / sqrt(1-abar_t)) eps_hat) / sqrt(alpha_t), plus
    sqrt(beta_tilde_t) z for t > 1 (no noise at the terminal step). With
    clip_x0 the mean is formed from the clipped x0 estimate via the
    posterior-mean identity instead. `noise` substitutes a pre-drawn z
    (batched sampling draws one per request).
    """
    _check_t_range(t, schedule.T)
    if clip_x0:
        x0 = predict_x0(x_t, t, eps_hat, schedule, clip=True)
        mean = _posterior_mean(x0, x_t, t, schedule)
    else:
        beta = schedule.beta(t)
        abar = schedule.alpha_bar(t)
        mean = (x_t - (beta / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(schedule.alpha(t))
    if t == 1:
        return mean
    z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype) if noise is None else noise
    return mean + math.sqrt(schedule.posterior_variance(t)) * z


def _posterior_mean(x0: Tensor, x_t: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
    beta = schedule.beta(t)
    abar = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t - 1)
    coef0 = math.sqrt(abar_prev) * beta / (1.0 - abar)
    coeft = math.sqrt(schedule.alpha(t)) * (1.0 - abar_prev) / (1.0 - abar)
    return coef0 * x0 + coeft * x_t


def ddim_step(
    x_t: Tensor,
    t: int,
    t_prev: int,
    eps_hat: Tensor,
    eta: float,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
    clip_x0: bool = True,
    noise: Tensor | None = None,
) -> Tensor:
    """One DDIM step x_t -> x_{t_prev} (t_prev == 0 means the final output).

    sigma = eta sqrt((1-abar_prev)/(1-abar_t)) sqrt(1 - abar_t/abar_prev);
    x = sqrt(abar_prev) x0_hat + sqrt(1-abar_prev-sigma^2) eps_hat + sigma z.
    eta = 0 is deterministic and draws nothing from the generator.
    """
    if not 0 <= t_prev < t <= schedule.T:
        raise ValidationError(f"ddim ordering violated: need 0 <= t_prev < t <= T, got {t_prev}, {t}")
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t_prev)
    x0 = predict_x0(x_t, t, eps_hat, schedule, clip=clip_x0)
    sigma = eta * math.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * math.sqrt(1.0 - abar_t / abar_prev)
    out = math.sqrt(abar_prev) * x0 + math.sqrt(max(1.0 - abar_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0.0:
        if noise is None:
            if generator is None:
                raise ValidationError("eta > 0 requires a generator")
            noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
        out = out + sigma * noise
    return out


def make_step_subsequence(T: int, S: int) -> Sequence[Tuple[int, int]]:
    """S strictly decreasing, evenly spaced timesteps paired with their
    successors; the last pair is (t_min, 0)."""
    if not 1 <= S <= T:
        raise ValidationError(f"need 1 <= S <= T, got S={S}, T={T}")
    if S == 1:
        return [(T, 0)]
    step = (T - 1) / (S - 1)
    ts = [int(math.floor(T - i * step + 0.5)) for i in range(S)]
    pairs = [(ts[i], ts[i + 1]) for i in range(S - 1)] + [(ts[-1], 0)]
    for hi, lo in pairs:
        if hi <= lo:
            raise AssertionError("subsequence not strictly decreasing")
    return pairs


def guide(p_cond: Tensor, p_uncond: Tensor, weight: float, rule: GuidanceRule) -> Tensor:
    """Combine conditional and unconditional predictions.

    paper:    O = (W+1) p_cond - p_uncond
    standard: O = (1+W) p_cond - W p_uncond
    The two coincide exactly at W = 1; standard is the identity at W = 0.
    """
    if p_cond.shape != p_uncond.shape:
        raise ShapeError(
            f"guidance shape mismatch: {tuple(p_cond.shape)} vs {tuple(p_uncond.shape)}"
        )
    if weight < 0.0:
        raise ValidationError(f"guidance weight must be >= 0, got {weight}")
    if rule == "paper":
        return (weight + 1.0) * p_cond - p_uncond
    if rule == "standard":
        return (1.0 + weight) * p_cond - weight * p_uncond
    raise ValidationError(f"unknown guidance rule {rule!r}")


def masked_mse(eps_hat: Tensor, eps: Tensor, mask: Tensor) -> Tensor:
    """Mean squared error restricted to mask pixels: sum_mask (e^-e)^2 / |mask|."""
    if eps_hat.shape != eps.shape:
        raise ShapeError(f"prediction {tuple(eps_hat.shape)} vs target {tuple(eps.shape)}")
    m = mask.to(eps_hat.dtype)
    count = m.sum()
    if count.item() == 0:
        raise ValidationError("masked_mse over an empty mask")
    return (((eps_hat - eps) ** 2) * m).sum() / count


def masked_mse_per_sample(eps_hat: Tensor, eps: Tensor, mask: Tensor) -> Tensor:
    """Per-sample masked MSE for batched (B, ...) inputs; every sample's mask
    must be nonempty."""
    if eps_hat.shape != eps.shape:
        raise ShapeError(f"prediction {tuple(eps_hat.shape)} vs target {tuple(eps.shape)}")
    b = eps_hat.shape[0]
    m = mask.to(eps_hat.dtype).reshape(b, -1)
    counts = m.sum(dim=1)
    if (counts == 0).any():
        raise ValidationError("masked_mse over an empty mask")
    sq = ((eps_hat - eps) ** 2).reshape(b, -1)
    return (sq * m).sum(dim=1) / counts


def _check_t_range(t, T: int) -> None:
    if isinstance(t, int):
        if not 1 <= t <= T:
            raise ValidationError(f"timestep {t} outside [1, {T}]")
    else:
        tt = torch.as_tensor(t)
        if tt.numel() == 0 or int(tt.min()) < 1 or int(tt.max()) > T:
            raise ValidationError(f"timesteps outside [1, {T}]")
