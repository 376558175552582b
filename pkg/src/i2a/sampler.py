"""Reverse diffusion sampling with classifier-free and adversarial guidance.

The update rule is the variance-exploding step

    z_{t-1} = z_t + (s_t^2 - s_{t-1}^2) * e + sqrt(s_{t-1}^2 (s_t^2 - s_{t-1}^2) / s_t^2) * zeta_t

where ``e`` is a guided score estimate assembled from three denoiser
evaluations. Everything here is a pure function of its inputs, so gradients
with respect to the guidance factors flow through the whole chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
from torch import Tensor

from i2a.errors import ConfigurationError

# (z_t, t, image_cond, text_cond) -> score with the shape of z_t
Denoiser = Callable[[Tensor, int, Tensor, Tensor], Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Noise scales sigma_0 < sigma_1 < ... < sigma_T."""

    sigmas: tuple[float, ...]

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigmas)
        object.__setattr__(self, "sigmas", sigmas)
        if len(sigmas) < 2:
            raise ConfigurationError("a schedule needs at least one step (T >= 1)")
        if not all(math.isfinite(s) for s in sigmas):
            raise ConfigurationError("noise scales must be finite")
        if sigmas[0] < 0 or sigmas[-1] <= 0:
            raise ConfigurationError("need sigma_0 >= 0 and sigma_T > 0")
        if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
            raise ConfigurationError("noise scales must be strictly increasing")

    @classmethod
    def geometric(cls, steps: int, sigma_min: float = 0.01, sigma_max: float = 1.0) -> "NoiseSchedule":
        if steps < 1:
            raise ConfigurationError("steps must be >= 1")
        ratio = sigma_max / sigma_min
        return cls(tuple(sigma_min * ratio ** (i / steps) for i in range(steps + 1)))

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1

    @property
    def sigma_max(self) -> float:
        return self.sigmas[-1]

    def __getitem__(self, t: int) -> float:
        return self.sigmas[t]


@dataclass(frozen=True)
class ConditionPair:
    """Image/text conditioning plus the backend's fixed null embeddings."""

    image_cond: Tensor
    text_cond: Tensor
    null_image: Tensor
    null_text: Tensor

    def __post_init__(self):
        if self.image_cond.shape != self.null_image.shape:
            raise ConfigurationError(
                f"image condition {tuple(self.image_cond.shape)} does not match "
                f"null image {tuple(self.null_image.shape)}"
            )
        if self.text_cond.shape != self.null_text.shape:
            raise ConfigurationError(
                f"text condition {tuple(self.text_cond.shape)} does not match "
                f"null text {tuple(self.null_text.shape)}"
            )


@dataclass(frozen=True)
class GuidanceScales:
    s_image: float = 1.5
    s_text: float = 7.5

    def __post_init__(self):
        for name in ("s_image", "s_text"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}")
            object.__setattr__(self, name, value)


@dataclass
class GuidanceFactors:
    """Per-element modulation of the image (alpha) and text (beta) guidance."""

    alpha: Tensor
    beta: Tensor

    def __post_init__(self):
        if self.alpha.shape != self.beta.shape:
            raise ConfigurationError("alpha and beta must have the same shape")

    @classmethod
    def ones(cls, shape: Sequence[int], dtype=torch.float32) -> "GuidanceFactors":
        return cls(torch.ones(tuple(shape), dtype=dtype), torch.ones(tuple(shape), dtype=dtype))

    def detach(self) -> "GuidanceFactors":
        return GuidanceFactors(self.alpha.detach().clone(), self.beta.detach().clone())

    def in_unit_box(self) -> bool:
        return bool(
            ((self.alpha >= 0) & (self.alpha <= 1)).all()
            and ((self.beta >= 0) & (self.beta <= 1)).all()
        )


@dataclass(frozen=True)
class NoiseSequence:
    """Per-step Gaussian noise, ordered from step T down to step 1."""

    zetas: tuple[Tensor, ...]
    seed: int

    def __len__(self):
        return len(self.zetas)

    def for_step(self, t: int) -> Tensor:
        # zetas[0] belongs to t = T
        return self.zetas[len(self.zetas) - t]

    @classmethod
    def from_seed(cls, seed: int, steps: int, shape: Sequence[int], dtype=torch.float32) -> "NoiseSequence":
        return initial_noise(seed, steps, shape, 1.0, dtype)[1]


def initial_noise(
    seed: int, steps: int, shape: Sequence[int], sigma_max: float, dtype=torch.float32
) -> tuple[Tensor, NoiseSequence]:
    """Draw z_T ~ N(0, sigma_max^2 I) and zeta_T..zeta_1 from one seeded stream.

    The draws are made in float64 and cast, so a given seed gives the same
    noise regardless of the working precision.
    """
    gen = torch.Generator().manual_seed(int(seed))
    shape = tuple(shape)
    z_T = torch.randn(shape, generator=gen, dtype=torch.float64) * sigma_max
    zetas = tuple(torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype) for _ in range(steps))
    return z_T.to(dtype), NoiseSequence(zetas, int(seed))


def _branches(denoiser: Denoiser, z_t: Tensor, t: int, cond: ConditionPair):
    eps_uncond = denoiser(z_t, t, cond.null_image, cond.null_text)
    eps_image = denoiser(z_t, t, cond.image_cond, cond.null_text)
    eps_full = denoiser(z_t, t, cond.image_cond, cond.text_cond)
    for eps in (eps_uncond, eps_image, eps_full):
        if eps.shape != z_t.shape:
            raise ConfigurationError(
                f"denoiser returned shape {tuple(eps.shape)} for latent {tuple(z_t.shape)}"
            )
    return eps_uncond, eps_image, eps_full


def cfg_score(
    denoiser: Denoiser, z_t: Tensor, t: int, cond: ConditionPair, scales: GuidanceScales
) -> Tensor:
    """Classifier-free guided score with separate image and text scales."""
    eps_uncond, eps_image, eps_full = _branches(denoiser, z_t, t, cond)
    return (
        eps_uncond
        + scales.s_image * (eps_image - eps_uncond)
        + scales.s_text * (eps_full - eps_image)
    )


def adv_score(
    denoiser: Denoiser,
    z_t: Tensor,
    t: int,
    cond: ConditionPair,
    scales: GuidanceScales,
    factors: GuidanceFactors,
) -> Tensor:
    """Guided score whose image and text terms are scaled elementwise by alpha and beta."""
    if factors.alpha.shape != z_t.shape:
        raise ConfigurationError(
            f"guidance factors have shape {tuple(factors.alpha.shape)}, latent is {tuple(z_t.shape)}"
        )
    eps_uncond, eps_image, eps_full = _branches(denoiser, z_t, t, cond)
    # alpha * diff is exactly diff when alpha == 1, which keeps this bitwise equal to cfg_score
    return (
        eps_uncond
        + scales.s_image * (factors.alpha * (eps_image - eps_uncond))
        + scales.s_text * (factors.beta * (eps_full - eps_image))
    )


def denoise_step(z_t: Tensor, score: Tensor, sigma_t: float, sigma_prev: float, zeta: Tensor) -> Tensor:
    if sigma_t == 0:
        raise ZeroDivisionError("sigma_t is zero; the noise schedule is invalid")
    if sigma_prev > sigma_t:
        raise ConfigurationError(f"sigma_prev={sigma_prev} exceeds sigma_t={sigma_t}")
    gap = sigma_t**2 - sigma_prev**2
    noise_scale = math.sqrt(sigma_prev**2 * gap / sigma_t**2)
    return z_t + gap * score + noise_scale * zeta


def sample(
    denoiser: Denoiser,
    z_T: Tensor,
    cond: ConditionPair,
    scales: GuidanceScales,
    factors: Optional[GuidanceFactors],
    schedule: NoiseSchedule,
    noise: NoiseSequence,
) -> Tensor:
    """Run the reverse chain from z_T to z_0.

    With ``factors=None`` the plain classifier-free guided score is used;
    otherwise the adversarially modulated one. The result keeps the autograd
    graph back to ``factors``.
    """
    if len(noise) != schedule.steps:
        raise ConfigurationError(f"need {schedule.steps} noise tensors, got {len(noise)}")
    z = z_T
    for t in range(schedule.steps, 0, -1):
        if factors is None:
            score = cfg_score(denoiser, z, t, cond, scales)
        else:
            score = adv_score(denoiser, z, t, cond, scales, factors)
        z = denoise_step(z, score, schedule[t], schedule[t - 1], noise.for_step(t))
    return z
