"""Adversarial guidance attack and perceptual projection.

The attack optimizes per-element guidance factors ``alpha`` and ``beta`` with
signed projected gradient ascent on

    L = CE(f(x_adv), y) - lambda * max(0, d(x_adv, x) - gamma),

where ``x_adv`` is decoded from the guided reverse chain. The starting latent
and the per-step noise are drawn once from the seed and reused everywhere, so
``L`` is a deterministic function of the factors.

If the returned candidate still violates the LPIPS budget, the guidance scales
are re-tuned: first ``s_image`` is raised (with ``s_text = 0``) until the image
is feasible, then ``s_text`` is bisected upward as far as feasibility allows.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
from torch import Tensor

from i2a.errors import ConfigurationError
from i2a.models import Backend, Classifier, predict
from i2a.perceptual import (
    FeatureExtractor,
    is_feasible,
    lpips_distance,
    objective_terms,
)
from i2a.sampler import (
    ConditionPair,
    GuidanceFactors,
    GuidanceScales,
    NoiseSequence,
    initial_noise,
    sample,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    lam: float = 100.0
    gamma: float = 0.3
    eta: float = 0.1
    steps: int = 20
    s_image: float = 1.5
    s_text: float = 7.5
    max_iters: int = 200
    seed: int = 0
    proj_s_image_max: float = 10.0
    proj_s_image_step: float = 0.2
    proj_bisect_iters: int = 10
    proj_s_text_max: float = 20.0
    # ablation switches; a disabled factor stays all-ones
    optimize_alpha: bool = True
    optimize_beta: bool = True
    project: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ConfigurationError("lambda and gamma must be non-negative")
        if self.eta <= 0:
            raise ConfigurationError("eta must be positive")
        if self.steps < 1 or self.max_iters < 1:
            raise ConfigurationError("steps and max_iters must be >= 1")
        if self.s_image < 0 or self.s_text < 0:
            raise ConfigurationError("guidance scales must be non-negative")
        if min(self.proj_s_image_max, self.proj_s_image_step, self.proj_s_text_max) <= 0 or self.proj_bisect_iters < 1:
            raise ConfigurationError("projection parameters must be positive")

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ProjectionStep:
    lower: float
    upper: float
    s_text: float
    distance: float
    feasible: bool


@dataclass
class ProjectionResult:
    success: bool
    image: Optional[Tensor]
    distance: float
    s_image: Optional[float]
    s_text: Optional[float]
    image_search: list[tuple[float, float]] = field(default_factory=list)
    bisection: list[ProjectionStep] = field(default_factory=list)


@dataclass
class AttackResult:
    adversarial: Tensor
    success: bool
    distance: float
    constraint_met: bool
    iterations: int
    projected: bool
    factors: GuidanceFactors
    proj_scales: Optional[tuple[float, float]] = None
    objective: Optional[float] = None
    projection: Optional[ProjectionResult] = None


def pgd_update(factors: GuidanceFactors, grads: tuple[Tensor, Tensor], eta: float) -> GuidanceFactors:
    """Signed ascent step followed by clipping to ``[0, 1]``; ``sign(0) = 0``."""
    grad_alpha, grad_beta = grads
    if grad_alpha.shape != factors.alpha.shape or grad_beta.shape != factors.beta.shape:
        raise ConfigurationError("gradient shapes do not match the guidance factors")
    alpha = (factors.alpha.detach() + eta * torch.sign(grad_alpha)).clamp(0.0, 1.0)
    beta = (factors.beta.detach() + eta * torch.sign(grad_beta)).clamp(0.0, 1.0)
    return GuidanceFactors(alpha, beta)


class _Editor:
    """Everything needed to render an image from guidance factors and scales."""

    def __init__(self, x: Tensor, instruction: str, backend: Backend, seed: int,
                 z_T: Optional[Tensor] = None, noise: Optional[NoiseSequence] = None):
        backend.check_image(x)
        self.backend = backend
        with torch.no_grad():
            self.cond = ConditionPair(
                backend.encode(x).detach(),
                backend.embed_text(instruction).detach(),
                backend.null_image,
                backend.null_text,
            )
        if z_T is None or noise is None:
            z_T, noise = initial_noise(seed, backend.schedule.steps, backend.latent_shape,
                                       backend.schedule.sigma_max, backend.dtype)
        self.z_T, self.noise = z_T, noise

    def render(self, factors: Optional[GuidanceFactors], scales: GuidanceScales) -> Tensor:
        z0 = sample(self.backend.denoise, self.z_T, self.cond, scales, factors,
                    self.backend.schedule, self.noise)
        return self.backend.decode(z0)


def search_scales(
    evaluate: Callable[[float, float], tuple[Tensor, float]],
    gamma: float,
    s_image: float,
    s_image_max: float,
    s_image_step: float,
    s_text_max: float,
    bisect_iters: int,
) -> ProjectionResult:
    """Find guidance scales whose rendered image meets ``d <= gamma``.

    ``evaluate(s_image, s_text)`` returns ``(image, distance)``. Phase one walks
    ``s_image`` upward from its initial value with ``s_text = 0``; the first
    feasible value is kept. Phase two runs ``bisect_iters`` bisection steps on
    ``s_text`` over ``[0, s_text_max]``, keeping the last feasible image. The
    phase-one image seeds phase two, so success always carries an image.
    """
    result = ProjectionResult(False, None, math.inf, None, None)
    k = 0
    found = None
    while True:
        # index-based stepping keeps s_image on the exact grid start + k * step
        s_i = s_image + k * s_image_step
        if s_i > s_image_max + 1e-12:
            break
        image, d = evaluate(s_i, 0.0)
        result.image_search.append((s_i, float(d)))
        if is_feasible(d, gamma):
            found = (s_i, image, float(d))
            break
        k += 1
    if found is None:
        log.info("projection failed: no s_image <= %g gives d <= %g", s_image_max, gamma)
        return result

    s_i, best_image, best_d = found
    lower, upper, best_s_t = 0.0, float(s_text_max), 0.0
    for _ in range(bisect_iters):
        mid = (lower + upper) / 2
        image, d = evaluate(s_i, mid)
        feasible = is_feasible(d, gamma)
        result.bisection.append(ProjectionStep(lower, upper, mid, float(d), feasible))
        if feasible:
            lower, best_image, best_d, best_s_t = mid, image, float(d), mid
        else:
            upper = mid
    result.success = True
    result.image, result.distance = best_image, best_d
    result.s_image, result.s_text = s_i, best_s_t
    return result


def project(
    x: Tensor,
    z_T: Tensor,
    factors: GuidanceFactors,
    instruction: str,
    backend: Backend,
    phi: FeatureExtractor,
    gamma: float,
    config: AttackConfig,
    noise: Optional[NoiseSequence] = None,
) -> ProjectionResult:
    """Re-tune the guidance scales so the edit with ``factors`` lands inside the LPIPS budget."""
    if noise is None:
        _, noise = initial_noise(config.seed, backend.schedule.steps, backend.latent_shape,
                                 backend.schedule.sigma_max, backend.dtype)
    editor = _Editor(x, instruction, backend, config.seed, z_T=z_T, noise=noise)
    fixed = factors.detach()

    def evaluate(s_i: float, s_t: float):
        with torch.no_grad():
            image = editor.render(fixed, GuidanceScales(s_i, s_t))
            return image, float(lpips_distance(image, x, phi))

    return search_scales(evaluate, gamma, config.s_image, config.proj_s_image_max,
                         config.proj_s_image_step, config.proj_s_text_max, config.proj_bisect_iters)


def benign_edit(x: Tensor, instruction: str, backend: Backend, config: AttackConfig) -> Tensor:
    """Plain classifier-free guided edit with the attack's seed and scales."""
    editor = _Editor(x, instruction, backend, config.seed)
    with torch.no_grad():
        return editor.render(None, GuidanceScales(config.s_image, config.s_text))


def i2a_attack(
    x: Tensor,
    instruction: str,
    y: int,
    classifier: Classifier,
    backend: Backend,
    phi: FeatureExtractor,
    config: AttackConfig,
) -> AttackResult:
    """Language-guided semantic attack on one image.

    Each iteration renders the current factors, evaluates the relaxed
    objective and stops early once the rendered image is both misclassified
    and within budget; otherwise the factors take one signed gradient step.
    When the loop runs out, the best feasible iterate (highest objective) is
    returned, or the last iterate if none was feasible, and an infeasible
    result goes through :func:`project`.

    ``iterations`` is the number of factor updates performed: ``i`` for an
    early stop at loop index ``i``, ``max_iters`` when the loop runs out.
    """
    editor = _Editor(x, instruction, backend, config.seed)
    scales = GuidanceScales(config.s_image, config.s_text)
    factors = GuidanceFactors.ones(backend.latent_shape, dtype=backend.dtype)
    x_ref = x.to(backend.dtype)
    optimize = (config.optimize_alpha, config.optimize_beta)
    max_iters = config.max_iters if any(optimize) else 1

    best = None  # (objective, image, distance, factors, iteration)
    last = None
    for i in range(max_iters):
        alpha = factors.alpha.clone().requires_grad_(config.optimize_alpha)
        beta = factors.beta.clone().requires_grad_(config.optimize_beta)
        current = GuidanceFactors(alpha, beta)
        x_adv = editor.render(current, scales)
        loss, distance, logits = objective_terms(x_adv, x_ref, y, classifier, phi, config.gamma, config.lam)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite objective at iteration {i}")
        d = float(distance.detach())
        feasible = is_feasible(d, config.gamma)
        fooled = predict(logits) != y
        snapshot = (float(loss.detach()), x_adv.detach(), d, current.detach(), i)
        last = snapshot
        if feasible and (best is None or snapshot[0] > best[0]):
            best = snapshot
        if fooled and feasible:
            return AttackResult(x_adv.detach(), True, d, True, i, False, snapshot[3], objective=snapshot[0])
        if not any(optimize):
            break
        wrt = [t for t, on in zip((alpha, beta), optimize) if on]
        grads = iter(torch.autograd.grad(loss, wrt))
        g_alpha = next(grads) if config.optimize_alpha else torch.zeros_like(alpha)
        g_beta = next(grads) if config.optimize_beta else torch.zeros_like(beta)
        factors = pgd_update(current, (g_alpha, g_beta), config.eta)

    value, image, d, chosen, index = best if best is not None else last
    result = AttackResult(
        adversarial=image,
        success=False,
        distance=d,
        constraint_met=is_feasible(d, config.gamma),
        iterations=max_iters if any(optimize) else 0,
        projected=False,
        factors=chosen,
        objective=value,
    )
    if not result.constraint_met and config.project and any(optimize):
        proj = project(x_ref, editor.z_T, chosen, instruction, backend, phi, config.gamma, config, editor.noise)
        result.projection = proj
        if proj.success:
            result.adversarial, result.distance = proj.image, proj.distance
            result.constraint_met = is_feasible(proj.distance, config.gamma)
            result.projected = True
            result.proj_scales = (proj.s_image, proj.s_text)
    with torch.no_grad():
        result.success = predict(classifier(result.adversarial)) != y
    return result


class I2A:
    """Callable attack object around :func:`i2a_attack` for harness use."""

    name = "i2a"

    def __init__(self, backend: Backend, phi: FeatureExtractor, config: AttackConfig = AttackConfig()):
        self.backend = backend
        self.phi = phi
        self.config = config

    @property
    def max_iters(self) -> int:
        return self.config.max_iters

    def with_max_iters(self, n: int) -> "I2A":
        return I2A(self.backend, self.phi, self.config.replace(max_iters=n))

    def __call__(self, x: Tensor, y: int, classifier: Classifier, *, instruction: str = "", seed: Optional[int] = None):
        config = self.config if seed is None else self.config.replace(seed=seed)
        return i2a_attack(x, instruction, y, classifier, self.backend, self.phi, config)


class BenignEdit(I2A):
    """The unmodulated edit: both factors fixed at one, no projection."""

    name = "benign"

    def __init__(self, backend: Backend, phi: FeatureExtractor, config: AttackConfig = AttackConfig()):
        super().__init__(backend, phi, config.replace(optimize_alpha=False, optimize_beta=False))

    def with_max_iters(self, n: int) -> "BenignEdit":
        return self
