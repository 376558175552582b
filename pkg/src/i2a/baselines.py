"""L-infinity noise attacks (FGSM, PGD, MIM) and the BPDA+EOT adaptive wrapper."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import Tensor

from i2a.errors import ConfigurationError
from i2a.models import Classifier, logits_of
from i2a.perceptual import classification_loss


@dataclass(frozen=True)
class NoiseAttackConfig:
    epsilon: float = 4 / 255
    steps: int = 100
    step_size: float = 1 / 255
    decay: float = 1.0

    def __post_init__(self):
        if self.epsilon <= 0 or self.step_size <= 0 or self.steps < 1:
            raise ConfigurationError("epsilon and step_size must be positive, steps >= 1")


def project_linf(x_adv: Tensor, x: Tensor, epsilon: float) -> Tensor:
    """Project onto ``{|x_adv - x| <= epsilon} ∩ [0, 1]`` so the bound holds on computed floats.

    ``x + epsilon`` can round upward, which would leave ``x_adv - x`` one ulp
    above ``epsilon``; offending entries are stepped back with ``nextafter``.
    """
    x_adv = torch.max(torch.min(x_adv, x + epsilon), x - epsilon)
    # largest value of the working dtype that does not exceed epsilon
    eps = torch.tensor(epsilon, dtype=x.dtype)
    if float(eps) > epsilon:
        eps = torch.nextafter(eps, torch.tensor(-torch.inf, dtype=x.dtype))
    while True:
        over = (x_adv - x) > eps
        under = (x_adv - x) < -eps
        if not (over.any() or under.any()):
            break
        x_adv = torch.where(over, torch.nextafter(x_adv, torch.full_like(x_adv, -torch.inf)), x_adv)
        x_adv = torch.where(under, torch.nextafter(x_adv, torch.full_like(x_adv, torch.inf)), x_adv)
    # clamping to [0, 1] only moves entries toward x, which already lies in [0, 1]
    return x_adv.clamp(0.0, 1.0)


def _loss_grad(x: Tensor, y: int, classifier: Classifier) -> Tensor:
    x = x.detach().requires_grad_(True)
    loss = classification_loss(logits_of(classifier, x), y)
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def fgsm(x: Tensor, y: int, classifier: Classifier, epsilon: float = 4 / 255) -> Tensor:
    """One signed-gradient step of size ``epsilon``."""
    grad = _loss_grad(x, y, classifier)
    return project_linf(x.detach() + epsilon * torch.sign(grad), x.detach(), epsilon)


def pgd(x: Tensor, y: int, classifier: Classifier, cfg: NoiseAttackConfig = NoiseAttackConfig()) -> Tensor:
    """Iterated signed ascent from ``x`` (no random start)."""
    x = x.detach()
    x_adv = x.clone()
    for _ in range(cfg.steps):
        grad = _loss_grad(x_adv, y, classifier)
        x_adv = project_linf(x_adv + cfg.step_size * torch.sign(grad), x, cfg.epsilon)
    return x_adv


def mim(x: Tensor, y: int, classifier: Classifier, cfg: NoiseAttackConfig = NoiseAttackConfig()) -> Tensor:
    """Momentum iterative method: ``g <- decay * g + grad / ||grad||_1``, then a signed step."""
    x = x.detach()
    x_adv = x.clone()
    momentum = torch.zeros_like(x)
    for _ in range(cfg.steps):
        grad = _loss_grad(x_adv, y, classifier)
        momentum = cfg.decay * momentum + grad / grad.abs().sum().clamp_min(1e-12)
        x_adv = project_linf(x_adv + cfg.step_size * torch.sign(momentum), x, cfg.epsilon)
    return x_adv


class FGSM:
    name = "fgsm"

    def __init__(self, epsilon: float = 4 / 255):
        self.epsilon = epsilon
        self.max_iters = 1

    def with_max_iters(self, n: int) -> "FGSM":
        return self

    def __call__(self, x, y, classifier, *, instruction: str = "", seed: Optional[int] = None) -> Tensor:
        return fgsm(x, y, classifier, self.epsilon)


class PGD:
    name = "pgd"
    _fn = staticmethod(pgd)

    def __init__(self, cfg: NoiseAttackConfig = NoiseAttackConfig()):
        self.cfg = cfg

    @property
    def max_iters(self) -> int:
        return self.cfg.steps

    def with_max_iters(self, n: int):
        return type(self)(dataclasses.replace(self.cfg, steps=n))

    def __call__(self, x, y, classifier, *, instruction: str = "", seed: Optional[int] = None) -> Tensor:
        return self._fn(x, y, classifier, self.cfg)


class MIM(PGD):
    name = "mim"
    _fn = staticmethod(mim)


class Identity:
    """Returns the input unchanged; the clean-accuracy reference."""

    name = "clean"
    max_iters = 0

    def with_max_iters(self, n: int) -> "Identity":
        return self

    def __call__(self, x, y, classifier, *, instruction: str = "", seed: Optional[int] = None) -> Tensor:
        return x.detach().clone()


class IdentityDefense:
    stochastic = False

    def __call__(self, x: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
        return x


class GaussianNoiseDefense:
    """Adds ``N(0, sigma^2)`` noise and clamps; a cheap stochastic stand-in for purification."""

    stochastic = True

    def __init__(self, sigma: float = 0.05, clamp: bool = True):
        self.sigma = sigma
        self.clamp = clamp

    def __call__(self, x: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
        out = x + self.sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)
        return out.clamp(0.0, 1.0) if self.clamp else out


class _StraightThrough(torch.autograd.Function):
    """Forward through a preprocessor, backward as the identity."""

    @staticmethod
    def forward(ctx, x, processed):
        return processed.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def bpda(x: Tensor, defense: Callable, generator: Optional[torch.Generator] = None) -> Tensor:
    with torch.no_grad():
        processed = defense(x.detach(), generator)
    return _StraightThrough.apply(x, processed)


class EOTClassifier:
    """Classifier behind a defense, attacked with BPDA and EOT.

    Each call stacks the logits of ``eot_samples`` independent defense draws
    into a ``(draws, K)`` tensor. The classification loss averages over the
    draws, so its gradient is the EOT average of per-draw BPDA gradients.
    Draws come from a generator seeded once per classifier.
    """

    def __init__(self, classifier: Classifier, defense: Callable, eot_samples: int = 16, seed: int = 0):
        if eot_samples < 1:
            raise ConfigurationError("eot_samples must be >= 1")
        self.classifier = classifier
        self.defense = defense
        self.eot_samples = eot_samples
        self.generator = torch.Generator().manual_seed(seed)

    def __call__(self, x: Tensor) -> Tensor:
        draws = [self.classifier(bpda(x, self.defense, self.generator)) for _ in range(self.eot_samples)]
        return torch.stack(draws)


class AdaptiveAttack:
    """Wrap an attack so it sees the defended classifier through BPDA+EOT, with an iteration cap."""

    def __init__(self, attack, defense: Callable, eot_samples: int = 16, max_iters: int = 50, seed: int = 0):
        if eot_samples < 1:
            raise ConfigurationError("eot_samples must be >= 1")
        self.inner = attack.with_max_iters(max_iters)
        self.defense = defense
        self.eot_samples = eot_samples
        self.max_iters = max_iters
        self.seed = seed
        self.name = f"adaptive-{getattr(attack, 'name', 'attack')}"

    def with_max_iters(self, n: int) -> "AdaptiveAttack":
        return AdaptiveAttack(self.inner, self.defense, self.eot_samples, n, self.seed)

    def __call__(self, x, y, classifier, *, instruction: str = "", seed: Optional[int] = None):
        wrapped = EOTClassifier(classifier, self.defense, self.eot_samples, self.seed if seed is None else seed)
        return self.inner(x, y, wrapped, instruction=instruction, seed=seed)


def adaptive(attack, defense: Callable, eot_samples: int = 16, max_iters: int = 50, seed: int = 0) -> AdaptiveAttack:
    return AdaptiveAttack(attack, defense, eot_samples, max_iters, seed)


ATTACKS: dict[str, Callable[..., object]] = {}


def register_attack(name: str, factory: Callable[..., object]) -> None:
    """Make an external attack available to the harness and CLI by name.

    ``factory(**options)`` must return a callable
    ``attack(x, y, classifier, *, instruction, seed)`` returning an image or
    an object with an ``adversarial`` image attribute.
    """
    ATTACKS[name] = factory


register_attack("clean", lambda **kw: Identity())
register_attack("fgsm", lambda epsilon=4 / 255, **kw: FGSM(epsilon))
register_attack("pgd", lambda **kw: PGD(NoiseAttackConfig(**kw)))
register_attack("mim", lambda **kw: MIM(NoiseAttackConfig(**kw)))
