"""Perceptual distance, hinge penalty and the relaxed attack objective."""

from __future__ import annotations

import math
from typing import Callable, Optional, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from i2a.models import Classifier, logits_of

FeatureExtractor = Callable[[Tensor], Tensor]
Number = Union[float, Tensor]

#: slack used whenever ``d <= gamma`` is checked on floats
FEASIBILITY_TOL = 1e-9


def is_feasible(distance: Number, gamma: float) -> bool:
    return float(distance) <= gamma + FEASIBILITY_TOL


class IdentityFeatures:
    """Flattened pixels; LPIPS then reduces to the Euclidean distance."""

    def __call__(self, x: Tensor) -> Tensor:
        return x.reshape(-1)


class RandomConvFeatures(nn.Module):
    """A fixed, seeded 3x3 convolution followed by ``tanh``.

    Features are scaled by ``1 / sqrt(H * W)`` so distances stay comparable
    across image sizes. Smooth, so finite-difference checks work through it.
    """

    def __init__(self, in_channels: int = 3, out_channels: int = 8, seed: int = 0, gain: float = 4.0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        fan_in = in_channels * 9
        weight = torch.randn(out_channels, in_channels, 3, 3, generator=gen, dtype=torch.float64)
        self.register_buffer("weight", (weight * gain / math.sqrt(fan_in)).to(dtype))

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[0], x.shape[1]
        batch = (x.to(self.weight.dtype) - 0.5).permute(2, 0, 1).unsqueeze(0)
        feats = torch.tanh(F.conv2d(batch, self.weight, padding=1))
        return feats.reshape(-1) / math.sqrt(h * w)


class AlexNetFeatures(nn.Module):
    """LPIPS-style features from the five ReLU stages of AlexNet.

    Each stage is unit-normalized across channels at every location and
    divided by ``sqrt(H * W)``; the concatenation makes the Euclidean distance
    a perceptual distance. Needs torchvision. ``weights`` may be a torchvision
    weights name (``"DEFAULT"``), a path to a state dict, or ``None`` for an
    untrained net.
    """

    _shift = (-0.030, -0.088, -0.188)
    _scale = (0.458, 0.448, 0.450)

    def __init__(self, weights: Optional[str] = "DEFAULT"):
        super().__init__()
        from torchvision.models import alexnet

        if weights is None or weights == "DEFAULT":
            net = alexnet(weights=weights)
        else:
            net = alexnet(weights=None)
            net.load_state_dict(torch.load(weights, map_location="cpu"))
        self.features = net.features.eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        self._taps = {1, 4, 7, 9, 11}
        self.register_buffer("shift", torch.tensor(self._shift).view(1, 3, 1, 1))
        self.register_buffer("scale", torch.tensor(self._scale).view(1, 3, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        batch = x.to(self.shift.dtype).permute(2, 0, 1).unsqueeze(0) * 2 - 1
        h = (batch - self.shift) / self.scale
        out = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in self._taps:
                norm = h.pow(2).sum(dim=1, keepdim=True).clamp_min(1e-20).sqrt()
                out.append((h / norm).reshape(-1) / math.sqrt(h.shape[-1] * h.shape[-2]))
            if i == max(self._taps):
                break
        return torch.cat(out)


def lpips_distance(x1: Tensor, x2: Tensor, phi: FeatureExtractor) -> Tensor:
    """``||phi(x1) - phi(x2)||_2`` as a differentiable scalar."""
    if x1.shape != x2.shape:
        raise ValueError(f"images differ in shape: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    return torch.linalg.vector_norm(phi(x1) - phi(x2))


def penalty(distance: Number, gamma: float, lam: float) -> Number:
    """``lam * max(0, distance - gamma)``; the kink at ``distance == gamma`` has subgradient 0."""
    if gamma < 0 or lam < 0:
        raise ValueError("gamma and lambda must be non-negative")
    if isinstance(distance, Tensor):
        return lam * torch.relu(distance - gamma)
    return lam * max(0.0, distance - gamma)


def classification_loss(logits: Tensor, y: int) -> Tensor:
    """Cross-entropy at label ``y``.

    ``logits`` is ``(K,)`` or a stack ``(draws, K)`` from a stochastic defense;
    stacks are averaged over draws, which averages their gradients too.
    """
    num_classes = logits.shape[-1]
    if not 0 <= int(y) < num_classes:
        raise ValueError(f"label {y} out of range for {num_classes} classes")
    batch = logits if logits.ndim == 2 else logits.unsqueeze(0)
    target = torch.full((batch.shape[0],), int(y), dtype=torch.long)
    return F.cross_entropy(batch, target)


def objective_terms(x_adv: Tensor, x: Tensor, y: int, classifier: Classifier, phi: FeatureExtractor,
                    gamma: float, lam: float) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(objective, distance, logits)`` for one candidate image."""
    logits = logits_of(classifier, x_adv)
    distance = lpips_distance(x_adv, x, phi)
    loss = classification_loss(logits, y) - penalty(distance, gamma, lam)
    return loss, distance, logits


def objective(x_adv: Tensor, x: Tensor, y: int, classifier: Classifier, phi: FeatureExtractor,
              gamma: float, lam: float) -> Tensor:
    """Cross-entropy minus the LPIPS hinge penalty; maximized by the attack."""
    return objective_terms(x_adv, x, y, classifier, phi, gamma, lam)[0]
