"""Adapters for the learned components, and analytic mock backends.

A backend bundles the image encoder, the decoder, the text encoder, the
conditional denoiser and its noise schedule. Images are ``H x W x C`` tensors
in ``[0, 1]``; latents and conditions are whatever shape the backend declares.
"""

from __future__ import annotations

import abc
import hashlib
import importlib
import math
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from i2a.errors import ConfigurationError
from i2a.sampler import NoiseSchedule

Classifier = Callable[[Tensor], Tensor]


class Backend(abc.ABC):
    """Encoder, decoder, text encoder and denoiser of a conditional latent diffusion model."""

    image_shape: tuple[int, ...]
    latent_shape: tuple[int, ...]
    schedule: NoiseSchedule
    null_image: Tensor
    null_text: Tensor
    dtype: torch.dtype = torch.float32
    #: whether one instance may be used from several worker threads at once
    shareable: bool = True

    @abc.abstractmethod
    def encode(self, x: Tensor) -> Tensor: ...

    @abc.abstractmethod
    def _decode(self, z: Tensor) -> Tensor: ...

    @abc.abstractmethod
    def embed_text(self, text: str) -> Tensor: ...

    @abc.abstractmethod
    def denoise(self, z: Tensor, t: int, image_cond: Tensor, text_cond: Tensor) -> Tensor: ...

    def decode(self, z: Tensor) -> Tensor:
        if tuple(z.shape) != tuple(self.latent_shape):
            raise ConfigurationError(f"latent shape {tuple(z.shape)} != {self.latent_shape}")
        return self._decode(z).clamp(0.0, 1.0)

    def check_image(self, x: Tensor) -> None:
        if tuple(x.shape) != tuple(self.image_shape):
            raise ConfigurationError(f"image shape {tuple(x.shape)} != {self.image_shape}")


def _string_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little") >> 1


class MockBackend(Backend):
    """Linear-Gaussian stand-in for an instruction-editing diffusion model.

    The denoiser returns the exact score of a point mass at a conditional mean,
    ``(mu - z) / sigma_t**2`` with ``mu = g_img * c_I + g_txt * P (c_L - null_L)``.
    Under guidance the chain therefore converges to

        s_I * alpha * g_img * c_I + s_T * beta * g_txt * P (c_L - null_L)

    up to a residual of ``sigma_0**2 / sigma_T**2`` times the starting noise.
    With ``image_gain = 1 / 1.5`` a benign edit at the default scales reproduces
    the input plus a text-dependent edit whose per-element size is about
    ``edit_strength``.

    Args:
        image_shape: ``(H, W, C)`` of the images handled.
        steps: number of diffusion steps T.
        encoder: ``"orthogonal"`` (seeded random rotation of the centred
            pixels) or ``"identity"`` (centred pixels).
        text_shape: ``(m, l)`` of text embeddings.
        edit_strength: typical per-element size of the benign text edit.
        nonlinear: add a small ``tanh`` term in ``z`` to the score.
    """

    def __init__(
        self,
        image_shape: Sequence[int] = (16, 16, 3),
        steps: int = 20,
        *,
        encoder: str = "orthogonal",
        text_shape: Sequence[int] = (4, 8),
        image_gain: float = 1 / 1.5,
        edit_strength: float = 0.03,
        reference_text_scale: float = 7.5,
        nonlinear: bool = False,
        sigma_min: float = 0.01,
        sigma_max: float = 1.0,
        seed: int = 0,
        dtype: torch.dtype = torch.float64,
    ):
        self.image_shape = tuple(int(s) for s in image_shape)
        self.latent_shape = self.image_shape
        self.text_shape = tuple(int(s) for s in text_shape)
        self.dtype = dtype
        self.schedule = NoiseSchedule.geometric(steps, sigma_min, sigma_max)
        self.nonlinear = nonlinear
        self.image_gain = float(image_gain)
        self.seed = seed

        n = math.prod(self.latent_shape)
        gen = torch.Generator().manual_seed(seed)
        if encoder == "orthogonal":
            q, r = torch.linalg.qr(torch.randn(n, n, generator=gen, dtype=torch.float64))
            self._rotation = (q * torch.sign(torch.diagonal(r))).to(dtype)
        elif encoder == "identity":
            self._rotation = None
        else:
            raise ConfigurationError(f"unknown mock encoder {encoder!r}")
        self.encoder = encoder

        k = math.prod(self.text_shape)
        # entries of P (c_L - null_L) have variance ~2, so this sets their std to edit_strength at s_T
        self.text_gain = edit_strength / (reference_text_scale * math.sqrt(2.0))
        self._text_proj = (torch.randn(n, k, generator=gen, dtype=torch.float64) / math.sqrt(k)).to(dtype)

        self.null_image = torch.zeros(self.latent_shape, dtype=dtype)
        self.null_text = self.embed_text("")

    def encode(self, x: Tensor) -> Tensor:
        self.check_image(x)
        flat = (x.to(self.dtype) - 0.5).reshape(-1)
        if self._rotation is not None:
            flat = self._rotation @ flat
        return flat.reshape(self.latent_shape)

    def _decode(self, z: Tensor) -> Tensor:
        flat = z.reshape(-1)
        if self._rotation is not None:
            flat = self._rotation.T @ flat
        return flat.reshape(self.image_shape) + 0.5

    def embed_text(self, text: str) -> Tensor:
        gen = torch.Generator().manual_seed(_string_seed(text))
        return torch.randn(self.text_shape, generator=gen, dtype=torch.float64).to(self.dtype)

    def text_direction(self, text_cond: Tensor) -> Tensor:
        delta = (text_cond - self.null_text).reshape(-1)
        return (self._text_proj @ delta).reshape(self.latent_shape) * self.text_gain

    def conditional_mean(self, image_cond: Tensor, text_cond: Tensor) -> Tensor:
        return self.image_gain * image_cond + self.text_direction(text_cond)

    def denoise(self, z: Tensor, t: int, image_cond: Tensor, text_cond: Tensor) -> Tensor:
        if image_cond.shape != z.shape:
            raise ConfigurationError(f"image condition {tuple(image_cond.shape)} != latent {tuple(z.shape)}")
        if tuple(text_cond.shape) != self.text_shape:
            raise ConfigurationError(f"text condition {tuple(text_cond.shape)} != {self.text_shape}")
        residual = self.conditional_mean(image_cond, text_cond) - z
        if self.nonlinear:
            residual = residual - 0.1 * torch.tanh(z)
        return residual / self.schedule[t] ** 2


class ScoreFromEpsilon:
    """Wrap a noise-prediction network so it returns a score.

    For ``z_t = z_0 + sigma_t * eps`` the score is ``-eps / sigma_t``. Real
    editing backbones predict ``eps``; the sampler expects scores.
    """

    def __init__(self, eps_model: Callable[[Tensor, int, Tensor, Tensor], Tensor], schedule: NoiseSchedule):
        self.eps_model = eps_model
        self.schedule = schedule

    def __call__(self, z: Tensor, t: int, image_cond: Tensor, text_cond: Tensor) -> Tensor:
        return -self.eps_model(z, t, image_cond, text_cond) / self.schedule[t]


class LinearClassifier(nn.Module):
    """``logits = W @ flatten(x) + b``."""

    def __init__(self, weight: Tensor, bias: Optional[Tensor] = None):
        super().__init__()
        self.weight = nn.Parameter(weight.clone(), requires_grad=False)
        bias = torch.zeros(weight.shape[0], dtype=weight.dtype) if bias is None else bias.clone()
        self.bias = nn.Parameter(bias, requires_grad=False)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return self.weight @ x.reshape(-1).to(self.weight.dtype) + self.bias


class TorchClassifier(nn.Module):
    """Adapt an ``NCHW`` network to single ``H x W x C`` images in ``[0, 1]``.

    Args:
        net: module mapping a batch ``(N, C, H, W)`` to logits ``(N, K)``.
        mean, std: per-channel normalization applied after resizing.
        input_size: ``(H, W)`` the network expects; ``None`` keeps the input size.
    """

    def __init__(self, net: nn.Module, mean=None, std=None, input_size=None):
        super().__init__()
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.input_size = tuple(input_size) if input_size else None
        self.register_buffer("mean", None if mean is None else torch.as_tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", None if std is None else torch.as_tensor(std).view(1, -1, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        dtype = next(self.net.parameters()).dtype
        batch = x.to(dtype).permute(2, 0, 1).unsqueeze(0)
        if self.input_size and tuple(batch.shape[-2:]) != self.input_size:
            batch = F.interpolate(batch, size=self.input_size, mode="bilinear", align_corners=False)
        if self.mean is not None:
            batch = (batch - self.mean.to(dtype)) / self.std.to(dtype)
        return self.net(batch)[0]


class SmallConvNet(nn.Module):
    """One conv layer, global average pooling and a linear head."""

    def __init__(self, in_channels: int = 3, num_classes: int = 3, width: int = 16):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, width, 3, padding=1)
        self.head = nn.Linear(width, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(torch.relu(self.conv(x)).mean(dim=(2, 3)))


def logits_of(classifier: Classifier, x: Tensor) -> Tensor:
    logits = classifier(x)
    if not torch.isfinite(logits).all():
        raise FloatingPointError("classifier returned non-finite logits")
    return logits


def predict(logits: Tensor) -> int:
    """Arg-max label; ties go to the lowest index. Stacked ``(draws, K)`` logits are averaged."""
    if logits.ndim == 2:
        logits = logits.mean(dim=0)
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    return int(torch.argmax(logits.detach()))


def classify(classifier: Classifier, x: Tensor) -> int:
    with torch.no_grad():
        return predict(logits_of(classifier, x))


def load_object(spec: str):
    """Import ``"package.module:attribute"``."""
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise ConfigurationError(f"expected 'module:attribute', got {spec!r}")
    obj = importlib.import_module(module_name)
    for part in attr.split("."):
        obj = getattr(obj, part)
    return obj
