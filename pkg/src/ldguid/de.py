"""Difference-embedding (DE) module: encoder, conditional decoder, adversarial decoder.

All forwards operate on ``N x C x H x W`` tensors. The latent difference ``z``
lives at quarter resolution with ``c_z`` channels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import InvalidArch, ShapeMismatch


@dataclass(frozen=True)
class DEArchConfig:
    in_channels: int = 3
    c_z: int = 16
    base_width: int = 32
    image_size: int = 32

    def validate(self):
        for name in ("in_channels", "c_z", "base_width", "image_size"):
            if int(getattr(self, name)) < 1:
                raise InvalidArch(f"{name} must be >= 1")
        if self.image_size % 4:
            raise InvalidArch(f"image_size={self.image_size} is not divisible by 4")

    def to_dict(self):
        return asdict(self)


def _two_layer_cnn(in_ch, width):
    # conv(stride 2) -> relu -> conv(stride 2) -> relu
    return nn.Sequential(
        nn.Conv2d(in_ch, width, 3, stride=2, padding=1),
        nn.ReLU(),
        nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
        nn.ReLU(),
    )


def _three_layer_deconv(in_ch, width, out_ch):
    return nn.Sequential(
        nn.ConvTranspose2d(in_ch, 2 * width, 4, stride=2, padding=1),
        nn.ReLU(),
        nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1),
        nn.ReLU(),
        nn.ConvTranspose2d(width, out_ch, 3, stride=1, padding=1),
    )


class DEEncoder(nn.Module):
    """Dual-branch encoder: a change branch on ``post - pre`` and a context branch on ``pre``."""

    def __init__(self, arch: DEArchConfig):
        super().__init__()
        w = arch.base_width
        self.change = _two_layer_cnn(arch.in_channels, w)
        self.context = _two_layer_cnn(arch.in_channels, w)
        self.fuse = nn.Conv2d(4 * w, arch.c_z, 1)

    def forward(self, pre, post):
        return self.fuse(torch.cat([self.change(post - pre), self.context(pre)], dim=1))


class ConditionalDecoder(nn.Module):
    def __init__(self, arch: DEArchConfig):
        super().__init__()
        w = arch.base_width
        self.pre_path = _two_layer_cnn(arch.in_channels, w)
        self.deconv = _three_layer_deconv(2 * w + arch.c_z, w, arch.in_channels)

    def forward(self, pre, z):
        return self.deconv(torch.cat([self.pre_path(pre), z], dim=1))


class AdversarialDecoder(nn.Module):
    """Decodes ``z`` with no access to either image."""

    def __init__(self, arch: DEArchConfig):
        super().__init__()
        self.deconv = _three_layer_deconv(arch.c_z, arch.base_width, arch.in_channels)

    def forward(self, z):
        return self.deconv(z)


class DifferenceEmbedding(nn.Module):
    """Container for the three DE networks.

    ``encoder``, ``decoder`` and ``adversary`` hold the three disjoint
    parameter groups; the trainer updates them separately.
    """

    def __init__(self, arch: DEArchConfig):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.encoder = DEEncoder(arch)
        self.decoder = ConditionalDecoder(arch)
        self.adversary = AdversarialDecoder(arch)

    def _check_image(self, x, name):
        a = self.arch
        expected = (a.in_channels, a.image_size, a.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeMismatch(f"{name}: expected N x {expected}, got {tuple(x.shape)}")

    def _check_latent(self, z):
        a = self.arch
        expected = (a.c_z, a.image_size // 4, a.image_size // 4)
        if z.dim() != 4 or tuple(z.shape[1:]) != expected:
            raise ShapeMismatch(f"z: expected N x {expected}, got {tuple(z.shape)}")

    def encode(self, pre, post):
        self._check_image(pre, "pre")
        self._check_image(post, "post")
        return self.encoder(pre, post)

    def decode_conditional(self, pre, z):
        self._check_image(pre, "pre")
        self._check_latent(z)
        if pre.shape[0] != z.shape[0]:
            raise ShapeMismatch("pre and z batch sizes differ")
        return self.decoder(pre, z)

    def decode_adversarial(self, z):
        self._check_latent(z)
        return self.adversary(z)

    def forward(self, pre, post):
        """Return ``(z, x_hat, x_breve)``."""
        z = self.encode(pre, post)
        return z, self.decode_conditional(pre, z), self.decode_adversarial(z)

    def main_parameters(self):
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    def adversary_parameters(self):
        return list(self.adversary.parameters())


def _fan_in_uniform_(module: nn.Module, generator: torch.Generator):
    # He-uniform: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)) weights, zero biases
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            w = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = w.shape[0] * w[0, 0].numel()
            else:
                fan_in = w[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def init_de(arch: DEArchConfig, seed: int = 0) -> DifferenceEmbedding:
    """Build a DE with fan-in-scaled uniform initialisation drawn from ``seed``."""
    arch.validate()
    de = DifferenceEmbedding(arch)
    _fan_in_uniform_(de, torch.Generator().manual_seed(int(seed)))
    return de
