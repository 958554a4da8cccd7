"""Desk-scale segmentation backbones (U-Net, BIT-style) and latent-difference injection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataio import ChangeMask
from .errors import InvalidArch, ModeMismatch, ShapeMismatch

INPUT_MODES = ("post_only", "full_concat")
INJECT_MODES = ("input_concat", "bottleneck_concat")


@dataclass(frozen=True)
class BackboneArchConfig:
    kind: str = "unet"
    in_channels: int = 3
    base_width: int = 16
    depth: int = 3
    token_count: int = 4
    transformer_dim: int = 32
    transformer_layers: int = 1
    input_mode: str = "full_concat"
    c_z: int = 0  # latent channels injected; 0 means no injection
    image_size: int = 32

    def validate(self):
        if self.kind not in ("unet", "bit"):
            raise InvalidArch(f"unknown backbone kind {self.kind!r}")
        if self.input_mode not in INPUT_MODES:
            raise InvalidArch(f"unknown input_mode {self.input_mode!r}")
        for name in ("in_channels", "base_width", "depth", "token_count",
                     "transformer_dim", "transformer_layers", "image_size"):
            if int(getattr(self, name)) < 1:
                raise InvalidArch(f"{name} must be >= 1")
        if self.c_z < 0:
            raise InvalidArch("c_z must be >= 0")
        if self.kind == "unet" and 2 ** self.depth > self.image_size:
            raise InvalidArch(f"depth {self.depth} exceeds log2(image_size={self.image_size})")
        if self.kind == "bit" and self.image_size % 4:
            raise InvalidArch("bit backbone needs image_size divisible by 4")

    def to_dict(self):
        return asdict(self)


def inject(features, z, mode="input_concat"):
    """Resize ``z`` bilinearly to the spatial size of ``features`` and append it channelwise.

    The original feature channels pass through unchanged.
    """
    if mode not in INJECT_MODES:
        raise ValueError(f"unknown injection mode {mode!r}")
    if features.shape[0] != z.shape[0]:
        raise ShapeMismatch("features and z batch sizes differ")
    size = tuple(features.shape[-2:])
    if tuple(z.shape[-2:]) != size:
        z = F.interpolate(z, size=size, mode="bilinear", align_corners=False)
    return torch.cat([features, z.to(features.dtype)], dim=1)


def predict_mask(logits) -> torch.Tensor:
    """Per-pixel argmax over the two classes; ties go to class 0 (no change)."""
    return (logits[:, 1] > logits[:, 0]).to(torch.uint8)


def predict_change_masks(logits) -> list[ChangeMask]:
    return [ChangeMask(m.cpu().numpy()) for m in predict_mask(logits)]


def _double_conv(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.ReLU(),
    )


class _Backbone(nn.Module):
    def __init__(self, arch: BackboneArchConfig):
        super().__init__()
        arch.validate()
        self.arch = arch
        # latent standardisation (per-channel buffers), fitted by the trainer; identity until then
        self.register_buffer("z_mean", torch.zeros(arch.c_z))
        self.register_buffer("z_std", torch.ones(arch.c_z))

    @property
    def uses_z(self):
        return self.arch.c_z > 0

    def set_latent_stats(self, mean, std):
        with torch.no_grad():
            self.z_mean.copy_(torch.as_tensor(mean, dtype=self.z_mean.dtype))
            self.z_std.copy_(torch.as_tensor(std, dtype=self.z_std.dtype).clamp_min(1e-8))

    def _standardize(self, z):
        return (z - self.z_mean.view(1, -1, 1, 1)) / self.z_std.view(1, -1, 1, 1)

    def _check_inputs(self, pre, post, z):
        a = self.arch
        if post.dim() != 4 or post.shape[1] != a.in_channels:
            raise ShapeMismatch(f"post must be N x {a.in_channels} x H x W, got {tuple(post.shape)}")
        if pre is not None and pre.shape != post.shape:
            raise ShapeMismatch(f"pre {tuple(pre.shape)} and post {tuple(post.shape)} differ")
        if self.uses_z and z is None:
            raise ModeMismatch("this backbone was built for injection but no z was given")
        if not self.uses_z and z is not None:
            raise ModeMismatch("z given to a backbone built without injection (c_z=0)")
        if z is not None and z.shape[1] != a.c_z:
            raise ShapeMismatch(f"z has {z.shape[1]} channels, backbone expects {a.c_z}")


class UNet(_Backbone):
    """Encoder-decoder with skip connections; ``z`` is appended to the input image."""

    def __init__(self, arch: BackboneArchConfig):
        super().__init__(arch)
        img_ch = arch.in_channels * (2 if arch.input_mode == "full_concat" else 1)
        widths = [arch.base_width * 2 ** i for i in range(arch.depth + 1)]
        self.down = nn.ModuleList()
        ch = img_ch + arch.c_z
        for w in widths[:-1]:
            self.down.append(_double_conv(ch, w))
            ch = w
        self.bottom = _double_conv(ch, widths[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w_skip, w_in in zip(reversed(widths[:-1]), reversed(widths[1:])):
            self.up.append(nn.ConvTranspose2d(w_in, w_skip, 2, stride=2))
            self.dec.append(_double_conv(2 * w_skip, w_skip))
        self.head = nn.Conv2d(widths[0], 2, 1)

    def forward(self, pre, post, z=None):
        self._check_inputs(pre if self.arch.input_mode == "full_concat" else None, post, z)
        if self.arch.input_mode == "full_concat":
            if pre is None:
                raise ModeMismatch("full_concat needs the pre image")
            x = torch.cat([pre, post], dim=1)
        else:
            x = post
        d = 2 ** self.arch.depth
        if x.shape[-1] % d or x.shape[-2] % d:
            raise ShapeMismatch(f"input size {tuple(x.shape[-2:])} not divisible by {d}")
        if z is not None:
            x = inject(x, self._standardize(z), "input_concat")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


class BITLite(_Backbone):
    """Minimal bitemporal image transformer.

    Shared CNN to 1/4 resolution, optional bottleneck injection of ``z`` on both
    temporal branches, spatial-attention semantic tokenizer, transformer encoder
    over the joint token set, token re-projection onto each feature map, then a
    head on the absolute feature difference upsampled to input resolution.
    """

    def __init__(self, arch: BackboneArchConfig):
        super().__init__(arch)
        w, d = arch.base_width, arch.transformer_dim
        self.cnn = nn.Sequential(
            nn.Conv2d(arch.in_channels, w, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.feat_channels = 2 * w
        # the only layer that sees the concatenated z channels
        self.tokenizer_in = nn.Conv2d(self.feat_channels + arch.c_z, d, 1)
        self.token_attn = nn.Conv2d(d, arch.token_count, 1)
        self.pos_embedding = nn.Parameter(torch.zeros(2 * arch.token_count, d))
        self.transformer = nn.ModuleList(
            [_EncoderLayer(d) for _ in range(arch.transformer_layers)]
        )
        self.reproject = _CrossAttention(d)
        self.head = nn.Sequential(
            nn.Conv2d(d, d, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(d, 2, 3, padding=1),
        )

    def tokenize(self, feat):
        a = self.token_attn(feat).flatten(2).softmax(dim=-1)  # N x L x HW
        return torch.einsum("nlp,ndp->nld", a, feat.flatten(2))

    def forward(self, pre, post, z=None):
        self._check_inputs(pre, post, z)
        if pre is None:
            raise ModeMismatch("bit backbone needs both images")
        h, w = post.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeMismatch(f"input size {(h, w)} not divisible by 4")
        feats = []
        if z is not None:
            z = self._standardize(z)
        for x in (pre, post):
            f = self.cnn(x)
            if z is not None:
                f = inject(f, z, "bottleneck_concat")
            feats.append(self.tokenizer_in(f))
        L = self.arch.token_count
        tokens = torch.cat([self.tokenize(f) for f in feats], dim=1) + self.pos_embedding
        for layer in self.transformer:
            tokens = layer(tokens)
        refined = [
            self.reproject(f, tokens[:, i * L:(i + 1) * L]) for i, f in enumerate(feats)
        ]
        diff = torch.abs(refined[0] - refined[1])
        return F.interpolate(self.head(diff), size=(h, w), mode="bilinear", align_corners=False)


class _EncoderLayer(nn.Module):
    # pre-norm single-head self-attention + MLP, no dropout
    def __init__(self, d):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.ReLU(), nn.Linear(2 * d, d))

    def forward(self, x):
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        att = (q @ k.transpose(1, 2) / math.sqrt(q.shape[-1])).softmax(dim=-1)
        x = x + self.proj(att @ v)
        return x + self.mlp(self.norm2(x))


class _CrossAttention(nn.Module):
    """Pixels of a feature map attend to a token set; residual update of the map."""

    def __init__(self, d):
        super().__init__()
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)

    def forward(self, feat, tokens):
        n, d, h, w = feat.shape
        pix = feat.flatten(2).transpose(1, 2)  # N x HW x D
        att = (self.q(pix) @ self.k(tokens).transpose(1, 2) / math.sqrt(d)).softmax(dim=-1)
        out = pix + att @ self.v(tokens)
        return out.transpose(1, 2).reshape(n, d, h, w)


def build_backbone(arch: BackboneArchConfig, seed: int = 0) -> _Backbone:
    """Instantiate a backbone with seeded init: He-uniform convs, fan-in uniform linears, zero biases."""
    cls = UNet if arch.kind == "unet" else BITLite
    gen = torch.Generator().manual_seed(int(seed))
    model = cls(arch)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = m.weight
            fan_in = w.shape[0] * w[0, 0].numel() if isinstance(m, nn.ConvTranspose2d) else w[0].numel()
            gain = 1.0 if isinstance(m, nn.Linear) else math.sqrt(6.0)
            with torch.no_grad():
                w.uniform_(-gain / math.sqrt(fan_in), gain / math.sqrt(fan_in), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
    if isinstance(model, BITLite):
        with torch.no_grad():
            model.pos_embedding.normal_(0.0, 0.02, generator=gen)
    return model


def unet_forward(model: UNet, pre, post, z=None):
    return model(pre, post, z)


def bit_forward(model: BITLite, pre, post, z=None):
    return model(pre, post, z)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_shapes(model: nn.Module) -> dict[str, tuple[int, ...]]:
    return {k: tuple(v.shape) for k, v in model.named_parameters()}
