"""Training loops for the DE module and the segmentation backbones, and checkpoint persistence."""

from __future__ import annotations

import base64
import contextlib
import dataclasses
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbones import BackboneArchConfig, build_backbone, predict_mask
from .dataio import BitemporalSample, stack_samples
from .de import DEArchConfig, DifferenceEmbedding, init_de
from .errors import (
    CheckpointError,
    CorruptChecksum,
    EmptyDataset,
    InvalidArch,
    MissingDE,
    NonFiniteLoss,
    VersionMismatch,
)
from .objectives import adversary_loss, de_loss, reconstruction_loss, segmentation_loss, total_loss

log = logging.getLogger(__name__)

DESK_EPOCHS = 50


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.5
    lambda_: float = 0.1
    learning_rate: float = 1e-4
    epochs: int = 200
    batch_size: int = 8
    de_update_period_k: int = 5
    de_mode: str = "frozen"
    adversary_steps_per_main_step: int = 1
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.de_update_period_k < 1:
            raise ValueError("de_update_period_k must be >= 1")
        if self.adversary_steps_per_main_step < 0:
            raise ValueError("adversary_steps_per_main_step must be >= 0")
        if self.beta < 0 or self.lambda_ < 0:
            raise ValueError("beta and lambda must be nonnegative")
        if self.de_mode not in ("frozen", "finetune"):
            raise ValueError(f"unknown de_mode {self.de_mode!r}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)

    def append(self, record):
        for k, v in record.items():
            if v is not None and not math.isfinite(v):
                raise NonFiniteLoss(f"non-finite {k} in epoch record", epoch=len(self.records))
        self.records.append(dict(record))

    def column(self, key):
        return [r[key] for r in self.records]

    def __len__(self):
        return len(self.records)

    def last(self):
        return self.records[-1]


def _adam(params, lr):
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


@contextlib.contextmanager
def _frozen(params):
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad_(s)


def _batches(n, batch_size, gen):
    order = torch.randperm(n, generator=gen).tolist()
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(value, what, epoch, batch):
    if not torch.isfinite(value):
        raise NonFiniteLoss(f"{what} became non-finite at epoch {epoch}, batch {batch}", epoch, batch)


def _emit(hook, event, **info):
    if hook is not None:
        hook(event, info)


def adversary_step(de: DifferenceEmbedding, opt, pre, post):
    """One update of the adversarial decoder toward reconstructing ``post`` from ``z``."""
    with torch.no_grad():
        z = de.encode(pre, post)
    with _frozen(de.main_parameters()):
        loss = adversary_loss(de.decode_adversarial(z), post)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return loss.detach()


def pretrain_de(
    dataset: Sequence[BitemporalSample],
    arch: DEArchConfig,
    config: TrainConfig,
    hook: Callable | None = None,
    de: DifferenceEmbedding | None = None,
):
    """Pretrain the DE by alternating adversary and encoder/decoder updates.

    Per batch the adversary takes ``adversary_steps_per_main_step`` steps on
    its own reconstruction loss with the encoder/decoder frozen; then the
    encoder/decoder take one step on the bottleneck loss with the adversary
    frozen. Returns ``(de, history)``.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot pretrain on an empty dataset")
    if de is None:
        de = init_de(arch, config.seed)
    pre_all, post_all, _ = stack_samples(dataset)
    gen = torch.Generator().manual_seed(config.seed)
    opt_adv = _adam(de.adversary_parameters(), config.learning_rate)
    opt_main = _adam(de.main_parameters(), config.learning_rate)
    history = TrainHistory()
    de.train()
    for epoch in range(config.epochs):
        sums = np.zeros(3)
        count = 0
        for b, idx in enumerate(_batches(len(dataset), config.batch_size, gen)):
            pre, post = pre_all[idx], post_all[idx]
            for _ in range(config.adversary_steps_per_main_step):
                adv = adversary_step(de, opt_adv, pre, post)
                _check_finite(adv, "adversary loss", epoch, b)
                _emit(hook, "adversary_step", de=de, epoch=epoch, batch=b)

            with _frozen(de.adversary_parameters()):
                _, x_hat, x_breve = de(pre, post)
                rec = reconstruction_loss(x_hat, post)
                adv = adversary_loss(x_breve, post)
                loss = rec - config.beta * adv if config.beta else rec
                _check_finite(loss, "DE loss", epoch, b)
                opt_main.zero_grad(set_to_none=True)
                loss.backward()
                opt_main.step()
            _emit(hook, "main_step", de=de, epoch=epoch, batch=b)

            n = len(idx)
            sums += n * np.array([rec.item(), adv.item(), loss.item()])
            count += n
        rec_m, adv_m, de_m = sums / count
        history.append({"epoch": epoch, "rec_loss": rec_m, "adv_loss": adv_m, "de_loss": de_m})
        log.debug("pretrain epoch %d rec=%.4g adv=%.4g", epoch, rec_m, adv_m)
    de.eval()
    return de, history


def _confusion_totals(pred, gt):
    pred, gt = pred.bool(), gt.bool()
    tp = int((pred & gt).sum())
    fp = int((pred & ~gt).sum())
    fn = int((~pred & gt).sum())
    return tp, fp, fn


@torch.no_grad()
def predict(backbone, dataset, de=None, batch_size=32):
    """Logits for every sample, computed in batches."""
    backbone.eval()
    out = []
    pre_all, post_all, _ = stack_samples(dataset)
    for i in range(0, len(dataset), batch_size):
        pre, post = pre_all[i:i + batch_size], post_all[i:i + batch_size]
        z = de.encode(pre, post) if de is not None else None
        out.append(backbone(pre, post, z))
    return torch.cat(out)


def evaluate_iou_f1(backbone, dataset, de=None):
    """Dataset-level IoU and F1 of the change class (counts pooled over all pixels)."""
    _, _, masks = stack_samples(dataset)
    pred = predict_mask(predict(backbone, dataset, de))
    tp, fp, fn = _confusion_totals(pred, masks)
    denom = tp + fp + fn
    if denom == 0:
        return 1.0, 1.0
    return tp / denom, 2 * tp / (2 * tp + fp + fn)


def train_segmenter(
    dataset: Sequence[BitemporalSample],
    backbone_arch: BackboneArchConfig,
    de: DifferenceEmbedding | None,
    config: TrainConfig,
    val_dataset: Sequence[BitemporalSample] | None = None,
    hook: Callable | None = None,
):
    """Train a backbone, optionally guided by a DE latent.

    ``de`` absent: baseline training on the segmentation loss.
    With a DE, the backbone standardises ``z`` with the global mean and std
    of the initial DE's latents over ``dataset``.
    ``de_mode="frozen"``: the DE only runs forward without gradients.
    ``de_mode="finetune"``: every step updates the backbone on the total
    loss; every ``de_update_period_k``-th step additionally performs one DE
    cycle (adversary step, then encoder/decoder step on the total loss).
    Returns ``(backbone, de, history)``.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    finetune = config.de_mode == "finetune"
    if finetune and de is None:
        raise MissingDE("de_mode=finetune requires a pretrained DE")
    if de is not None:
        backbone_arch = dataclasses.replace(backbone_arch, c_z=de.arch.c_z)
        if de.arch.in_channels != backbone_arch.in_channels:
            raise InvalidArch("DE and backbone disagree on in_channels")
    elif backbone_arch.c_z:
        backbone_arch = dataclasses.replace(backbone_arch, c_z=0)

    backbone = build_backbone(backbone_arch, config.seed)
    pre_all, post_all, mask_all = stack_samples(dataset)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = _adam(backbone.parameters(), config.learning_rate)
    if finetune:
        opt_adv = _adam(de.adversary_parameters(), config.learning_rate)
        opt_de = _adam(de.main_parameters(), config.learning_rate)
    if de is not None:
        de.eval()
        with torch.no_grad():
            z_all = torch.cat([de.encode(pre_all[i:i + 64], post_all[i:i + 64]) for i in range(0, len(dataset), 64)])
        # one scale for all channels: per-channel scaling inflates near-constant channels
        c_z = z_all.shape[1]
        backbone.set_latent_stats(z_all.mean().expand(c_z), z_all.std().expand(c_z))

    history = TrainHistory()
    step = 0
    de_cycles = 0
    for epoch in range(config.epochs):
        backbone.train()
        sums = np.zeros(5)
        count = 0
        for b, idx in enumerate(_batches(len(dataset), config.batch_size, gen)):
            pre, post, mask = pre_all[idx], post_all[idx], mask_all[idx]
            step += 1
            rec = adv = de_l = torch.zeros(())
            if de is None:
                seg = segmentation_loss(backbone(pre, post), mask)
                loss = seg
            elif not finetune:
                with torch.no_grad():
                    z = de.encode(pre, post)
                seg = segmentation_loss(backbone(pre, post, z), mask)
                loss = seg
            else:
                cycle = step % config.de_update_period_k == 0
                if cycle:
                    adversary_step(de, opt_adv, pre, post)
                    _emit(hook, "adversary_step", de=de, step=step)
                with _frozen(de.adversary_parameters()):
                    z, x_hat, x_breve = de(pre, post)
                    seg = segmentation_loss(backbone(pre, post, z), mask)
                    rec = reconstruction_loss(x_hat, post)
                    adv = adversary_loss(x_breve, post)
                    de_l = de_loss(x_hat, x_breve, post, config.beta)
                    loss = total_loss(seg, de_l, config.lambda_)
                    opt_de.zero_grad(set_to_none=True)
            _check_finite(loss, "training loss", epoch, b)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if finetune and cycle:
                opt_de.step()
                de_cycles += 1
                _emit(hook, "de_cycle", de=de, step=step)
            _emit(hook, "main_step", backbone=backbone, de=de, step=step)

            n = len(idx)
            sums += n * np.array([seg.item(), loss.item(), rec.item(), adv.item(), de_l.item()])
            count += n
        seg_m, tot_m, rec_m, adv_m, de_m = sums / count
        record = {
            "epoch": epoch, "seg_loss": seg_m, "total_loss": tot_m,
            "rec_loss": rec_m, "adv_loss": adv_m, "de_loss": de_m,
            "val_iou": None, "val_f1": None,
        }
        if val_dataset:
            if de is not None:
                de.eval()
            record["val_iou"], record["val_f1"] = evaluate_iou_f1(backbone, val_dataset, de)
        history.append(record)
        log.debug("train epoch %d seg=%.4g", epoch, seg_m)
    backbone.eval()
    history.de_cycles = de_cycles
    return backbone, de, history


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"LDGK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, torch.Tensor]
    format_version: int = FORMAT_VERSION


def save_checkpoint(c: Checkpoint, path):
    """Write ``c`` as: magic, u32 version, u64-prefixed JSON metadata, named f32 tensors, CRC32."""
    parts = [MAGIC, struct.pack("<I", c.format_version)]
    meta = json.dumps(c.meta, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<Q", len(meta)), meta]
    for name, t in c.tensors.items():
        arr = t.detach().cpu().to(torch.float32).numpy()
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    try:
        with open(path, "wb") as fh:
            fh.write(body)
            fh.write(struct.pack("<I", zlib.crc32(body)))
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot write checkpoint ({exc})") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise CorruptChecksum(f"{path}: bad magic bytes, not an LDGK checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: checkpoint format version {version}, this reader supports {FORMAT_VERSION}"
        )
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptChecksum(f"{path}: CRC32 mismatch")
    try:
        off = 8
        (meta_len,) = struct.unpack_from("<Q", body, off)
        off += 8
        meta = json.loads(body[off:off + meta_len].decode("utf-8"))
        off += meta_len
        tensors = {}
        while off < len(body):
            (name_len,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", body, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptChecksum(f"{path}: malformed checkpoint body ({exc})") from exc
    return Checkpoint(meta, tensors, version)


def _optimizer_tensors(opt, prefix):
    out = {}
    for i, state in opt.state_dict()["state"].items():
        for k, v in state.items():
            out[f"{prefix}/{i}/{k}"] = torch.as_tensor(v, dtype=torch.float32)
    return out


def load_optimizer_state(opt, tensors, prefix):
    state = {}
    for name, t in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, i, k = name.rsplit("/", 2)
        state.setdefault(int(i), {})[k] = t.clone()
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


def make_checkpoint(
    de: DifferenceEmbedding | None = None,
    backbone=None,
    config: TrainConfig | None = None,
    optimizers: dict | None = None,
    provenance: dict | None = None,
    extra: dict | None = None,
) -> Checkpoint:
    meta = {
        "de_arch": de.arch.to_dict() if de is not None else None,
        "backbone_arch": backbone.arch.to_dict() if backbone is not None else None,
        "train_config": config.to_dict() if config is not None else None,
        "provenance": provenance or {},
        "rng_state": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii"),
    }
    meta.update(extra or {})
    tensors = {}
    if de is not None:
        tensors.update({f"de/{k}": v for k, v in de.state_dict().items()})
    if backbone is not None:
        tensors.update({f"backbone/{k}": v for k, v in backbone.state_dict().items()})
    for name, opt in (optimizers or {}).items():
        tensors.update(_optimizer_tensors(opt, f"optim/{name}"))
    return Checkpoint(meta, tensors)


def _sub_state(tensors, prefix):
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def de_from_checkpoint(c: Checkpoint) -> DifferenceEmbedding:
    if not c.meta.get("de_arch"):
        raise CheckpointError("checkpoint holds no DE")
    de = DifferenceEmbedding(DEArchConfig(**c.meta["de_arch"]))
    de.load_state_dict(_sub_state(c.tensors, "de/"))
    de.eval()
    return de


def backbone_from_checkpoint(c: Checkpoint):
    if not c.meta.get("backbone_arch"):
        raise CheckpointError("checkpoint holds no backbone")
    model = build_backbone(BackboneArchConfig(**c.meta["backbone_arch"]))
    model.load_state_dict(_sub_state(c.tensors, "backbone/"))
    model.eval()
    return model
