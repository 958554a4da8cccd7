"""Scalar objectives for DE pretraining and segmentation, plus a finite-difference gradient checker."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import EmptyBatch, NonFiniteGradient, ShapeMismatch


class ReconstructionMetric(str, enum.Enum):
    MSE = "mse"


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.5
    lambda_: float = 0.1
    reconstruction_metric: ReconstructionMetric = ReconstructionMetric.MSE

    def __post_init__(self):
        for name in ("beta", "lambda_"):
            v = float(getattr(self, name))
            if not (v >= 0 and v != float("inf")):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(a, b, metric=ReconstructionMetric.MSE):
    """Mean squared difference over every element."""
    _same_shape(a, b)
    if ReconstructionMetric(metric) is not ReconstructionMetric.MSE:
        raise ValueError(f"unsupported metric {metric}")
    return torch.mean((a - b) ** 2)


def adversary_loss(x_breve, post):
    """What the adversarial decoder minimizes: its own reconstruction error of ``post``."""
    return reconstruction_loss(x_breve, post)


def de_loss(x_hat, x_breve, post, beta):
    """Bottleneck loss ``L(x_hat, post) - beta * L(x_breve, post)``. May be negative."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    rec = reconstruction_loss(x_hat, post)
    if beta == 0:
        return rec
    return rec - beta * reconstruction_loss(x_breve, post)


def segmentation_loss(logits, mask):
    """Mean per-pixel two-class cross-entropy.

    ``logits`` is ``N x 2 x H x W``, ``mask`` is ``N x H x W`` with values in {0, 1}.
    """
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise ShapeMismatch(f"logits must be N x 2 x H x W, got {tuple(logits.shape)}")
    if mask.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeMismatch(
            f"mask {tuple(mask.shape)} does not match logits {tuple(logits.shape)}"
        )
    # cross_entropy uses log_softmax internally (log-sum-exp stabilised)
    return F.cross_entropy(logits, mask.long())


def total_loss(seg, de, lambda_):
    if lambda_ < 0:
        raise ValueError("lambda must be nonnegative")
    return seg + lambda_ * de


def estimate_risk(de_module, batch, beta):
    """Empirical bottleneck risk: the mean per-sample ``de_loss`` over ``batch``.

    ``batch`` is either a sequence of :class:`~ldguid.dataio.BitemporalSample`
    or a ``(pre, post)`` tensor pair.
    """
    from .dataio import stack_samples

    if isinstance(batch, tuple) and len(batch) == 2 and torch.is_tensor(batch[0]):
        pre, post = batch
    else:
        if len(batch) == 0:
            raise EmptyBatch("cannot estimate risk on an empty batch")
        dtype = next(de_module.parameters()).dtype
        pre, post, _ = stack_samples(batch, dtype=dtype)
    if pre.shape[0] == 0:
        raise EmptyBatch("cannot estimate risk on an empty batch")
    _, x_hat, x_breve = de_module(pre, post)
    per_sample = [
        de_loss(x_hat[i], x_breve[i], post[i], beta) for i in range(pre.shape[0])
    ]
    return torch.stack(per_sample).mean()


def grad_check(
    scalar_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-6,
    n_probes: int = 50,
    seed: int = 0,
) -> float:
    """Compare autograd partials with central differences at randomly chosen entries.

    ``scalar_fn`` takes no arguments and reads ``params`` (tensors that require
    grad). Returns ``max |a - n| / max(|a|, |n|, 1e-8)`` over the probes.
    Parameters are restored exactly afterwards.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValueError("no parameters require grad")

    value = scalar_fn()
    grads = torch.autograd.grad(value, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for g in grads:
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteGradient("analytic gradient contains non-finite values")

    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_probes):
            k = int(torch.multinomial(sizes, 1, generator=gen))
            idx = int(torch.randint(params[k].numel(), (1,), generator=gen))
            flat = params[k].view(-1)
            orig = flat[idx].clone()
            flat[idx] = orig + epsilon
            f_plus = float(scalar_fn())
            flat[idx] = orig - epsilon
            f_minus = float(scalar_fn())
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * epsilon)
            analytic = float(grads[k].view(-1)[idx])
            if not (torch.isfinite(torch.tensor(numeric)) and torch.isfinite(torch.tensor(analytic))):
                raise NonFiniteGradient(f"non-finite derivative at parameter {k}[{idx}]")
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
