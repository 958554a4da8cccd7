"""Change-detection metrics, multi-seed statistics, error maps, the beta sweep and the nuisance probe."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import stats

from .errors import ShapeMismatch, TooFewSamples

# Table 2 of the reference study (full-scale SVCD runs), kept for reports only.
PAPER_BETA_REFERENCE = {
    0.1: {"rec_loss": 7.40e-6, "adv_loss": 0.330},
    0.5: {"rec_loss": 6.12e-6, "adv_loss": 0.314},
    1.5: {"rec_loss": 6.14e-6, "adv_loss": 0.294},
    5.0: {"rec_loss": 6.74e-5, "adv_loss": 0.311},
}

WHITE = (255, 255, 255)
RED = (255, 0, 0)
GREEN = (0, 255, 0)
BLACK = (0, 0, 0)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other):
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _as_bool(mask):
    data = getattr(mask, "data", mask)
    if torch.is_tensor(data):
        data = data.detach().cpu().numpy()
    return np.asarray(data).astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} and ground truth {g.shape} differ")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def iou(c: ConfusionCounts) -> float:
    """``tp / (tp + fp + fn)``; 1.0 when both masks are empty."""
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def f1(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def significance(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """One-sided Welch t-test p-value for ``mean(a) > mean(b)``.

    When both samples have zero variance the result is 0.5 for equal means,
    otherwise 0 or 1 according to the sign of the difference.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise TooFewSamples("significance needs at least two scores per method")
    diff = a.mean() - b.mean()
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0:
        return 0.5 if diff == 0 else (0.0 if diff > 0 else 1.0)
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return float(stats.t.sf(t, df))


def render_error_map(pred, gt) -> np.ndarray:
    """RGB map: TP white, FN red, FP green, TN black."""
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} and ground truth {g.shape} differ")
    out = np.zeros(p.shape + (3,), dtype=np.uint8)
    out[p & g] = WHITE
    out[~p & g] = RED
    out[p & ~g] = GREEN
    return out


def save_error_map(path, pred, gt):
    Image.fromarray(render_error_map(pred, gt), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# multi-seed reports


@dataclass
class MetricsReport:
    method: str
    dataset: str
    seeds: list[int]
    per_seed: dict = field(default_factory=lambda: {"iou": [], "f1": []})
    baseline: str | None = None
    p_value: float | None = None
    config: dict | None = None
    paper_reference: dict | None = None

    @staticmethod
    def _mean_std(xs):
        xs = np.asarray(xs, dtype=np.float64)
        std = float(xs.std(ddof=1)) if xs.size > 1 else 0.0
        return float(xs.mean()), std

    def to_dict(self):
        mean_iou, std_iou = self._mean_std(self.per_seed["iou"])
        mean_f1, std_f1 = self._mean_std(self.per_seed["f1"])
        out = {
            "method": self.method,
            "dataset": self.dataset,
            "seeds": list(self.seeds),
            "per_seed": {"iou": list(self.per_seed["iou"]), "f1": list(self.per_seed["f1"])},
            "mean_iou": mean_iou,
            "std_iou": std_iou,
            "mean_f1": mean_f1,
            "std_f1": std_f1,
            "baseline": self.baseline,
            "p_value": self.p_value,
        }
        if self.config is not None:
            out["config"] = self.config
        if self.paper_reference is not None:
            out["paper_reference"] = self.paper_reference
        return out

    def compare_to(self, baseline: "MetricsReport"):
        """Set ``p_value`` for this method's IoU exceeding ``baseline``'s."""
        self.baseline = baseline.method
        self.p_value = significance(self.per_seed["iou"], baseline.per_seed["iou"])
        return self.p_value

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(
            method=d["method"], dataset=d["dataset"], seeds=list(d["seeds"]),
            per_seed={"iou": list(d["per_seed"]["iou"]), "f1": list(d["per_seed"]["f1"])},
            baseline=d.get("baseline"), p_value=d.get("p_value"),
            config=d.get("config"), paper_reference=d.get("paper_reference"),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def format_table(reports: Sequence[MetricsReport]) -> list[dict]:
    """Rows of ``mean +- std`` percentages per method, in the order given."""
    rows = []
    for r in reports:
        d = r.to_dict()
        rows.append({
            "dataset": d["dataset"],
            "method": d["method"],
            "iou": f"{100 * d['mean_iou']:.2f} +- {100 * d['std_iou']:.2f}",
            "f1": f"{100 * d['mean_f1']:.2f} +- {100 * d['std_f1']:.2f}",
            "p_value": "" if d["p_value"] is None else repr(d["p_value"]),
            "significant": "" if d["p_value"] is None else str(d["p_value"] < 0.05),
        })
    return rows


def write_table_csv(path, reports, provenance: dict | None = None):
    rows = format_table(reports)
    with open(path, "w", newline="") as fh:
        if provenance is not None:
            fh.write("# " + json.dumps(provenance, sort_keys=True) + "\n")
        writer = csv.DictWriter(
            fh, fieldnames=["dataset", "method", "iou", "f1", "p_value", "significant"]
        )
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# beta sweep


def beta_sweep(dataset, arch, betas: Sequence[float], config) -> list[dict]:
    """Pretrain one DE per beta with identical seed and budget.

    Each row holds the final-epoch mean reconstruction and adversary losses.
    """
    from .trainer import pretrain_de

    if len(betas) == 0:
        raise ValueError("betas must be non-empty")
    rows = []
    for beta in betas:
        if beta < 0:
            raise ValueError(f"beta must be nonnegative, got {beta}")
        cfg = type(config)(**{**config.to_dict(), "beta": float(beta)})
        _, history = pretrain_de(dataset, arch, cfg)
        last = history.last()
        rows.append({"beta": beta, "rec_loss": last["rec_loss"], "adv_loss": last["adv_loss"]})
    return rows


def write_sweep_csv(path, rows, provenance: dict | None = None):
    with open(path, "w", newline="") as fh:
        if provenance is not None:
            fh.write("# " + json.dumps(provenance, sort_keys=True) + "\n")
        fh.write("beta,rec_loss,adv_loss\n")
        for r in rows:
            fh.write(f"{r['beta']!r},{r['rec_loss']!r},{r['adv_loss']!r}\n")


def read_sweep_csv(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [{k: float(v) for k, v in row.items()} for row in reader]


# ---------------------------------------------------------------------------
# nuisance probe


def pool_latents(latents, grid: int = 1) -> np.ndarray:
    """Mean-pool each latent map onto a ``grid x grid`` lattice and flatten."""
    if torch.is_tensor(latents):
        z = latents
    else:
        z = torch.stack([torch.as_tensor(l) for l in latents])
    z = z.detach().to(torch.float64)
    if z.dim() == 3:
        z = z.unsqueeze(0)
    return F.adaptive_avg_pool2d(z, grid).flatten(1).numpy()


def ridge_fit(x, y, ridge):
    x_mean, y_mean = x.mean(0), y.mean()
    xc = x - x_mean
    w = np.linalg.solve(xc.T @ xc + ridge * np.eye(x.shape[1]), xc.T @ (y - y_mean))
    return w, y_mean - x_mean @ w


def nuisance_probe(latents, nuisance_labels, seed: int = 0, ridge: float = 1e-3, grid: int = 1,
                   train_fraction: float = 0.7) -> float:
    """Held-out MSE of a linear ridge regressor from pooled latents to the nuisance label.

    A high error means the latent carries little linearly decodable nuisance.
    """
    y = np.asarray(nuisance_labels, dtype=np.float64)
    n = len(latents)
    if n != y.size:
        raise ShapeMismatch(f"{n} latents but {y.size} labels")
    if n < 20:
        raise TooFewSamples(f"nuisance probe needs >= 20 samples, got {n}")
    x = pool_latents(latents, grid)
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    n_train = int(round(train_fraction * n))
    tr, te = order[:n_train], order[n_train:]
    w, b = ridge_fit(x[tr], y[tr], ridge)
    pred = x[te] @ w + b
    return float(np.mean((pred - y[te]) ** 2))
