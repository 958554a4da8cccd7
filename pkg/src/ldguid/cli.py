"""``ldguid`` command line: synth, pretrain, train, eval, sweep-beta, report.

Configuration precedence is flags > ``--config`` TOML file > built-in
defaults. The file holds ``[synth]``, ``[de]``, ``[backbone]``, ``[train]``
and ``[data]`` sections; top-level keys belong to ``[train]``. Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import dataio, evalkit, trainer
from .backbones import BackboneArchConfig, predict_mask
from .dataio import SynthConfig
from .de import DEArchConfig
from .errors import LDGuidError, MissingDE, ParseError, UnknownKey
from .trainer import TrainConfig

log = logging.getLogger("ldguid")


@dataclasses.dataclass(frozen=True)
class DataConfig:
    """Input preprocessing applied identically at train and eval time."""

    nbr: bool = False
    nir_channel: int = dataio.S2_NIR
    swir_channel: int = dataio.S2_SWIR
    normalize: bool = True


SECTIONS = {
    "synth": SynthConfig,
    "de": DEArchConfig,
    "backbone": BackboneArchConfig,
    "train": TrainConfig,
    "data": DataConfig,
}
# file/flag spelling -> dataclass field
_ALIASES = {("train", "lambda"): "lambda_"}
_HIDDEN = {"lambda_"}


@dataclasses.dataclass
class ResolvedConfig:
    synth: SynthConfig
    de: DEArchConfig
    backbone: BackboneArchConfig
    train: TrainConfig
    data: DataConfig

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            if name == "train":
                d["lambda"] = d.pop("lambda_")
            out[name] = d
        return out


def _coerce(section, key, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ParseError(f"[{section}] {key}: expected a boolean, got {value!r}")
    if isinstance(default, tuple) and all(isinstance(d, str) for d in default):
        items = value.split(",") if isinstance(value, str) else list(value)
        return tuple(str(v) for v in items)
    if isinstance(default, tuple):
        items = value.split(",") if isinstance(value, str) else list(value)
        if len(items) != len(default):
            raise ParseError(f"[{section}] {key}: expected {len(default)} values, got {value!r}")
        return tuple(_coerce(section, key, v, d) for v, d in zip(items, default))
    for typ in (int, float):
        if isinstance(default, typ) and not isinstance(default, bool):
            try:
                out = typ(value)
            except (TypeError, ValueError):
                raise ParseError(f"[{section}] {key}: expected {typ.__name__}, got {value!r}") from None
            if typ is int and isinstance(value, float) and value != out:
                raise ParseError(f"[{section}] {key}: expected int, got {value!r}")
            return out
    return str(value)


def _layer(section, mapping, defaults, where):
    cls = SECTIONS[section]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, value in mapping.items():
        name = _ALIASES.get((section, key), key)
        if name not in fields or key in _HIDDEN:
            raise UnknownKey(f"{where}: unknown key {key!r} in [{section}]")
        out[name] = _coerce(section, key, value, defaults[name])
    return out


def read_config_file(path) -> dict:
    """Parse a TOML config into ``{section: {key: value}}``."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: cannot read config ({exc.strerror})") from exc
    out = {name: {} for name in SECTIONS}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in SECTIONS:
                raise UnknownKey(f"{path}: unknown section [{key}]")
            out[key].update(value)
        else:
            out["train"][key] = value
    return out


def resolve_config(file=None, flags=None, defaults: ResolvedConfig | None = None) -> ResolvedConfig:
    """Merge defaults, a config file and explicit flags (highest precedence).

    ``file`` is a path or an already-parsed ``{section: {key: value}}`` map;
    ``flags`` maps ``"section.key"`` (or a bare train key) to a value.
    """
    base = defaults or ResolvedConfig(*(cls() for cls in SECTIONS.values()))
    file_map = read_config_file(file) if isinstance(file, (str, Path)) else (file or {})
    flag_map = {name: {} for name in SECTIONS}
    for dotted, value in (flags or {}).items():
        if value is None:
            continue
        section, _, key = dotted.rpartition(".")
        section = section or "train"
        if section not in SECTIONS:
            raise UnknownKey(f"unknown config section {section!r} in {dotted!r}")
        flag_map[section][key] = value

    resolved = {}
    for name, cls in SECTIONS.items():
        current = dataclasses.asdict(getattr(base, name))
        current.update(_layer(name, file_map.get(name, {}), current, str(file)))
        current.update(_layer(name, flag_map[name], current, "flags"))
        try:
            resolved[name] = cls(**current)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"[{name}] {exc}") from exc
    return ResolvedConfig(**resolved)


# ---------------------------------------------------------------------------
# argument parsing


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pair(text):
    vals = _float_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return tuple(vals)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ldguid", description="Latent difference guidance for change detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p, seed=True, epochs=True):
        p.add_argument("--config", type=Path, help="TOML config file")
        if seed:
            p.add_argument("--seed", type=int, help="random seed")
        if epochs:
            p.add_argument("--epochs", type=int, help="training epochs")

    p = sub.add_parser("synth", help="write a synthetic change-detection dataset")
    p.add_argument("--out", type=Path, required=True, help="output dataset directory")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--size", type=int, help="image side length in pixels")
    p.add_argument("--nuisance", type=_pair, metavar="LO,HI", help="brightness shift range")
    common(p, epochs=False)

    p = sub.add_parser("pretrain", help="pretrain the difference-embedding module")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--beta", type=float, help="adversarial weight")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint")
    p.add_argument("--split", default="train", help="split to train on (default: train)")
    common(p)

    p = sub.add_parser("train", help="train a change-detection backbone")
    p.add_argument("--data", type=Path, help="dataset directory")
    p.add_argument("--backbone", choices=["unet", "bit"], help="backbone architecture")
    p.add_argument("--de", type=Path, help="pretrained DE checkpoint")
    p.add_argument("--de-mode", choices=["frozen", "finetune"], help="keep the DE frozen or finetune it")
    p.add_argument("--input-mode", choices=["post_only", "full_concat"], help="backbone image inputs")
    p.add_argument("--lambda", dest="lambda_", type=float, help="DE loss weight in finetune mode")
    p.add_argument("--beta", type=float, help="adversarial weight in finetune mode")
    p.add_argument("--k", type=int, help="DE update period in finetune mode")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--out", type=Path, help="output checkpoint")
    p.add_argument("--split", default="train", help="training split (default: train)")
    p.add_argument("--val-split", default="val", help="validation split (default: val)")
    common(p)

    p = sub.add_parser("eval", help="evaluate trained checkpoints, one per seed")
    p.add_argument("--ckpt", type=Path, nargs="+", required=True, help="checkpoint(s) from train")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--report", type=Path, required=True, help="output JSON report")
    p.add_argument("--maps", type=Path, help="write error maps of the first checkpoint here")
    p.add_argument("--baseline-report", type=Path, help="baseline report for the p-value")
    p.add_argument("--split", default="test", help="evaluation split (default: test)")
    p.add_argument("--method", help="method name (default: derived from the checkpoint)")
    p.add_argument("--dataset-name", help="dataset name in the report (default: directory name)")

    p = sub.add_parser("sweep-beta", help="pretrain one DE per beta and tabulate final losses")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--betas", type=_float_list, required=True, help="comma-separated betas")
    p.add_argument("--out", type=Path, required=True, help="output CSV")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--split", default="train", help="split to train on (default: train)")
    common(p)

    p = sub.add_parser("report", help="aggregate eval reports into a table")
    p.add_argument("--inputs", type=Path, nargs="+", required=True, help="eval report JSON files")
    p.add_argument("--table", type=Path, required=True, help="output CSV")
    return parser


# ---------------------------------------------------------------------------
# shared helpers


def _echo_config(cfg: ResolvedConfig, command, extra=None):
    payload = {"command": command, "config": cfg.to_dict(), **(extra or {})}
    print("resolved config: " + json.dumps(payload, sort_keys=True), flush=True)


def _prepare(samples, data_cfg: DataConfig, stats=None):
    """Apply NBR and standardization; returns ``(samples, stats)``."""
    if data_cfg.nbr:
        samples = [dataio.nbr_sample(s, data_cfg.nir_channel, data_cfg.swir_channel) for s in samples]
    if data_cfg.normalize:
        if stats is None:
            stats = dataio.channel_stats(samples)
        samples = [dataio.normalize_sample(s, stats) for s in samples]
    return samples, stats


def _stats_to_meta(stats):
    return None if stats is None else {"mean": list(stats.mean), "std": list(stats.std)}


def _stats_from_meta(meta):
    return None if not meta else dataio.ChannelStats(tuple(meta["mean"]), tuple(meta["std"]))


def _load_split(root, split):
    try:
        return dataio.load_dataset(root, split)
    except KeyError as exc:
        raise LDGuidError(f"{root}: {exc.args[0]}") from None


def _flags(args, **mapping):
    return {dotted: getattr(args, attr, None) for dotted, attr in mapping.items()}


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    flags = _flags(args, **{"synth.seed": "seed", "synth.n_samples": "n",
                            "synth.image_size": "size", "synth.nuisance_brightness_range": "nuisance"})
    cfg = resolve_config(args.config, flags)
    _echo_config(cfg, "synth")
    data = dataio.generate_synthetic(cfg.synth)
    ids = [s.id for s in data.samples]
    splits = dataio.split_ids(ids, seed=cfg.synth.seed)
    dataio.write_dataset(args.out, data.samples, splits=splits, nuisance=data.nuisance)
    with open(Path(args.out) / "provenance.json", "w") as fh:
        json.dump({"command": "synth", "config": cfg.to_dict()}, fh, indent=1, sort_keys=True)
    print(f"wrote {len(ids)} samples to {args.out}")


def _pretrain_inputs(args, cfg):
    samples = _load_split(args.data, args.split)
    if not samples:
        raise LDGuidError(f"{args.data}: split {args.split!r} is empty")
    samples, stats = _prepare(samples, cfg.data)
    channels, size = samples[0].pre.channels, samples[0].pre.shape[0]
    arch = dataclasses.replace(cfg.de, in_channels=channels, image_size=size)
    return samples, stats, arch


def cmd_pretrain(args):
    flags = _flags(args, beta="beta", seed="seed", epochs="epochs", learning_rate="lr")
    cfg = resolve_config(args.config, flags)
    _echo_config(cfg, "pretrain", {"data": str(args.data)})
    samples, stats, arch = _pretrain_inputs(args, cfg)
    de, history = trainer.pretrain_de(samples, arch, cfg.train)
    provenance = {"dataset": str(args.data), "dataset_hash": dataio.dataset_hash(samples),
                  "split": args.split, "epoch": len(history), "seed": cfg.train.seed}
    ckpt = trainer.make_checkpoint(de, config=cfg.train, provenance=provenance,
                                   extra={"resolved_config": cfg.to_dict(), "history": history.records,
                                          "norm_stats": _stats_to_meta(stats)})
    trainer.save_checkpoint(ckpt, args.out)
    last = history.last()
    print(f"final rec_loss={last['rec_loss']!r} adv_loss={last['adv_loss']!r}; wrote {args.out}")


def cmd_train(args):
    flags = _flags(args, **{"seed": "seed", "epochs": "epochs", "learning_rate": "lr",
                            "lambda": "lambda_", "beta": "beta", "de_update_period_k": "k",
                            "de_mode": "de_mode", "backbone.kind": "backbone",
                            "backbone.input_mode": "input_mode"})
    cfg = resolve_config(args.config, flags)
    _echo_config(cfg, "train", {"data": str(args.data) if args.data else None,
                                "de": str(args.de) if args.de else None})

    de = stats = None
    data_cfg = cfg.data
    if args.de is not None:
        de_ckpt = trainer.load_checkpoint(args.de)
        de = trainer.de_from_checkpoint(de_ckpt)
        stats = _stats_from_meta(de_ckpt.meta.get("norm_stats"))
        de_data = de_ckpt.meta.get("resolved_config", {}).get("data")
        if de_data:
            data_cfg = DataConfig(**de_data)
    elif cfg.train.de_mode == "finetune":
        raise MissingDE("train: --de-mode finetune requires a pretrained DE (--de)")
    missing = [f"--{n}" for n in ("data", "out") if getattr(args, n) is None]
    if missing:
        raise UsageError(f"train: missing required flag(s) {' '.join(missing)}")

    samples, stats = _prepare(_load_split(args.data, args.split), data_cfg, stats)
    if not samples:
        raise LDGuidError(f"{args.data}: split {args.split!r} is empty")
    val = None
    if (Path(args.data) / "splits.json").is_file():
        splits = json.loads((Path(args.data) / "splits.json").read_text())
        if splits.get(args.val_split):
            val, _ = _prepare(_load_split(args.data, args.val_split), data_cfg, stats)
    arch = dataclasses.replace(cfg.backbone, in_channels=samples[0].pre.channels,
                               image_size=samples[0].pre.shape[0])
    backbone, de, history = trainer.train_segmenter(samples, arch, de, cfg.train, val_dataset=val)
    provenance = {"dataset": str(args.data), "dataset_hash": dataio.dataset_hash(samples),
                  "split": args.split, "epoch": len(history), "seed": cfg.train.seed,
                  "de_checkpoint": str(args.de) if args.de else None}
    resolved = cfg.to_dict()
    resolved["data"] = dataclasses.asdict(data_cfg)
    ckpt = trainer.make_checkpoint(de, backbone, cfg.train, provenance=provenance,
                                   extra={"resolved_config": resolved, "history": history.records,
                                          "norm_stats": _stats_to_meta(stats)})
    trainer.save_checkpoint(ckpt, args.out)
    print(f"final seg_loss={history.last()['seg_loss']!r}; wrote {args.out}")


def _method_name(ckpt):
    kind = ckpt.meta["backbone_arch"]["kind"]
    return f"ldguid-{kind}" if ckpt.meta.get("de_arch") else kind


def cmd_eval(args):
    print("resolved config: " + json.dumps({"command": "eval", "ckpt": [str(p) for p in args.ckpt],
                                            "data": str(args.data), "split": args.split}), flush=True)
    raw = _load_split(args.data, args.split)
    if not raw:
        raise LDGuidError(f"{args.data}: split {args.split!r} is empty")
    seeds, ious, f1s, methods, configs = [], [], [], set(), []
    for i, path in enumerate(args.ckpt):
        ckpt = trainer.load_checkpoint(path)
        backbone = trainer.backbone_from_checkpoint(ckpt)
        de = trainer.de_from_checkpoint(ckpt) if ckpt.meta.get("de_arch") else None
        data_cfg = DataConfig(**ckpt.meta.get("resolved_config", {}).get("data", {}))
        samples, _ = _prepare(raw, data_cfg, _stats_from_meta(ckpt.meta.get("norm_stats")))
        iou_v, f1_v = trainer.evaluate_iou_f1(backbone, samples, de)
        seeds.append(ckpt.meta["train_config"]["seed"])
        ious.append(iou_v)
        f1s.append(f1_v)
        methods.add(_method_name(ckpt))
        configs.append({"checkpoint": str(path), "resolved_config": ckpt.meta.get("resolved_config"),
                        "provenance": ckpt.meta.get("provenance")})
        if i == 0 and args.maps is not None:
            args.maps.mkdir(parents=True, exist_ok=True)
            pred = predict_mask(trainer.predict(backbone, samples, de)).numpy()
            for s, p in zip(samples, pred):
                evalkit.save_error_map(args.maps / f"{s.id}.png", p, s.mask.data)
    if args.method is None and len(methods) > 1:
        raise UsageError(f"eval: checkpoints mix methods {sorted(methods)}; pass --method")
    report = evalkit.MetricsReport(
        method=args.method or methods.pop(),
        dataset=args.dataset_name or Path(args.data).resolve().name,
        seeds=seeds,
        per_seed={"iou": ious, "f1": f1s},
        config={"split": args.split, "checkpoints": configs,
                "empty_mask_convention": "IoU = F1 = 1 when prediction and ground truth are both empty"},
    )
    if args.baseline_report is not None:
        report.compare_to(evalkit.MetricsReport.load(args.baseline_report))
    report.save(args.report)
    d = report.to_dict()
    print(f"{d['method']}: IoU {100 * d['mean_iou']:.2f} +- {100 * d['std_iou']:.2f}, "
          f"F1 {100 * d['mean_f1']:.2f} +- {100 * d['std_f1']:.2f}, p={d['p_value']}; wrote {args.report}")


def cmd_sweep(args):
    flags = _flags(args, seed="seed", epochs="epochs", learning_rate="lr")
    cfg = resolve_config(args.config, flags)
    _echo_config(cfg, "sweep-beta", {"betas": args.betas, "data": str(args.data)})
    if any(b < 0 for b in args.betas):
        raise UsageError("sweep-beta: betas must be nonnegative")
    samples, _, arch = _pretrain_inputs(args, cfg)
    rows = evalkit.beta_sweep(samples, arch, args.betas, cfg.train)
    provenance = {
        "config": cfg.to_dict(), "dataset": str(args.data), "split": args.split,
        "dataset_hash": dataio.dataset_hash(samples),
        "paper_reference": {repr(b): v for b, v in evalkit.PAPER_BETA_REFERENCE.items()},
    }
    evalkit.write_sweep_csv(args.out, rows, provenance=provenance)
    for r in rows:
        print(f"beta={r['beta']!r} rec_loss={r['rec_loss']!r} adv_loss={r['adv_loss']!r}")


def cmd_report(args):
    print("resolved config: " + json.dumps({"command": "report", "inputs": [str(p) for p in args.inputs]}),
          flush=True)
    try:
        reports = [evalkit.MetricsReport.load(p) for p in args.inputs]
    except (KeyError, json.JSONDecodeError) as exc:
        raise LDGuidError(f"malformed report ({exc})") from exc
    evalkit.write_table_csv(args.table, reports, provenance={"inputs": [str(p) for p in args.inputs]})
    for r in evalkit.format_table(reports):
        print(f"{r['dataset']:<16} {r['method']:<16} IoU {r['iou']:<18} F1 {r['f1']:<18} p={r['p_value']}")


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-beta": cmd_sweep,
    "report": cmd_report,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (LDGuidError, OSError, ValueError) as exc:
        print("error: " + json.dumps({"command": args.command, "type": type(exc).__name__,
                                      "message": str(exc)}), file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
