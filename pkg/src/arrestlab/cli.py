"""Command-line entry point: ``arrestlab {pretrain,finetune,eval,ardist,embed}``.

Runs are driven by a flat ``key=value`` config (``train.lambda=50``) that can
be overridden with ``--set``.  A run manifest written by ``pretrain`` or
``finetune`` is itself accepted as a config, which reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import subprocess
import sys
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np

from . import data, metrics, models, plotting
from .attacks import AttackSpec, robust_accuracy
from .data import DataError, Dataset
from .metrics import MetricError
from .models import CheckpointError
from .training import (EpochReport, TrainSpec, adversarial_train, arrest_finetune,
                       standard_pretrain)


class ConfigError(ValueError):
    pass


# -- configuration ----------------------------------------------------------------

def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _auto(kind):
    def parse(text: str):
        return None if text.strip().lower() in ("auto", "none", "") else kind(text)
    parse.__name__ = f"auto {kind.__name__}"
    return parse


# key -> (parser, default); values are kept in their textual form
SCHEMA = {
    "data.name": (str, "digits"),
    "data.root": (str, ""),
    "data.per_class": (int, "100"),
    "data.eval_limit": (int, "0"),
    "data.split_seed": (int, "0"),
    "model.arch": (str, "small-cnn"),
    "model.seed": (int, "0"),
    "train.epochs": (_auto(int), "auto"),
    "train.batch_size": (int, "64"),
    "train.lr_schedule": (str, "auto"),
    "train.lr": (_auto(float), "auto"),
    "train.momentum": (float, "0.9"),
    "train.weight_decay": (float, "0.0005"),
    "train.lambda": (_auto(float), "auto"),
    "train.phi_degrees": (float, "30"),
    "train.nr_window": (_auto(int), "auto"),
    "train.kd_variant": (str, "rgkd"),
    "train.distance": (str, "angular"),
    "train.flip": (_bool, "false"),
    "train.strict_nr": (_bool, "false"),
    "train.seed": (int, "0"),
    "attack.epsilon": (float, "0.1"),
    "attack.step_size": (float, "0.025"),
    "attack.steps": (int, "10"),
    "attack.random_start": (_bool, "true"),
    "run.out_dir": (str, "runs"),
    "run.teacher": (str, ""),
    "run.checkpoint": (str, ""),
}


@dataclass
class Config:
    values: dict[str, str]

    def get(self, key: str):
        parser, _ = SCHEMA[key]
        try:
            return parser(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None

    def snapshot(self) -> dict[str, str]:
        return dict(sorted(self.values.items()))


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source} line {lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | None, overrides: list[str]) -> Config:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    given: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        text = p.read_text()
        if p.suffix == ".json" or text.lstrip().startswith("{"):
            try:
                given.update({k: str(v) for k, v in json.loads(text)["config"].items()})
            except (ValueError, KeyError, AttributeError):
                raise ConfigError(f"{path}: not a run manifest") from None
        else:
            given.update(parse_config_text(text, path))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected key=value")
        given[key.strip()] = value.strip()
    unknown = sorted(set(given) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}")
    values.update(given)
    cfg = Config(values)
    for key in SCHEMA:
        cfg.get(key)
    return cfg


def attack_spec(cfg: Config) -> AttackSpec:
    try:
        return AttackSpec(epsilon=cfg.get("attack.epsilon"), step_size=cfg.get("attack.step_size"),
                          steps=cfg.get("attack.steps"), random_start=cfg.get("attack.random_start"))
    except ValueError as exc:
        raise ConfigError(f"attack: {exc}") from None


# desk-scale settings used when a key is left at "auto":
# (epochs, schedule, initial rate)
RUN_DEFAULTS = {
    "pretrain": (30, "pretrain-paper", 0.05),
    "finetune": (6, "aft-paper", None),
    "scratch": (12, "pretrain-paper", 0.05),
}


def train_spec(cfg: Config, mode: str) -> TrainSpec:
    epochs, default_schedule, default_lr = RUN_DEFAULTS[mode]
    schedule = cfg.get("train.lr_schedule")
    lr = cfg.get("train.lr")
    given_epochs = cfg.get("train.epochs")
    try:
        return TrainSpec(
            epochs=epochs if given_epochs is None else given_epochs,
            batch_size=cfg.get("train.batch_size"),
            lr_schedule=default_schedule if schedule == "auto" else schedule,
            lr=default_lr if lr is None and schedule == "auto" else lr,
            momentum=cfg.get("train.momentum"),
            weight_decay=cfg.get("train.weight_decay"),
            lam=cfg.get("train.lambda"),
            phi_degrees=cfg.get("train.phi_degrees"),
            nr_window=cfg.get("train.nr_window"),
            attack=attack_spec(cfg),
            seed=cfg.get("train.seed"),
            kd_variant=cfg.get("train.kd_variant"),
            distance=cfg.get("train.distance"),
            flip=cfg.get("train.flip"),
            strict_nr=cfg.get("train.strict_nr"),
        )
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


# -- datasets -----------------------------------------------------------------------

def _require(path: Path) -> Path:
    if not path.exists():
        raise DataError(f"dataset path {path} does not exist")
    return path


def load_datasets(cfg: Config) -> tuple[Dataset, Dataset]:
    """(training subset, held-out evaluation set) for the configured dataset."""
    name = cfg.get("data.name")
    per_class = cfg.get("data.per_class")
    seed = cfg.get("data.split_seed")
    root = data.resolve_root(cfg.get("data.root"))
    if name == "digits":
        full = data.load_digits()
        train, held = data.split(full, per_class, seed) if per_class > 0 else (full, full)
    elif name == "separable":
        n = max(per_class, 1)
        train, held = data.make_separable(n, seed), data.make_separable(n, seed + 1)
    elif name in ("mnist", "cifar10"):
        if root is None:
            raise DataError(f"{name} needs data.root or ${data.DATA_ROOT_ENV}")
        _require(root)
        if name == "mnist":
            train = data.load_mnist_idx(_require(root / "train-images-idx3-ubyte"),
                                        _require(root / "train-labels-idx1-ubyte"))
            held = data.load_mnist_idx(_require(root / "t10k-images-idx3-ubyte"),
                                       _require(root / "t10k-labels-idx1-ubyte"))
        else:
            train = data.load_cifar10_binary(root, "train")
            held = data.load_cifar10_binary(root, "test")
        if per_class > 0:
            train = data.subset(train, per_class, seed)
    else:
        raise ConfigError(f"data.name: unknown dataset {name!r}")
    limit = cfg.get("data.eval_limit")
    if limit > 0:
        held = held.take(np.arange(min(limit, len(held))))
    return train, held


# -- outputs ----------------------------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_reports(path: Path, reports: list[EpochReport]) -> None:
    _atomic_write(path, _csv_text(EpochReport.COLUMNS, [r.row() for r in reports]))


def build_id() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{version}+{rev}" if rev else version


def write_manifest(out_dir: Path, command: str, cfg: Config, report_path: Path,
                   final: dict, checkpoints: dict, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config": cfg.snapshot(),
        "build": build_id(),
        "reports": str(report_path),
        "metrics": final,
        "checkpoints": checkpoints,
    }
    manifest.update(extra or {})
    path = out_dir / "manifest.json"
    _atomic_write(path, json.dumps(manifest, indent=2) + "\n")
    return path


def _out_dir(cfg: Config, args) -> Path:
    out = Path(cfg.get("run.out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_checkpoint(path: str, cfg: Config, input_shape) -> models.Model:
    if not path:
        raise ConfigError("no checkpoint given")
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    model = models.load(path, arch=cfg.get("model.arch"))
    if model.input_shape != tuple(input_shape):
        raise CheckpointError(f"checkpoint input shape {model.input_shape} does not match "
                              f"dataset {tuple(input_shape)}")
    return model


# -- commands ----------------------------------------------------------------------

def cmd_pretrain(args, cfg: Config) -> dict:
    spec = train_spec(cfg, "pretrain")
    train, held = load_datasets(cfg)
    out = _out_dir(cfg, args)
    model = models.build(cfg.get("model.arch"), cfg.get("model.seed"), train.num_classes,
                         train.input_shape)
    reports: list[EpochReport] = []
    standard_pretrain(model, train, spec, eval_set=held, reports=reports, on_epoch=_progress(args))
    ckpt = out / "model.ckpt"
    models.save(model, ckpt)
    report_path = out / "epochs.csv"
    write_reports(report_path, reports)
    plotting.training_curves(reports, out / "training_curves.png", "pretrain")
    final = {"standard_acc": reports[-1].standard_acc, "pgd_acc": reports[-1].robust_acc,
             "cosine_similarity": None}
    write_manifest(out, "pretrain", cfg, report_path, final, {"model": str(ckpt)})
    return final


def cmd_finetune(args, cfg: Config) -> dict:
    teacher_path = cfg.get("run.teacher")
    scratch = not teacher_path and cfg.get("train.kd_variant") == "none"
    spec = train_spec(cfg, "scratch" if scratch else "finetune")
    if spec.kd_variant != "none" and not teacher_path:
        raise ConfigError(f"kd_variant {spec.kd_variant!r} needs a teacher checkpoint")
    train, held = load_datasets(cfg)
    pretrained = _load_checkpoint(teacher_path, cfg, train.input_shape) if teacher_path else None
    out = _out_dir(cfg, args)
    reports: list[EpochReport] = []
    extra: dict = {}
    if spec.kd_variant == "none":
        if pretrained is None:
            model = models.build(cfg.get("model.arch"), cfg.get("model.seed"), train.num_classes,
                                 train.input_shape)
        else:
            model = pretrained.clone()
        adversarial_train(model, train, spec, eval_set=held, reports=reports,
                          on_epoch=_progress(args))
    else:
        model = arrest_finetune(pretrained, train, spec, eval_set=held, reports=reports,
                                on_epoch=_progress(args))
        extra["tau"] = spec.tau
        extra["switch_rate_trace"] = [r.switch_rate for r in reports]
    cosine = None
    if pretrained is not None:
        cosine = metrics.mean_cosine_similarity(model, pretrained, held)
    ckpt = out / "model.ckpt"
    models.save(model, ckpt)
    report_path = out / "epochs.csv"
    write_reports(report_path, reports)
    plotting.training_curves(reports, out / "training_curves.png", f"finetune ({spec.kd_variant})")
    final = {"standard_acc": reports[-1].standard_acc, "pgd_acc": reports[-1].robust_acc,
             "cosine_similarity": cosine}
    checkpoints = {"model": str(ckpt)}
    if teacher_path:
        checkpoints["teacher"] = str(teacher_path)
    write_manifest(out, "finetune", cfg, report_path, final, checkpoints, extra)
    return final


def cmd_eval(args, cfg: Config) -> dict:
    _, held = load_datasets(cfg)
    model = _load_checkpoint(cfg.get("run.checkpoint"), cfg, held.input_shape)
    spec = attack_spec(cfg)
    seed = cfg.get("train.seed")
    standard = 100.0 * float((model.predict(held.images) == held.labels).mean())
    rows = [("none", 0.0, 0, standard)]
    for kind, steps in (("fgsm", 1), ("pgd", spec.steps)):
        acc = robust_accuracy(model, held.images, held.labels, kind, spec, seed=seed)
        rows.append((kind, spec.epsilon, steps, acc))
    out = Path(args.out) if args.out else _out_dir(cfg, args) / "eval.csv"
    _atomic_write(out, _csv_text(("attack", "eps", "steps", "accuracy"),
                                 [(a, f"{e:.6f}", s, f"{v:.6f}") for a, e, s, v in rows]))
    return {kind: acc for kind, _, _, acc in rows}


def _resolve_curve(args) -> metrics.TradeoffCurve | None:
    if args.fit:
        return None
    fixtures = metrics.load_curve_fixtures(args.curve_file)
    if args.curve not in fixtures:
        raise MetricError(f"unknown curve {args.curve!r}; available: {sorted(fixtures)}")
    return fixtures[args.curve]


def cmd_ardist(args, cfg: Config) -> dict:
    points = metrics.read_points_csv(args.points)
    curve = _resolve_curve(args)
    if curve is None:
        curve = metrics.fit_curve(points)
    rows = metrics.report_rows(points, curve, args.guess)
    out = Path(args.out) if args.out else Path(args.points).with_name(
        Path(args.points).stem + "_ardist.csv")
    header = ("label", "standard_acc", "robust_acc", "sum", "ardist")
    body = [(r["label"], f"{r['standard_acc']:.3f}", f"{r['robust_acc']:.3f}", f"{r['sum']:.3f}",
             f"{r['ardist']:.3f}") for r in rows]
    _atomic_write(out, _csv_text(header, body))
    plotting.tradeoff(rows, curve, out.with_suffix(".png"))
    return {"rows": len(rows), "coefficients": list(curve.coefficients)}


def cmd_embed(args, cfg: Config) -> dict:
    _, held = load_datasets(cfg)
    model = _load_checkpoint(cfg.get("run.checkpoint"), cfg, held.input_shape)
    width = model.representation_size
    lines = []
    for start in range(0, len(held), 256):
        reps = model.represent(held.images[start:start + 256], track_params=False).data
        for label, vec in zip(held.labels[start:start + 256], reps):
            lines.append([str(int(label))] + [f"{v:.6f}" for v in vec])
    header = ["label"] + [f"h{i}" for i in range(width)]
    out = Path(args.out) if args.out else _out_dir(cfg, args) / "embeddings.csv"
    _atomic_write(out, _csv_text(header, lines))
    return {"rows": len(lines), "width": width}


def _progress(args):
    if not getattr(args, "verbose", False):
        return None

    def report(r: EpochReport) -> None:
        print(",".join(r.row()), file=sys.stderr, flush=True)
    return report


# -- argument parsing and error reporting ---------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arrestlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_parser(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file or a run manifest")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out-dir", help="output directory (overrides run.out_dir)")
        p.add_argument("-v", "--verbose", action="store_true", help="print epoch reports")
        return p

    run_parser("pretrain", "standard training on clean examples")
    ft = run_parser("finetune", "adversarial finetuning (ARREST, or plain AT/AFT with kd_variant=none)")
    ft.add_argument("--teacher", help="pretrained checkpoint (overrides run.teacher)")
    ev = run_parser("eval", "clean, FGSM and PGD accuracy of a checkpoint")
    ev.add_argument("--checkpoint")
    ev.add_argument("--out", help="CSV path (default <out_dir>/eval.csv)")
    em = run_parser("embed", "export held-out representations")
    em.add_argument("--checkpoint")
    em.add_argument("--out", help="CSV path (default <out_dir>/embeddings.csv)")

    ar = sub.add_parser("ardist", help="Sum and ARDist for label,standard_acc,robust_acc rows")
    ar.add_argument("points", help="CSV of label,standard_acc,robust_acc")
    ar.add_argument("--curve", default="cifar10", help="curve fixture name (default cifar10)")
    ar.add_argument("--curve-file", help="key=value curve fixture file (default: bundled)")
    ar.add_argument("--fit", action="store_true", help="fit the cubic to the input rows")
    ar.add_argument("--guess", type=float, help="root-finder start (default: each point's x)")
    ar.add_argument("--out", help="report CSV (default <points>_ardist.csv)")
    return parser


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "ardist": cmd_ardist, "embed": cmd_embed}

ERROR_CODES = [(ConfigError, "config", 2), (DataError, "data", 3), (CheckpointError, "checkpoint", 4),
               (MetricError, "metric", 5), (OSError, "io", 6), (ValueError, "invalid", 7)]


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(getattr(args, "config", None), getattr(args, "set", []))
        # flags that name paths are folded into the config so manifests replay them
        for flag, key in (("out_dir", "run.out_dir"), ("teacher", "run.teacher"),
                          ("checkpoint", "run.checkpoint")):
            if getattr(args, flag, None):
                cfg.values[key] = getattr(args, flag)
        result = COMMANDS[args.command](args, cfg)
    except Exception as exc:
        for kind, category, code in ERROR_CODES:
            if isinstance(exc, kind):
                message = " ".join(str(exc).split())
                print(f"error: {category}: {message}", file=sys.stderr)
                return code
        raise
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
