"""Command-line entry point: generate, train, eval, ablate, visualize.

Settings come from three layers, later ones winning: built-in defaults, an
optional ``--config`` file, then explicit flags. The config file holds one
``key = value`` pair per line; ``#`` starts a comment, values are parsed as
JSON when possible and kept as plain strings otherwise.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import lane_net
from .lane_eval import DEFAULT_THRESHOLD_PX, EvalReport, LabelParseError, evaluate, read_labels
from .lane_net import VARIANTS, NetworkConfig
from .resa import ResaConfig
from .synthetic_data import Sample, SceneSpec, generate, load_dataset, read_image, write_dataset
from .tensor import ShapeError, no_grad

log = logging.getLogger("lanepe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
ABLATION_ROWS = (
    ("no-RESA", dict(variant="baseline", use_resa=False)),
    ("RESA", dict(variant="baseline", use_resa=True)),
    ("RESA+APE", dict(variant="ape", use_resa=True)),
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- config files


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"{source}:{no}: empty key")
        try:
            out[key.replace("-", "_")] = json.loads(value)
        except json.JSONDecodeError:
            out[key.replace("-", "_")] = value
    return out


def read_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config_text(text, str(path))


# ---------------------------------------------------------------- settings and manifests


@dataclass
class TrainSettings:
    """Everything a training run depends on besides the dataset contents."""

    variant: str = "baseline"
    use_resa: bool = True
    epochs: int = 100
    batch_size: int = 12
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    threshold_px: float = DEFAULT_THRESHOLD_PX
    val_fraction: float = 0.2
    eval_every: int = 1
    bg_weight: float = 0.4
    resa_gain: float = 0.25
    encoder_channels: tuple[int, ...] = (8, 16)
    resa_iterations: int = 4
    conv_kernel_width: int = 9
    max_rel_dist: int | None = None

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.epochs < 0 or self.eval_every < 1:
            raise UsageError("epochs must be >= 0 and eval_every >= 1")
        if not 0 <= self.val_fraction < 1:
            raise UsageError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.threshold_px < 0:
            raise UsageError(f"threshold_px must be >= 0, got {self.threshold_px}")

    @classmethod
    def from_layers(cls, *layers: dict) -> "TrainSettings":
        known = {f.name for f in fields(cls)}
        merged: dict = {}
        for layer in layers:
            unknown = set(layer) - known
            if unknown:
                raise UsageError(f"unknown setting(s) {sorted(unknown)}")
            merged.update({k: v for k, v in layer.items() if v is not None or k == "max_rel_dist"})
        try:
            return cls(**merged)
        except TypeError as exc:
            raise UsageError(str(exc)) from exc

    def network_config(self, height: int, width: int, num_lane_classes: int) -> NetworkConfig:
        return NetworkConfig(
            height=height, width=width, encoder_channels=self.encoder_channels,
            resa=ResaConfig(iterations=self.resa_iterations, conv_kernel_width=self.conv_kernel_width),
            use_resa=self.use_resa, variant=self.variant, num_lane_classes=num_lane_classes,
            seed=self.seed, lr=self.lr, momentum=self.momentum, epochs=self.epochs,
            batch_size=self.batch_size, bg_weight=self.bg_weight, max_rel_dist=self.max_rel_dist,
            resa_gain=self.resa_gain,
        )


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str
    started: str
    wall_clock_s: float = 0.0
    series: list[dict] = field(default_factory=list)
    final_accuracy: float | None = None
    extra: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc


def version_string() -> str:
    """``git describe`` of the source tree, else the installed package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out} is not writable: {exc.strerror}") from exc
    return out


# ---------------------------------------------------------------- generate


def cmd_generate(out_dir, count: int, spec: SceneSpec | None = None) -> RunManifest:
    if count < 0:
        raise UsageError(f"count must be >= 0, got {count}")
    spec = spec or SceneSpec()
    out = _out_dir(out_dir)
    t0 = time.perf_counter()
    manifest = RunManifest("generate", spec.to_dict(), spec.seed, version_string(), _now(), extra={"count": count})
    write_dataset(out, generate(spec, count))
    manifest.wall_clock_s = time.perf_counter() - t0
    manifest.write(out / "manifest.json")
    return manifest


# ---------------------------------------------------------------- train


def load_samples(data_dir) -> list[Sample]:
    try:
        samples = load_dataset(data_dir)
    except (FileNotFoundError, LabelParseError) as exc:
        raise DataError(str(exc)) from exc
    except (OSError, ValueError) as exc:
        raise DataError(f"{data_dir}: {exc}") from exc
    if not samples:
        raise DataError(f"dataset {data_dir} is empty")
    shape = samples[0].image.shape
    for s in samples:
        if s.image.shape != shape:
            raise DataError(f"{s.label.raw_file}: image shape {s.image.shape} differs from {shape}")
    return samples


def num_classes_for(samples: Sequence[Sample]) -> int:
    k = max(len(s.label.lanes) for s in samples) + 1
    top = max(int(s.mask.max()) for s in samples)
    if top >= k:
        raise DataError(f"masks use class {top} but labels describe only {k - 1} lanes")
    return max(k, 2)


def split(samples: Sequence[Sample], val_fraction: float) -> tuple[list[Sample], list[Sample]]:
    """Trailing ``val_fraction`` of scenes held out; evaluates on train when that is empty."""
    n_val = int(round(len(samples) * val_fraction))
    if n_val >= len(samples):
        raise DataError(f"val_fraction {val_fraction} leaves no training scenes out of {len(samples)}")
    train = list(samples[: len(samples) - n_val])
    return train, (list(samples[len(samples) - n_val:]) or train)


def evaluate_net(net: lane_net.Network, samples: Sequence[Sample], threshold_px: float) -> EvalReport:
    masks = lane_net.predict_masks(net, np.stack([s.image for s in samples]))
    k = net.cfg.num_lane_classes - 1
    preds = [lane_net.lanes_from_mask(m, s.label.h_samples, k, s.label.raw_file) for m, s in zip(masks, samples)]
    return evaluate(preds, [s.label for s in samples], threshold_px)


def run_training(settings: TrainSettings, samples: Sequence[Sample], out_dir=None, data_dir=None) -> RunManifest:
    """Train one network; writes checkpoint, manifest and metrics CSV when ``out_dir`` is given."""
    t0 = time.perf_counter()
    train, val = split(samples, settings.val_fraction)
    h, w, _ = samples[0].image.shape
    try:
        cfg = settings.network_config(h, w, num_classes_for(samples))
        net = lane_net.build(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    state = lane_net.new_train_state(net)
    images = np.stack([s.image for s in train])
    masks = np.stack([s.mask for s in train])

    manifest = RunManifest(
        "train", asdict(settings), settings.seed, version_string(), _now(),
        extra={"data": str(data_dir) if data_dir else None, "train_scenes": len(train), "val_scenes": len(val)},
    )
    accuracy = None
    for epoch in range(1, settings.epochs + 1):
        loss = lane_net.train_epoch(state, images, masks)
        accuracy = None
        if epoch % settings.eval_every == 0 or epoch == settings.epochs:
            accuracy = evaluate_net(net, val, settings.threshold_px).accuracy
        manifest.series.append({"epoch": epoch, "loss": loss, "accuracy": accuracy})
        log.info("epoch %d loss %.5f acc %s", epoch, loss, "-" if accuracy is None else f"{accuracy:.4f}")
    if settings.epochs == 0:
        accuracy = evaluate_net(net, val, settings.threshold_px).accuracy
    manifest.final_accuracy = accuracy
    manifest.wall_clock_s = time.perf_counter() - t0

    if out_dir is not None:
        out = _out_dir(out_dir)
        lane_net.save_checkpoint(out / "checkpoint.npz", state)
        manifest.write(out / "manifest.json")
        with open(out / "metrics.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "accuracy"])
            writer.writeheader()
            writer.writerows(manifest.series)
    return manifest


def cmd_train(data_dir, out_dir, settings: TrainSettings) -> RunManifest:
    return run_training(settings, load_samples(data_dir), out_dir, data_dir)


# ---------------------------------------------------------------- eval


def cmd_eval(label_file, threshold_px: float = DEFAULT_THRESHOLD_PX, checkpoint=None, bypass: bool = False) -> EvalReport:
    """Score a checkpoint's predictions (or the labels themselves with ``bypass``).

    Image paths in the label file resolve relative to the file's directory.
    """
    label_file = Path(label_file)
    try:
        gts = read_labels(label_file)
    except FileNotFoundError as exc:
        raise DataError(f"label file {label_file} not found") from exc
    except LabelParseError as exc:
        raise DataError(f"{label_file}: {exc}") from exc
    if bypass:
        preds = gts
    else:
        if checkpoint is None:
            raise UsageError("eval needs --checkpoint unless --bypass is given")
        net = _load_net(checkpoint)
        preds = []
        for gt in gts:
            image = _read_input_image(label_file.parent / gt.raw_file, net.cfg)
            preds.append(lane_net.predict_lanes(net, image, gt.h_samples, gt.raw_file))
    return evaluate(preds, gts, threshold_px)


def _load_net(checkpoint) -> lane_net.Network:
    try:
        return lane_net.load_checkpoint(checkpoint).net
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint {checkpoint} not found") from exc
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {checkpoint}: {exc}") from exc


def _read_input_image(path, cfg: NetworkConfig) -> np.ndarray:
    try:
        image = read_image(path)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if image.shape[:2] != (cfg.height, cfg.width):
        raise DataError(f"image {path} is {image.shape[:2]}, network expects {(cfg.height, cfg.width)}")
    return image


# ---------------------------------------------------------------- ablate


@dataclass
class AblationRow:
    name: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def sd(self) -> float:
        # sample standard deviation; 0 for a single seed
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'setting':<10} {'RESA':^6} {'APE':^5} {'accuracy (mean ± sd)':>24}  seeds"]
    for r in rows:
        resa = "" if r.name == "no-RESA" else "✓"
        ape = "✓" if "APE" in r.name else ""
        lines.append(f"{r.name:<10} {resa:^6} {ape:^5} {r.mean:>14.4f} ± {r.sd:.4f}  {len(r.accuracies)}")
    return "\n".join(lines) + "\n"


def cmd_ablate(data_dir, out_dir, seeds: Sequence[int], base: TrainSettings) -> list[AblationRow]:
    """Train the three ablation settings for every seed; writes ablation.csv and ablation.txt."""
    if not seeds:
        raise UsageError("ablate needs at least one seed")
    samples = load_samples(data_dir)
    out = _out_dir(out_dir)
    t0 = time.perf_counter()
    rows = []
    for name, overrides in ABLATION_ROWS:
        accs = []
        for seed in seeds:
            settings = replace(base, seed=int(seed), **overrides)
            m = run_training(settings, samples, out / name / f"seed{seed}", data_dir)
            log.info("%s seed %s accuracy %.4f", name, seed, m.final_accuracy)
            accs.append(m.final_accuracy)
        rows.append(AblationRow(name, accs))

    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "mean", "sd", *[f"seed{s}" for s in seeds]])
        for r in rows:
            writer.writerow([r.name, repr(r.mean), repr(r.sd), *map(repr, r.accuracies)])
    (out / "ablation.txt").write_text(format_ablation(rows))
    manifest = RunManifest(
        "ablate", asdict(base), base.seed, version_string(), _now(), time.perf_counter() - t0,
        extra={"seeds": list(seeds), "data": str(data_dir), "rows": {r.name: r.accuracies for r in rows}},
    )
    manifest.write(out / "manifest.json")
    return rows


# ---------------------------------------------------------------- visualize


def to_gray(feature: np.ndarray) -> np.ndarray:
    """Channel mean scaled to [0, 255] by its own min and max; constant maps become 128."""
    m = feature.mean(axis=-1)
    lo, hi = m.min(), m.max()
    if not hi > lo:
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def prediction_overlay(image: np.ndarray, pred_mask: np.ndarray) -> np.ndarray:
    """Grayscale image dimmed into [0, 127] with predicted lane pixels at 255."""
    gray = np.round(image.mean(axis=-1) * 127.0).astype(np.uint8)
    gray[pred_mask > 0] = 255
    return gray


def cmd_visualize(checkpoint, image_path, out_dir) -> list[Path]:
    net = _load_net(checkpoint)
    image = _read_input_image(image_path, net.cfg)
    out = _out_dir(out_dir)
    capture: dict = {}
    with no_grad():
        logits = lane_net.forward(net, image[None], capture=capture)
    written = []
    stages = [s for s in ("encoder", "resa", "position", "decoder") if s in capture]
    for i, stage in enumerate(stages, 1):
        path = out / f"{i:02d}_{stage}.png"
        Image.fromarray(to_gray(capture[stage].data[0])).save(path)
        written.append(path)
    path = out / f"{len(stages) + 1:02d}_prediction.png"
    Image.fromarray(prediction_overlay(image, logits.data[0].argmax(axis=-1))).save(path)
    written.append(path)
    return written


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file (flags override it)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, help="default 12")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold-px", type=float, help=f"default {DEFAULT_THRESHOLD_PX:g}")
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--no-resa", dest="use_resa", action="store_const", const=False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lanepe", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--spec", help="key = value SceneSpec file")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", parents=[common], help="train one variant")
    t.add_argument("--data", help="dataset directory (optional with --manifest)")
    t.add_argument("--out", required=True)
    t.add_argument("--manifest", help="rerun the settings recorded in this manifest")
    _train_flags(t)

    e = sub.add_parser("eval", parents=[common], help="score predictions against a label file")
    e.add_argument("--labels", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--threshold-px", type=float, default=DEFAULT_THRESHOLD_PX)
    e.add_argument("--bypass", action="store_true", help="score the labels against themselves")
    e.add_argument("--out", help="write the JSON report here instead of stdout")

    a = sub.add_parser("ablate", parents=[common], help="no-RESA / RESA / RESA+APE over seeds")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, nargs="*", default=[0])
    _train_flags(a)

    v = sub.add_parser("visualize", parents=[common], help="per-stage feature images for one input")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--image", required=True)
    v.add_argument("--out", required=True)
    return parser


def _settings_from_args(args, base: dict | None = None) -> TrainSettings:
    layers = [base or {}]
    if args.config:
        layers.append(read_config(args.config))
    flags = {k: getattr(args, k) for k in (
        "variant", "epochs", "batch_size", "lr", "seed", "threshold_px", "val_fraction", "eval_every", "use_resa",
    )}
    layers.append({k: v for k, v in flags.items() if v is not None})
    return TrainSettings.from_layers(*layers)


def _dispatch(args) -> None:
    if args.command == "generate":
        spec_dict = read_config(args.spec) if args.spec else {}
        if args.seed is not None:
            spec_dict["seed"] = args.seed
        try:
            spec = SceneSpec.from_dict(spec_dict)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid scene spec: {exc}") from exc
        m = cmd_generate(args.out, args.count, spec)
        print(f"wrote {args.count} scenes to {args.out} ({m.wall_clock_s:.2f}s)")
    elif args.command == "train":
        base, data = None, args.data
        if args.manifest:
            m = RunManifest.read(args.manifest)
            base, data = m.config, data or m.extra.get("data")
        if data is None:
            raise UsageError("train needs --data (or a manifest that records it)")
        m = cmd_train(data, args.out, _settings_from_args(args, base))
        print(f"final accuracy {m.final_accuracy!r} after {len(m.series)} epochs ({m.wall_clock_s:.1f}s)")
    elif args.command == "eval":
        report = cmd_eval(args.labels, args.threshold_px, args.checkpoint, args.bypass)
        text = json.dumps(report.to_dict(), indent=2)
        if args.out:
            Path(args.out).write_text(text + "\n")
        else:
            print(text)
        print(report.summary(), file=sys.stderr)
    elif args.command == "ablate":
        rows = cmd_ablate(args.data, args.out, args.seeds, _settings_from_args(args))
        print(format_ablation(rows), end="")
    elif args.command == "visualize":
        for path in cmd_visualize(args.checkpoint, args.image, args.out):
            print(path)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _dispatch(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AssertionError, ShapeError, FloatingPointError) as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
