"""Variant-parameterised lane segmentation network and its training loop.

Wiring (all variants share the encoder stub, RESA and decoder):

    baseline  encoder -> RESA -> decoder
    sin_pe    encoder -> RESA -> +sinusoidal PE -> attention (no rel) -> decoder
    ape       encoder -> RESA -> +learned PE -> decoder
    rpe       encoder -> RESA -> attention (rel) -> decoder
    rpe_ape   encoder -> RESA -> +learned PE -> attention (rel) -> decoder

Attention blocks are residual (output = input + attention output). The
decoder upsamples bilinearly back to input resolution and applies a 1x1
projection to per-pixel class logits.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .attention import AttentionParams, grid_coords, init_attention, unflatten_map, flatten_map, attention_forward
from .lane_eval import MISSING, LaneLabel
from .position_encoding import (
    EncodingSpec,
    PositionalField,
    apply_absolute,
    init_learned,
    init_relative,
    sinusoidal_2d,
)
from .resa import ResaConfig, init_resa_weights, resa_forward
from .tensor import Tensor, add, backward, bilinear_upsample_2x, conv2d, cross_entropy, matmul, no_grad, relu

VARIANTS = ("baseline", "sin_pe", "ape", "rpe", "rpe_ape")
CHECKPOINT_VERSION = 1

# fixed stream ids so shared components get identical init across variants
_STREAMS = {"encoder": 0, "resa": 1, "ape": 2, "attention": 3, "rel": 4, "head": 5, "shuffle": 6}


def component_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAMS[name]])


@dataclass
class NetworkConfig:
    height: int = 64
    width: int = 32
    channels: int = 3
    encoder_channels: tuple[int, ...] = (8, 16)
    resa: ResaConfig = field(default_factory=ResaConfig)
    use_resa: bool = True
    variant: str = "baseline"
    num_lane_classes: int = 4
    seed: int = 0
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 12
    bg_weight: float = 0.4
    max_rel_dist: int | None = None
    resa_gain: float = 0.25

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if isinstance(self.resa, dict):
            self.resa = ResaConfig(**self.resa)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.encoder_channels:
            raise ValueError("encoder needs at least one stage")
        scale = 2 ** len(self.encoder_channels)
        if self.height % scale or self.width % scale:
            raise ValueError(f"input {self.height}x{self.width} not divisible by encoder stride {scale}")
        if self.num_lane_classes < 2:
            raise ValueError("need background plus at least one lane class")
        if self.batch_size < 1 or self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid optimiser settings")
        fh, fw, d = self.feature_shape
        if self.use_resa:
            self.resa.validate(fh, fw)
        if self.variant == "sin_pe" and d % 4:
            raise ValueError(f"sinusoidal encoding needs feature channels divisible by 4, got {d}")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        scale = 2 ** len(self.encoder_channels)
        return self.height // scale, self.width // scale, self.encoder_channels[-1]

    @property
    def has_attention(self) -> bool:
        return self.variant in ("sin_pe", "rpe", "rpe_ape")

    @property
    def has_relative(self) -> bool:
        return self.variant in ("rpe", "rpe_ape")

    @property
    def has_ape(self) -> bool:
        return self.variant in ("ape", "rpe_ape")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "resa" in d and isinstance(d["resa"], dict):
            d["resa"] = ResaConfig(**d["resa"])
        return cls(**d)


@dataclass
class Network:
    cfg: NetworkConfig
    encoder: list[tuple[Tensor, Tensor]]
    resa: dict[str, Tensor]
    head_w: Tensor
    head_b: Tensor
    sin_pe: PositionalField | None = None
    ape: PositionalField | None = None
    attention: AttentionParams | None = None

    def parameters(self) -> dict[str, Tensor]:
        """Every tensor the optimiser may touch, in a stable order."""
        out: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(self.encoder):
            out[f"encoder.{i}.w"] = w
            out[f"encoder.{i}.b"] = b
        if self.cfg.use_resa:
            for k, w in self.resa.items():
                out[f"resa.{k}"] = w
        if self.ape is not None:
            out["ape"] = self.ape.values
        if self.attention is not None:
            for k, t in self.attention.tensors().items():
                out[f"attention.{k}"] = t
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def freeze(self, *names: str) -> None:
        params = self.parameters()
        for n in names:
            params[n].requires_grad = False


def parameter_count(net: Network) -> int:
    return sum(t.data.size for t in net.parameters().values())


def build(cfg: NetworkConfig) -> Network:
    cfg.validate()
    rng = component_rng(cfg.seed, "encoder")
    encoder = []
    c_in = cfg.channels
    for c_out in cfg.encoder_channels:
        std = math.sqrt(2.0 / (9 * c_in))
        w = Tensor(rng.normal(0.0, std, size=(3, 3, c_in, c_out)), requires_grad=True)
        encoder.append((w, Tensor(np.zeros(c_out), requires_grad=True)))
        c_in = c_out
    fh, fw, d = cfg.feature_shape
    resa = init_resa_weights(cfg.resa, d, fh, fw, component_rng(cfg.seed, "resa"), cfg.resa_gain) if cfg.use_resa else {}

    head_rng = component_rng(cfg.seed, "head")
    head_w = Tensor(head_rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, cfg.num_lane_classes)), requires_grad=True)
    head_b = Tensor(np.zeros(cfg.num_lane_classes), requires_grad=True)

    net = Network(cfg, encoder, resa, head_w, head_b)
    if cfg.variant == "sin_pe":
        net.sin_pe = sinusoidal_2d(EncodingSpec("sinusoidal", d, fh, fw))
    if cfg.has_ape:
        net.ape = init_learned(EncodingSpec("learned_absolute", d, fh, fw), component_rng(cfg.seed, "ape"))
    if cfg.has_attention:
        rel = None
        if cfg.has_relative:
            rel = init_relative(EncodingSpec("relative", d, fh, fw, cfg.max_rel_dist), component_rng(cfg.seed, "rel"))
        net.attention = init_attention(d, d, component_rng(cfg.seed, "attention"), rel)
    return net


def forward(net: Network, images, capture: dict | None = None, wrap: tuple[int, int] | None = None) -> Tensor:
    """Per-pixel class logits ``(B, H, W, K)`` for images ``(B, H, W, C)`` (or unbatched)."""
    cfg = net.cfg
    x = images if isinstance(images, Tensor) else Tensor(images)
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    if x.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise ValueError(f"image shape {x.shape[1:]} does not match config {(cfg.height, cfg.width, cfg.channels)}")

    def keep(name, t):
        if capture is not None:
            capture[name] = t

    for w, b in net.encoder:
        x = relu(conv2d(x, w, b, stride=2, padding=(1, 1)))
    keep("encoder", x)
    if cfg.use_resa:
        x = resa_forward(x, cfg.resa, net.resa)
        keep("resa", x)
    if net.sin_pe is not None:
        x = apply_absolute(x, net.sin_pe)
    if net.ape is not None:
        x = apply_absolute(x, net.ape)
    if net.attention is not None:
        bsz, fh, fw, _ = x.shape
        z = attention_forward(flatten_map(x), net.attention, grid_coords(fh, fw), wrap)
        x = add(x, unflatten_map(z, fh, fw))
    if net.sin_pe is not None or net.ape is not None or net.attention is not None:
        keep("position", x)
    for _ in cfg.encoder_channels:
        x = bilinear_upsample_2x(x)
    keep("decoder", x)
    logits = add(matmul(x, net.head_w), net.head_b)
    keep("logits", logits)
    return logits.reshape(*logits.shape[1:]) if single else logits


def class_weights(cfg: NetworkConfig) -> np.ndarray:
    w = np.ones(cfg.num_lane_classes)
    w[0] = cfg.bg_weight
    return w


def loss_fn(net: Network, images, masks) -> Tensor:
    masks = np.asarray(masks)
    k = net.cfg.num_lane_classes
    if masks.size and (masks.min() < 0 or masks.max() >= k):
        raise ValueError(f"mask classes must lie in [0, {k}), got range [{masks.min()}, {masks.max()}]")
    logits = forward(net, images)
    return cross_entropy(logits, masks.astype(np.int64), class_weights(net.cfg))


# ---------------------------------------------------------------- training


@dataclass
class TrainState:
    net: Network
    velocity: dict[str, np.ndarray]
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0


def new_train_state(net: Network) -> TrainState:
    velocity = {k: np.zeros_like(t.data) for k, t in net.parameters().items()}
    return TrainState(net, velocity, component_rng(net.cfg.seed, "shuffle"))


def train_step(state: TrainState, images, masks, lr: float | None = None) -> float:
    """One SGD-with-momentum update on a batch; returns the batch loss."""
    cfg = state.net.cfg
    lr = cfg.lr if lr is None else lr
    params = state.net.parameters()
    for t in params.values():
        t.grad = None
    loss = loss_fn(state.net, images, masks)
    value = float(loss.data)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at step {state.step}")
    backward(loss)
    for name, t in params.items():
        if not t.requires_grad or t.grad is None:
            continue
        v = state.velocity[name]
        v *= cfg.momentum
        v += t.grad
        t.data -= lr * v
    state.step += 1
    return value


def train_epoch(state: TrainState, images: np.ndarray, masks: np.ndarray) -> float:
    """Shuffled pass over the data; returns the sample-weighted mean batch loss."""
    n = len(images)
    order = state.rng.permutation(n)
    bs = state.net.cfg.batch_size
    total = 0.0
    for start in range(0, n, bs):
        idx = order[start:start + bs]
        total += train_step(state, images[idx], masks[idx]) * len(idx)
    state.epoch += 1
    return total / max(n, 1)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: TrainState) -> None:
    """npz archive: ``param/<name>``, ``velocity/<name>`` and a JSON ``meta`` record."""
    meta = {
        "format": "lanepe-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": state.net.cfg.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "frozen": [k for k, t in state.net.parameters().items() if not t.requires_grad],
    }
    arrays = {f"param/{k}": t.data for k, t in state.net.parameters().items()}
    arrays.update({f"velocity/{k}": v for k, v in state.velocity.items()})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> TrainState:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "lanepe-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
        net = build(NetworkConfig.from_dict(meta["config"]))
        params = net.parameters()
        velocity = {}
        for k, t in params.items():
            t.data = z[f"param/{k}"].copy()
            velocity[k] = z[f"velocity/{k}"].copy()
    net.freeze(*meta.get("frozen", []))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(net, velocity, rng, meta["epoch"], meta["step"])


# ---------------------------------------------------------------- inference


def predict_masks(net: Network, images: np.ndarray, chunk: int = 32) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    out = []
    with no_grad():
        for start in range(0, len(images), chunk):
            out.append(forward(net, images[start:start + chunk]).data.argmax(axis=-1))
    masks = np.concatenate(out) if out else np.zeros((0, net.cfg.height, net.cfg.width), dtype=np.int64)
    return masks[0] if single else masks


def lanes_from_mask(mask: np.ndarray, h_samples: Sequence[int], num_lanes: int, raw_file: str = "") -> LaneLabel:
    """Mean column of each lane class per sampled row, MISSING where the class is absent."""
    cols = np.arange(mask.shape[1])
    lanes = []
    for k in range(1, num_lanes + 1):
        lane = []
        for r in h_samples:
            hit = mask[r] == k
            lane.append(int(np.floor(cols[hit].mean() + 0.5)) if hit.any() else MISSING)
        lanes.append(lane)
    return LaneLabel(raw_file, list(h_samples), lanes)


def predict_lanes(net: Network, image, h_samples: Sequence[int], raw_file: str = "") -> LaneLabel:
    mask = predict_masks(net, image)
    return lanes_from_mask(mask, h_samples, net.cfg.num_lane_classes - 1, raw_file)

