"""Desk-scale lane scenes with pixel masks and Tusimple-format labels.

Lanes start at the bottom row, ordered left to right, and run toward a
shared vanishing point with a common quadratic bend, so extending any two
of them meets at that point. Class k+1 in the mask is the k-th lane from
the left; 0 is background.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .lane_eval import MISSING, LaneLabel, read_labels, write_labels

BACKGROUND = 0.2
LANE_BRIGHTNESS = 0.9
# per-lane brightness when identity is allowed to leak through appearance
CLASS_COLOURS = ((0.9, 0.3, 0.3), (0.3, 0.9, 0.3), (0.3, 0.3, 0.9), (0.9, 0.9, 0.3))


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 32
    num_lanes: int = 3
    vanishing_point: tuple[float, float] = (16.0, 16.0)
    curvature: float = 0.0
    noise: float = 0.0  # occlusion probability per lane segment
    position_ambiguity: bool = True
    seed: int = 0
    image_noise: float = 0.0  # std of additive Gaussian pixel noise
    lane_width: float = 2.0
    start_jitter: float = 0.15  # fraction of the lane slot width
    vp_jitter: float = 0.0  # px, uniform on the vanishing-point column
    sample_step: int = 2
    segment_rows: int = 4

    def __post_init__(self):
        object.__setattr__(self, "vanishing_point", tuple(float(v) for v in self.vanishing_point))
        if not 2 <= self.num_lanes <= len(CLASS_COLOURS):
            raise ValueError(f"num_lanes must be in [2, {len(CLASS_COLOURS)}], got {self.num_lanes}")
        if self.height < 4 or self.width < 4:
            raise ValueError(f"image too small: {self.height}x{self.width}")
        vr, vc = self.vanishing_point
        if not 0 <= vr < self.height / 2:
            raise ValueError(f"vanishing point row {vr} must lie in the upper half (< {self.height / 2})")
        if not 0 <= vc < self.width:
            raise ValueError(f"vanishing point column {vc} outside the image")
        if not 0 <= self.noise <= 1:
            raise ValueError(f"occlusion probability must be in [0, 1], got {self.noise}")
        if self.image_noise < 0 or self.lane_width <= 0 or self.sample_step < 1 or self.segment_rows < 1:
            raise ValueError("image_noise, lane_width, sample_step and segment_rows must be positive")
        slot = self.width / self.num_lanes
        if slot - 2 * self.start_jitter * slot < self.lane_width + 1:
            raise ValueError(
                f"{self.num_lanes} lanes of width {self.lane_width} overlap at the bottom row of a {self.width}-px image"
            )

    @property
    def num_classes(self) -> int:
        return self.num_lanes + 1

    @property
    def h_samples(self) -> list[int]:
        return list(range(self.height // 2, self.height, self.sample_step))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vanishing_point"] = list(self.vanishing_point)
        return d


@dataclass
class Sample:
    image: np.ndarray  # (h, w, 3) in [0, 1], quantised to 1/255
    mask: np.ndarray  # (h, w) int
    label: LaneLabel
    vanishing_point: tuple[float, float] | None = None
    lane_x: np.ndarray | None = None  # (num_lanes, h) continuous centre column, NaN where undrawn


def lane_centres(spec: SceneSpec, starts: Sequence[float], vp: tuple[float, float], bend: float) -> np.ndarray:
    """Continuous lane centre column for every row, NaN above the drawn region."""
    vr, vc = vp
    rows = np.arange(spec.height, dtype=np.float64)
    t = (spec.height - 1 - rows) / (spec.height - 1 - vr)
    xs = np.array([x0 + (vc - x0) * t + bend * t * (1 - t) for x0 in starts])
    xs[:, : spec.height // 2] = np.nan
    return xs


def _scene(spec: SceneSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    h, w, n = spec.height, spec.width, spec.num_lanes
    slot = w / n
    starts = [(k + 0.5) * slot + rng.uniform(-1, 1) * spec.start_jitter * slot for k in range(n)]
    vp = (spec.vanishing_point[0], spec.vanishing_point[1] + rng.uniform(-1, 1) * spec.vp_jitter)
    bend = spec.curvature * w * rng.uniform(-1, 1)
    xs = lane_centres(spec, starts, vp, bend)

    mask = np.zeros((h, w), dtype=np.int64)
    visible = np.zeros((h, w), dtype=np.int64)
    cols = np.arange(w)
    half = spec.lane_width / 2
    n_segments = math.ceil(h / spec.segment_rows)
    occluded = rng.random((n, n_segments)) < spec.noise
    for k in range(n):
        for r in range(h // 2, h):
            hit = np.abs(cols - xs[k, r]) <= half
            mask[r, hit] = k + 1
            if not occluded[k, r // spec.segment_rows]:
                visible[r, hit] = k + 1

    image = np.full((h, w, 3), BACKGROUND)
    for k in range(n):
        colour = (LANE_BRIGHTNESS,) * 3 if spec.position_ambiguity else CLASS_COLOURS[k]
        image[visible == k + 1] = colour
    if spec.image_noise > 0:
        image = image + rng.normal(0.0, spec.image_noise, size=image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0

    lanes = []
    for k in range(n):
        lane = []
        for r in spec.h_samples:
            x = int(np.floor(xs[k, r] + 0.5))
            lane.append(x if 0 <= x < w else MISSING)
        lanes.append(lane)
    label = LaneLabel(f"images/{index:05d}.png", spec.h_samples, lanes)
    return Sample(image, mask, label, vp, xs)


def generate(spec: SceneSpec, count: int) -> list[Sample]:
    """``count`` scenes; scene i depends only on ``(spec, i)``."""
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    return [_scene(spec, i) for i in range(count)]


def write_dataset(out_dir, samples: Sequence[Sample]) -> Path:
    """images/*.png (RGB), masks/*.pgm (class index), labels.json (JSON lines)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.round(s.image * 255.0).astype(np.uint8)
        Image.fromarray(img).save(out / s.label.raw_file, format="PNG")
        stem = Path(s.label.raw_file).stem
        Image.fromarray(s.mask.astype(np.uint8)).save(out / "masks" / f"{stem}.pgm", format="PPM")
    write_labels(out / "labels.json", [s.label for s in samples])
    return out


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_dataset(data_dir) -> list[Sample]:
    root = Path(data_dir)
    labels_path = root / "labels.json"
    if not labels_path.is_file():
        raise FileNotFoundError(f"no labels.json in {root}")
    samples = []
    for lab in read_labels(labels_path):
        image = read_image(root / lab.raw_file)
        mask_path = root / "masks" / f"{Path(lab.raw_file).stem}.pgm"
        with Image.open(mask_path) as im:
            mask = np.asarray(im, dtype=np.int64)
        if mask.shape != image.shape[:2]:
            raise ValueError(f"mask {mask_path} shape {mask.shape} does not match image {image.shape[:2]}")
        samples.append(Sample(image, mask, lab))
    return samples
