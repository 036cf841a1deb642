"""Tusimple-style lane labels and the point accuracy metric.

accuracy = sum(C_clip) / sum(S_clip), where S_clip counts annotated ground
truth points and C_clip counts those hit (within ``threshold_px``) by the
predicted lane matched to them under the best one-to-one lane assignment.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

MISSING = -2
MAX_LANES = 12
DEFAULT_THRESHOLD_PX = 20.0


class LabelParseError(ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)


@dataclass
class LaneLabel:
    raw_file: str
    h_samples: list[int]
    lanes: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        self.h_samples = [int(v) for v in self.h_samples]
        self.lanes = [[int(v) for v in lane] for lane in self.lanes]
        if any(b <= a for a, b in zip(self.h_samples, self.h_samples[1:])):
            raise ValueError("h_samples must be strictly increasing")
        for k, lane in enumerate(self.lanes):
            if len(lane) != len(self.h_samples):
                raise ValueError(f"lane {k} has {len(lane)} points but there are {len(self.h_samples)} h_samples")
            bad = [v for v in lane if v < 0 and v != MISSING]
            if bad:
                raise ValueError(f"lane {k} has invalid x {bad[0]} (must be >= 0 or {MISSING})")

    @property
    def num_points(self) -> int:
        return sum(v != MISSING for lane in self.lanes for v in lane)

    def to_dict(self) -> dict:
        return {"lanes": self.lanes, "h_samples": self.h_samples, "raw_file": self.raw_file}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def _int_list(values, what: str, line_no: int) -> list[int]:
    if not isinstance(values, list):
        raise LabelParseError(f"{what} must be a list", line_no)
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (isinstance(v, float) and not v.is_integer()):
            raise LabelParseError(f"{what} holds non-integer coordinate {v!r}", line_no)
        out.append(int(v))
    return out


def parse_label_line(line: str, line_no: int = 1) -> LaneLabel:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise LabelParseError(f"invalid JSON ({exc.msg})", line_no) from exc
    if not isinstance(obj, dict):
        raise LabelParseError("expected a JSON object", line_no)
    missing = {"lanes", "h_samples", "raw_file"} - obj.keys()
    if missing:
        raise LabelParseError(f"missing keys {sorted(missing)}", line_no)
    h_samples = _int_list(obj["h_samples"], "h_samples", line_no)
    if not isinstance(obj["lanes"], list):
        raise LabelParseError("lanes must be a list", line_no)
    lanes = [_int_list(lane, f"lane {k}", line_no) for k, lane in enumerate(obj["lanes"])]
    for k, lane in enumerate(lanes):
        if len(lane) != len(h_samples):
            raise LabelParseError(
                f"lane {k} has {len(lane)} points but h_samples has {len(h_samples)}", line_no
            )
    try:
        return LaneLabel(str(obj["raw_file"]), h_samples, lanes)
    except ValueError as exc:
        raise LabelParseError(str(exc), line_no) from exc


def parse_labels(lines: Iterable[str]) -> list[LaneLabel]:
    """Parse JSON-lines label text; blank lines are skipped."""
    labels = []
    for no, line in enumerate(lines, start=1):
        if line.strip():
            labels.append(parse_label_line(line, no))
    return labels


def read_labels(path) -> list[LaneLabel]:
    with open(path, encoding="utf-8") as fh:
        return parse_labels(fh)


def write_labels(path, labels: Sequence[LaneLabel]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labels:
            fh.write(lab.to_json() + "\n")


def _hit_matrix(pred: LaneLabel, gt: LaneLabel, threshold_px: float) -> np.ndarray:
    """``hits[g, p]``: GT points of lane g matched by predicted lane p."""
    g = np.asarray(gt.lanes, dtype=np.int64).reshape(len(gt.lanes), len(gt.h_samples))
    p = np.asarray(pred.lanes, dtype=np.int64).reshape(len(pred.lanes), len(pred.h_samples))
    valid = (g[:, None, :] != MISSING) & (p[None, :, :] != MISSING)
    close = np.abs(g[:, None, :] - p[None, :, :]) <= threshold_px
    return (valid & close).sum(axis=-1)


def _best_assignment(hits: np.ndarray) -> int:
    """Max total over one-to-one matchings, by DP over subsets of predicted lanes."""
    n_gt, n_pred = hits.shape
    best = {0: 0}
    for gi in range(n_gt):
        nxt = dict(best)  # gt lane gi left unmatched
        for used, score in best.items():
            for pj in range(n_pred):
                bit = 1 << pj
                if used & bit:
                    continue
                key = used | bit
                cand = score + int(hits[gi, pj])
                if cand > nxt.get(key, -1):
                    nxt[key] = cand
        best = nxt
    return max(best.values())


def clip_accuracy(pred: LaneLabel, gt: LaneLabel, threshold_px: float = DEFAULT_THRESHOLD_PX) -> tuple[int, int]:
    """Return ``(C, S)`` for one clip."""
    if threshold_px < 0:
        raise ValueError(f"threshold_px must be non-negative, got {threshold_px}")
    if list(pred.h_samples) != list(gt.h_samples):
        raise ValueError(f"h_samples differ between prediction and ground truth for {gt.raw_file!r}")
    if len(pred.lanes) > MAX_LANES or len(gt.lanes) > MAX_LANES:
        raise ValueError(f"at most {MAX_LANES} lanes per side are supported")
    total = gt.num_points
    if not gt.lanes or not pred.lanes:
        return 0, total
    return _best_assignment(_hit_matrix(pred, gt, threshold_px)), total


@dataclass
class EvalReport:
    per_clip: list[tuple[int, int]]
    accuracy: float
    raw_files: list[str] = field(default_factory=list)
    empty: bool = False

    @property
    def correct(self) -> int:
        return sum(c for c, _ in self.per_clip)

    @property
    def total(self) -> int:
        return sum(s for _, s in self.per_clip)

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.correct, self.total) if self.total else Fraction(1)

    def to_dict(self) -> dict:
        names = self.raw_files or [""] * len(self.per_clip)
        return {
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "empty": self.empty,
            "clips": [{"raw_file": n, "correct": c, "total": s} for n, (c, s) in zip(names, self.per_clip)],
        }

    def summary(self) -> str:
        line = f"accuracy {self.accuracy:.6f} ({self.correct}/{self.total} points, {len(self.per_clip)} clips)"
        return line + (" [no ground-truth points]" if self.empty else "")


def aggregate(per_clip: Iterable[tuple[int, int]], raw_files: Sequence[str] = ()) -> EvalReport:
    """Ratio of integer sums; with no ground-truth points the accuracy is 1.0 and ``empty`` is set."""
    per_clip = [(int(c), int(s)) for c, s in per_clip]
    for c, s in per_clip:
        if not 0 <= c <= s:
            raise ValueError(f"invalid clip counts C={c}, S={s}")
    total = sum(s for _, s in per_clip)
    if total == 0:
        warnings.warn("no ground-truth points to evaluate; accuracy defined as 1.0", stacklevel=2)
        return EvalReport(per_clip, 1.0, list(raw_files), empty=True)
    correct = sum(c for c, _ in per_clip)
    return EvalReport(per_clip, correct / total, list(raw_files))


def evaluate(preds: Sequence[LaneLabel], gts: Sequence[LaneLabel], threshold_px: float = DEFAULT_THRESHOLD_PX) -> EvalReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth clips")
    counts = [clip_accuracy(p, g, threshold_px) for p, g in zip(preds, gts)]
    return aggregate(counts, [g.raw_file for g in gts])
