"""KITTI-style 3D average precision.

Detections are matched to ground truth greedily in descending score order,
frame by frame. AP is the mean of right-max interpolated precision at
``recall_positions`` equally spaced recall levels (1/R ... R/R), in percent.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Optional, Sequence

from .geometry import OrientedBox3D, iou_3d

CLASSES = ("Car", "Pedestrian", "Cyclist")
DIFFICULTIES = ("easy", "moderate", "hard")
# GT of these classes is neither counted nor penalized for the key class
NEIGHBOR_CLASSES = {"Car": ("Van",), "Pedestrian": ("Person_sitting",), "Cyclist": ()}

TP, FP, IGNORED = 1, 0, -1
# level of a GT that fits no difficulty bucket
EXCLUDED = len(DIFFICULTIES)


def _default_thresholds():
    return {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: Mapping[str, float] = field(default_factory=_default_thresholds)
    recall_positions: int = 40
    min_height: tuple = (40.0, 25.0, 25.0)
    max_occlusion: tuple = (0, 1, 2)
    max_truncation: tuple = (0.15, 0.30, 0.50)

    def __post_init__(self):
        for cls, thr in self.iou_thresholds.items():
            if not 0.0 < thr <= 1.0:
                raise ValueError(f"IoU threshold for {cls} must lie in (0, 1]")
        if self.recall_positions < 1:
            raise ValueError("recall_positions must be >= 1")

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(self.iou_thresholds)


@dataclass(frozen=True)
class GroundTruth:
    frame: Hashable
    class_name: str
    box: OrientedBox3D
    level: int = 1


@dataclass(frozen=True)
class ScoredBox:
    frame: Hashable
    class_name: str
    box: OrientedBox3D
    score: float


def difficulty_level(truncated: float, occluded: int, bbox_height: Optional[float], cfg: Optional[EvalConfig] = None) -> int:
    """Easiest bucket (0 easy, 1 moderate, 2 hard) the object qualifies for.

    Without a 2D box (``bbox_height`` None or not positive) the object counts
    as moderate. Returns ``EXCLUDED`` if no bucket admits it.
    """
    cfg = cfg or EvalConfig()
    if bbox_height is None or bbox_height <= 0:
        return 1
    for level in range(len(DIFFICULTIES)):
        if (
            bbox_height >= cfg.min_height[level]
            and occluded <= cfg.max_occlusion[level]
            and truncated <= cfg.max_truncation[level]
        ):
            return level
    return EXCLUDED


def match_frame(
    gt_boxes: Sequence[OrientedBox3D],
    det_boxes: Sequence[OrientedBox3D],
    det_scores: Sequence[float],
    iou_thresh: float,
    gt_ignored: Optional[Sequence[bool]] = None,
):
    """Greedy matching inside one frame.

    Returns ``(flags, fn)``: one of TP/FP/IGNORED per detection (input order)
    and the number of unmatched, non-ignored GT boxes. A detection that hits
    no free GT but overlaps an ignored one is IGNORED.
    """
    if gt_ignored is None:
        gt_ignored = [False] * len(gt_boxes)
    order = sorted(range(len(det_boxes)), key=lambda i: -det_scores[i])
    taken = [False] * len(gt_boxes)
    flags = [FP] * len(det_boxes)
    for i in order:
        best_j, best_iou = -1, -1.0
        hits_ignored = False
        for j, gt in enumerate(gt_boxes):
            iou = iou_3d(det_boxes[i], gt)
            if iou < iou_thresh:
                continue
            if gt_ignored[j]:
                hits_ignored = True
            elif not taken[j] and iou > best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            taken[best_j] = True
            flags[i] = TP
        elif hits_ignored:
            flags[i] = IGNORED
    fn = sum(1 for j in range(len(gt_boxes)) if not taken[j] and not gt_ignored[j])
    return flags, fn


def match_detections(gt_by_frame: Mapping, det_by_frame: Mapping, iou_thresh: float):
    """Frame-wise matching.

    ``gt_by_frame`` maps frame -> list of boxes or ``(box, ignored)`` pairs;
    ``det_by_frame`` maps frame -> list of ``(box, score)``. Returns
    ``(flags_by_frame, fn_total)``.
    """
    flags_by_frame = {}
    fn_total = 0
    for frame in sorted(set(gt_by_frame) | set(det_by_frame), key=repr):
        gts = list(gt_by_frame.get(frame, ()))
        boxes, ignored = [], []
        for g in gts:
            if isinstance(g, OrientedBox3D):
                boxes.append(g)
                ignored.append(False)
            else:
                boxes.append(g[0])
                ignored.append(bool(g[1]))
        dets = list(det_by_frame.get(frame, ()))
        flags, fn = match_frame(boxes, [d[0] for d in dets], [d[1] for d in dets], iou_thresh, ignored)
        flags_by_frame[frame] = flags
        fn_total += fn
    return flags_by_frame, fn_total


def average_precision(flags: Sequence[int], scores: Sequence[float], num_gt: int, recall_positions: int = 40) -> Optional[float]:
    """Interpolated AP in percent; None when there is no ground truth.

    IGNORED flags are dropped. Detections sharing a score enter the curve
    together, as a score threshold cannot separate them.
    """
    if num_gt <= 0:
        return None
    pairs = [(s, f) for f, s in zip(flags, scores) if f != IGNORED]
    pairs.sort(key=lambda p: -p[0])
    points = []  # (tp, n_det) at each threshold
    tp = 0
    for k, (score, flag) in enumerate(pairs):
        tp += flag == TP
        if k + 1 == len(pairs) or pairs[k + 1][0] != score:
            points.append((tp, k + 1))
    total = 0.0
    for r in range(1, recall_positions + 1):
        best = 0.0
        for tp_k, n_k in points:
            # recall tp_k / num_gt >= r / R, in integers
            if tp_k * recall_positions >= r * num_gt:
                best = max(best, tp_k / n_k)
        total += best
    return 100.0 * total / recall_positions


@dataclass
class EvalReport:
    ap: dict  # class -> difficulty -> AP % or None
    mean_ap: dict  # difficulty -> mAP % or None
    counts: dict  # class -> difficulty -> {"tp", "fp", "fn"}

    def to_dict(self) -> dict:
        return {"ap": self.ap, "map": self.mean_ap, "counts": self.counts}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def table(self) -> str:
        return format_table(self)


def evaluate(gts: Iterable[GroundTruth], predictions: Iterable[ScoredBox], cfg: Optional[EvalConfig] = None) -> EvalReport:
    cfg = cfg or EvalConfig()
    classes = cfg.classes
    gts = list(gts)
    preds = list(predictions)
    for p in preds:
        if p.class_name not in classes:
            raise ValueError(f"unknown prediction class {p.class_name!r}; expected one of {classes}")

    ap = {c: {} for c in classes}
    counts = {c: {} for c in classes}
    for cls in classes:
        thr = cfg.iou_thresholds[cls]
        neighbors = NEIGHBOR_CLASSES.get(cls, ())
        dets = defaultdict(list)
        for p in preds:
            if p.class_name == cls:
                dets[p.frame].append((p.box, p.score))
        for level, diff in enumerate(DIFFICULTIES):
            gt_frames = defaultdict(list)
            num_gt = 0
            for g in gts:
                if g.class_name == cls:
                    ignored = g.level > level
                elif g.class_name in neighbors:
                    ignored = True
                else:
                    continue
                gt_frames[g.frame].append((g.box, ignored))
                num_gt += not ignored
            flags_by_frame, fn = match_detections(gt_frames, dets, thr)
            flags, scores = [], []
            for frame, fl in flags_by_frame.items():
                flags.extend(fl)
                scores.extend(s for _, s in dets.get(frame, ()))
            ap[cls][diff] = average_precision(flags, scores, num_gt, cfg.recall_positions)
            counts[cls][diff] = {
                "tp": sum(f == TP for f in flags),
                "fp": sum(f == FP for f in flags),
                "fn": fn,
            }

    mean_ap = {}
    for diff in DIFFICULTIES:
        present = [ap[c][diff] for c in classes if ap[c][diff] is not None]
        mean_ap[diff] = sum(present) / len(present) if present else None
    return EvalReport(ap, mean_ap, counts)


def tubes_to_predictions(tubes, sequence=None) -> list[ScoredBox]:
    """One scored box per tube frame, using the rescored per-frame score."""
    out = []
    for tube in tubes:
        for frame, box, score in zip(tube.frames, tube.boxes, tube.scores):
            key = frame if sequence is None else (sequence, frame)
            out.append(ScoredBox(key, tube.class_id, box, score))
    return out


_HEADERS = {"easy": "Easy", "moderate": "Medium", "hard": "Hard"}


def format_table(report: EvalReport) -> str:
    def cell(v):
        return "-" if v is None else f"{v:.2f}"

    classes = list(report.ap)
    groups = classes + ["mAP"]
    top = "".join(f"{g:^24}" for g in groups)
    sub = "".join(f"{_HEADERS[d]:>8}" for d in DIFFICULTIES) * len(groups)
    values = []
    for c in classes:
        values += [cell(report.ap[c][d]) for d in DIFFICULTIES]
    values += [cell(report.mean_ap[d]) for d in DIFFICULTIES]
    row = "".join(f"{v:>8}" for v in values)
    return "\n".join([top.rstrip(), sub, row])
