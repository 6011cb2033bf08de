"""KITTI tracking labels, detection/tracklet/tube JSON-lines, sequence layout.

Coordinates: KITTI labels live in the camera frame (x right, y down,
z forward) with the location at the bottom centre of the box. Internally
boxes are centre based in a right-handed z-up frame::

    X = z_cam      Y = -x_cam      Z = -y_cam + h / 2      r_z = -rotation_y - pi / 2

Dataset directory layout::

    <root>/gt/<seq>.txt                 KITTI tracking labels (label_02/ also accepted)
    <root>/detections/<seq>.jsonl       one detection per line
    <root>/tracklets/<seq>.jsonl        one tracklet per line (optional)
    <root>/features/<seq>/<frame>.kpfb  keypoint feature blobs (optional)
"""

from __future__ import annotations

import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from .codec import TrackDelta
from .geometry import OrientedBox3D, wrap_angle
from .linker import Detection, Tracklet, Tube

PathLike = Union[str, Path]

TRAIN_SEQUENCES = (0, 1, 3, 4, 5, 9, 11, 12, 15, 17, 19, 20)
ALL_TRAINING_SEQUENCES = tuple(range(21))
VAL_SEQUENCES = tuple(s for s in ALL_TRAINING_SEQUENCES if s not in TRAIN_SEQUENCES)


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabelRecord:
    frame: int
    track_id: int
    class_name: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple  # left, top, right, bottom (px)
    h: float
    w: float
    l: float
    x: float
    y: float
    z: float
    rotation_y: float
    score: Optional[float] = None

    @property
    def bbox_height(self) -> Optional[float]:
        height = self.bbox[3] - self.bbox[1]
        if min(self.bbox) < 0 or height <= 0:
            return None
        return height


_INT_COLUMNS = {0, 1, 4}


def _parse_line(line: str, lineno: int) -> LabelRecord:
    cols = line.split()
    if len(cols) not in (17, 18):
        raise DataFormatError(f"line {lineno}: expected 17 or 18 columns, found {len(cols)}")
    values = []
    for k, tok in enumerate(cols):
        if k == 2:
            values.append(tok)
            continue
        try:
            values.append(int(tok) if k in _INT_COLUMNS else float(tok))
        except ValueError:
            raise DataFormatError(f"line {lineno}: column {k + 1} is not numeric: {tok!r}") from None
    frame, track_id, name, trunc, occ, alpha = values[:6]
    bbox = tuple(values[6:10])
    h, w, l, x, y, z, ry = values[10:17]
    score = values[17] if len(values) == 18 else None
    return LabelRecord(frame, track_id, name, trunc, occ, alpha, bbox, h, w, l, x, y, z, ry, score)


def parse_labels(source: Union[str, Iterable[str]]) -> dict[int, list[LabelRecord]]:
    """Parse KITTI tracking label text (a string or an iterable of lines).

    Returns records grouped by frame, frames ascending, file order kept
    within a frame.
    """
    lines = io.StringIO(source) if isinstance(source, str) else source
    by_frame = defaultdict(list)
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        rec = _parse_line(line, lineno)
        by_frame[rec.frame].append(rec)
    return {f: by_frame[f] for f in sorted(by_frame)}


def _fmt(value) -> str:
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def format_label(rec: LabelRecord) -> str:
    cols = [rec.frame, rec.track_id, rec.class_name, rec.truncated, rec.occluded, rec.alpha, *rec.bbox,
            rec.h, rec.w, rec.l, rec.x, rec.y, rec.z, rec.rotation_y]
    if rec.score is not None:
        cols.append(rec.score)
    return " ".join(c if isinstance(c, str) else _fmt(c) for c in cols)


def write_labels(records: Iterable[LabelRecord]) -> str:
    if isinstance(records, dict):
        records = [r for f in sorted(records) for r in records[f]]
    return "".join(format_label(r) + "\n" for r in records)


def read_label_file(path: PathLike) -> dict[int, list[LabelRecord]]:
    path = Path(path)
    with open(path) as fh:
        try:
            return parse_labels(fh)
        except DataFormatError as exc:
            raise DataFormatError(f"{path}: {exc}") from None


def to_box(rec: LabelRecord) -> tuple[OrientedBox3D, str]:
    """Camera-frame label -> internal centre-based box and class name."""
    if not (rec.h > 0 and rec.w > 0 and rec.l > 0):
        raise DataFormatError(f"frame {rec.frame} track {rec.track_id}: non-positive dimensions")
    box = OrientedBox3D(
        rec.z,
        -rec.x,
        -rec.y + rec.h / 2.0,
        rec.l,
        rec.w,
        rec.h,
        -rec.rotation_y - math.pi / 2.0,
    )
    return box, rec.class_name


def from_box(
    box: OrientedBox3D,
    class_name: str,
    frame: int = 0,
    track_id: int = -1,
    truncated: float = 0.0,
    occluded: int = 0,
    bbox: tuple = (-1.0, -1.0, -1.0, -1.0),
    score: Optional[float] = None,
) -> LabelRecord:
    """Inverse of :func:`to_box`; alpha is derived from the viewing angle."""
    x, y, z = -box.y, -(box.z - box.h / 2.0), box.x
    ry = wrap_angle(-box.rz - math.pi / 2.0)
    alpha = wrap_angle(ry - math.atan2(x, z))
    return LabelRecord(frame, track_id, class_name, truncated, occluded, alpha, tuple(bbox),
                       box.h, box.w, box.l, x, y, z, ry, score)


# -- JSON lines -------------------------------------------------------------


def detection_to_json(det: Detection) -> dict:
    return {
        "frame": det.frame,
        "id": det.id,
        "class": det.label,
        "box": det.box.as_list(),
        "scores": dict(det.scores),
    }


def detection_from_json(obj: dict) -> Detection:
    try:
        return Detection(
            box=OrientedBox3D.from_array(obj["box"]),
            scores={str(k): float(v) for k, v in obj["scores"].items()},
            frame=int(obj["frame"]),
            id=int(obj["id"]),
            label=obj.get("class"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad detection record: {exc}") from None


def tracklet_to_json(trk: Tracklet) -> dict:
    return {"frame": trk.source_frame, "id": trk.source_id, "delta": trk.delta.as_list()}


def tracklet_from_json(obj: dict) -> Tracklet:
    try:
        return Tracklet(int(obj["frame"]), int(obj["id"]), TrackDelta.from_array(obj["delta"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad tracklet record: {exc}") from None


def tube_to_json(tube: Tube, index: int) -> dict:
    return {
        "tube": index,
        "class": tube.class_id,
        "frames": tube.frames,
        "ids": tube.det_ids,
        "boxes": [b.as_list() for b in tube.boxes],
        "raw_scores": tube.raw_scores,
        "scores": tube.scores,
        "tube_score": tube.tube_score,
    }


def tube_from_json(obj: dict) -> Tube:
    try:
        return Tube(
            class_id=obj["class"],
            frames=[int(f) for f in obj["frames"]],
            det_ids=[int(i) for i in obj["ids"]],
            boxes=[OrientedBox3D.from_array(b) for b in obj["boxes"]],
            raw_scores=[float(s) for s in obj["raw_scores"]],
            scores=[float(s) for s in obj["scores"]],
            tube_score=float(obj["tube_score"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad tube record: {exc}") from None


def read_jsonl(path: PathLike) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_jsonl(path: PathLike, objs: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_detections(path: PathLike) -> list[Detection]:
    try:
        dets = [detection_from_json(o) for o in read_jsonl(path)]
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    return sorted(dets, key=lambda d: d.key)


def write_detections(path: PathLike, detections: Iterable[Detection]) -> None:
    write_jsonl(path, (detection_to_json(d) for d in sorted(detections, key=lambda d: d.key)))


def read_tracklets(path: PathLike) -> list[Tracklet]:
    try:
        trks = [tracklet_from_json(o) for o in read_jsonl(path)]
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    return sorted(trks, key=lambda t: t.key)


def write_tracklets(path: PathLike, tracklets: Iterable[Tracklet]) -> None:
    write_jsonl(path, (tracklet_to_json(t) for t in sorted(tracklets, key=lambda t: t.key)))


def read_tubes(path: PathLike) -> list[Tube]:
    try:
        return [tube_from_json(o) for o in read_jsonl(path)]
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def write_tubes(path: PathLike, tubes: Iterable[Tube]) -> None:
    write_jsonl(path, (tube_to_json(t, k) for k, t in enumerate(tubes)))


# -- sequences --------------------------------------------------------------


@dataclass
class SequenceSet:
    ids: tuple
    role: Optional[str]
    frame_counts: dict = field(default_factory=dict)


@dataclass
class SequenceData:
    seq_id: int
    labels: dict = field(default_factory=dict)  # frame -> [LabelRecord]
    detections: list = field(default_factory=list)
    tracklets: list = field(default_factory=list)
    feature_paths: dict = field(default_factory=dict)  # frame -> Path

    @property
    def num_frames(self) -> int:
        frames = set(self.labels) | {d.frame for d in self.detections} | set(self.feature_paths)
        return max(frames) + 1 if frames else 0


def split(role: str) -> tuple:
    """Sequence ids of the ``train`` or ``val`` part of the 21 training sequences."""
    if role == "train":
        return TRAIN_SEQUENCES
    if role == "val":
        return VAL_SEQUENCES
    raise ValueError(f"unknown split role {role!r}")


def seq_name(seq_id: int) -> str:
    return f"{int(seq_id):04d}"


def _label_dir(root: Path) -> Path:
    for name in ("gt", "label_02"):
        if (root / name).is_dir():
            return root / name
    return root / "gt"


def discover_sequences(root: PathLike) -> tuple:
    root = Path(root)
    ids = set()
    for sub, pattern in ((_label_dir(root), "*.txt"), (root / "detections", "*.jsonl")):
        if sub.is_dir():
            ids.update(int(p.stem) for p in sub.glob(pattern) if p.stem.isdigit())
    return tuple(sorted(ids))


def load_sequence(root: PathLike, seq_id: int, need_labels: bool = True, need_detections: bool = False) -> SequenceData:
    """Load one sequence; missing required files raise FileNotFoundError naming every path."""
    root = Path(root)
    name = seq_name(seq_id)
    label_path = _label_dir(root) / f"{name}.txt"
    det_path = root / "detections" / f"{name}.jsonl"
    trk_path = root / "tracklets" / f"{name}.jsonl"
    missing = []
    if need_labels and not label_path.is_file():
        missing.append(str(label_path))
    if need_detections and not det_path.is_file():
        missing.append(str(det_path))
    if missing:
        raise FileNotFoundError("missing files: " + ", ".join(missing))

    data = SequenceData(int(seq_id))
    if label_path.is_file():
        data.labels = read_label_file(label_path)
    if det_path.is_file():
        data.detections = read_detections(det_path)
    if trk_path.is_file():
        data.tracklets = read_tracklets(trk_path)
    feat_dir = root / "features" / name
    if feat_dir.is_dir():
        data.feature_paths = {int(p.stem): p for p in sorted(feat_dir.glob("*.kpfb")) if p.stem.isdigit()}
    return data


def load_sequences(root: PathLike, role: Optional[str] = None, ids: Optional[Iterable[int]] = None, **kwargs):
    """Load sequences in id order; ``role`` filters by the train/val split.

    Returns ``(SequenceSet, [SequenceData])``.
    """
    wanted = tuple(sorted(ids)) if ids is not None else discover_sequences(root)
    if role is not None:
        allowed = set(split(role))
        wanted = tuple(s for s in wanted if s in allowed)
    missing = []
    seqs = []
    for seq_id in wanted:
        try:
            seqs.append(load_sequence(root, seq_id, **kwargs))
        except FileNotFoundError as exc:
            missing.append(str(exc))
    if missing:
        raise FileNotFoundError("; ".join(missing))
    sset = SequenceSet(wanted, role, {s.seq_id: s.num_frames for s in seqs})
    return sset, seqs


def save_results(out_dir: PathLike, seq_id: int, detections=None, tracklets=None, tubes=None) -> list[Path]:
    """Write result files for one sequence under ``out_dir``; returns the paths written."""
    out_dir = Path(out_dir)
    name = seq_name(seq_id)
    written = []
    for sub, items, writer in (
        ("detections", detections, write_detections),
        ("tracklets", tracklets, write_tracklets),
        ("tubes", tubes, write_tubes),
    ):
        if items is None:
            continue
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
        path = out_dir / sub / f"{name}.jsonl"
        writer(path, items)
        written.append(path)
    return written


def labels_to_ground_truth(labels: dict, sequence=None, cfg=None):
    """GroundTruth entries for evaluation; DontCare and dimensionless rows are skipped."""
    from .evaluation import GroundTruth, difficulty_level

    out = []
    for frame in sorted(labels):
        for rec in labels[frame]:
            if rec.class_name == "DontCare" or not (rec.h > 0 and rec.w > 0 and rec.l > 0):
                continue
            box, name = to_box(rec)
            level = difficulty_level(rec.truncated, rec.occluded, rec.bbox_height, cfg)
            key = frame if sequence is None else (sequence, frame)
            out.append(GroundTruth(key, name, box, level))
    return out
