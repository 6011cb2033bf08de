"""Synthetic scenes with known tracks.

Objects move with constant speed and constant yaw rate. Every object yields
a noisy detection per frame (unless dropped), an exact tracklet describing
its true motion to the next frame, and a fixed set of keypoints whose
descriptors are the object's random unit "signature" plus noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .codec import ZERO_DELTA, encode_delta
from .correlation import KeypointFeatureSet, write_feature_blob
from .dataset_io import from_box, save_results, seq_name, write_labels, write_jsonl
from .geometry import OrientedBox3D, iou_bev
from .linker import Detection, Tracklet

# nominal (l, w, h) and speed scale relative to cars
CLASS_PROFILES = {
    "Car": ((3.9, 1.6, 1.5), 1.0),
    "Pedestrian": ((0.8, 0.6, 1.75), 0.2),
    "Cyclist": ((1.8, 0.6, 1.7), 0.5),
}


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    num_objects: int = 10
    frames: int = 40
    frame_dt: float = 0.1
    speed_range: tuple = (0.0, 12.0)
    yaw_rate_range: tuple = (-0.3, 0.3)
    dropout: float = 0.0
    score_noise: float = 0.0
    position_noise: float = 0.0
    keypoints_per_object: int = 8
    feature_dim: int = 32
    feature_noise: float = 0.0
    clutter_rate: float = 0.0
    clutter_overlap: bool = False
    class_weights: tuple = (0.6, 0.2, 0.2)
    area: tuple = (120.0, 120.0)
    gt_score_range: tuple = (0.6, 1.0)
    clutter_score_max: float = 0.3
    max_placement_tries: int = 2000

    def __post_init__(self):
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must be a probability")
        for name in ("score_noise", "position_noise", "feature_noise", "clutter_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.num_objects < 0 or self.frames < 1:
            raise ValueError("need num_objects >= 0 and frames >= 1")
        if self.keypoints_per_object < 1 or self.feature_dim < 1:
            raise ValueError("need at least one keypoint per object and feature_dim >= 1")
        for name in ("speed_range", "yaw_rate_range", "class_weights", "area", "gt_score_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lo, hi = self.gt_score_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("gt_score_range must lie in [0, 1]")


@dataclass
class SimulatedScene:
    config: ScenarioConfig
    classes: list  # per object
    gt_boxes: list  # per object: list of boxes, one per frame
    detections: list
    tracklets: list
    features: dict  # frame -> KeypointFeatureSet
    det_truth: dict  # (frame, det id) -> object index, or None for clutter
    keypoint_owner: np.ndarray = field(default=None)

    def gt_labels(self) -> dict:
        """KITTI-style label records per frame (no 2D boxes)."""
        out = {}
        for t in range(self.config.frames):
            out[t] = [from_box(boxes[t], cls, frame=t, track_id=k)
                      for k, (cls, boxes) in enumerate(zip(self.classes, self.gt_boxes))]
        return out

    def gt_tracks(self) -> dict:
        """Object index -> sorted detection keys that belong to it."""
        tracks = {k: [] for k in range(len(self.classes))}
        for key, obj in self.det_truth.items():
            if obj is not None:
                tracks[obj].append(key)
        return {k: sorted(v) for k, v in tracks.items()}


def _trajectory(rng, cfg, cls):
    (l0, w0, h0), speed_scale = CLASS_PROFILES[cls]
    l, w, h = (dim * rng.uniform(0.95, 1.05) for dim in (l0, w0, h0))
    x = rng.uniform(-cfg.area[0] / 2, cfg.area[0] / 2)
    y = rng.uniform(-cfg.area[1] / 2, cfg.area[1] / 2)
    z = h / 2.0
    yaw = rng.uniform(-math.pi, math.pi)
    speed = speed_scale * rng.uniform(*cfg.speed_range)
    yaw_rate = rng.uniform(*cfg.yaw_rate_range)
    boxes = []
    for _ in range(cfg.frames):
        boxes.append(OrientedBox3D(x, y, z, l, w, h, yaw))
        x += speed * math.cos(yaw) * cfg.frame_dt
        y += speed * math.sin(yaw) * cfg.frame_dt
        yaw += yaw_rate * cfg.frame_dt
    return boxes


def _separated(a, b) -> bool:
    need = 2.0 * max(a[0].l, a[0].w, b[0].l, b[0].w)
    return all(math.hypot(p.x - q.x, p.y - q.y) > need for p, q in zip(a, b))


def generate(cfg: Optional[ScenarioConfig] = None) -> SimulatedScene:
    """Draw a scene; identical configs give identical scenes."""
    cfg = cfg or ScenarioConfig()
    # independent streams, so e.g. raising dropout leaves placement and noise untouched
    place_rng, drop_rng, noise_rng, clutter_rng, feat_rng, order_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(6)
    )
    names = list(CLASS_PROFILES)
    weights = np.asarray(cfg.class_weights, dtype=np.float64)
    weights = weights / weights.sum()

    classes, tracks = [], []
    for _ in range(cfg.num_objects):
        cls = names[int(place_rng.choice(len(names), p=weights))]
        for _ in range(cfg.max_placement_tries):
            boxes = _trajectory(place_rng, cfg, cls)
            if all(_separated(boxes, other) for other in tracks):
                break
        else:
            raise ValueError("could not place objects without overlap; enlarge the area")
        classes.append(cls)
        tracks.append(boxes)

    # keypoints: fixed local offsets inside each box, shared descriptor per object
    kpo, d = cfg.keypoints_per_object, cfg.feature_dim
    signatures = feat_rng.standard_normal((cfg.num_objects, d))
    signatures /= np.maximum(np.linalg.norm(signatures, axis=1, keepdims=True), 1e-12)
    offsets = feat_rng.uniform(-0.5, 0.5, size=(cfg.num_objects, kpo, 3))
    owner = np.repeat(np.arange(cfg.num_objects), kpo)

    detections, tracklets, features, truth = [], [], {}, {}
    lo, hi = cfg.gt_score_range
    for t in range(cfg.frames):
        entries = []  # (box, scores, label, object index or None, delta)
        for k, (cls, boxes) in enumerate(zip(classes, tracks)):
            dropped = drop_rng.uniform() < cfg.dropout
            noise = cfg.position_noise * noise_rng.standard_normal(3)
            p = noise_rng.uniform(lo, hi)
            jitter = noise_rng.standard_normal()
            if dropped:
                continue
            if cfg.score_noise > 0:
                p = float(np.clip(p + cfg.score_noise * jitter, 0.0, 1.0))
            gt = boxes[t]
            box = OrientedBox3D(gt.x + noise[0], gt.y + noise[1], gt.z + noise[2], gt.l, gt.w, gt.h, gt.rz)
            delta = encode_delta(gt, boxes[t + 1]) if t + 1 < cfg.frames else None
            entries.append((box, {cls: p}, cls, k, delta))

        n_clutter = int(clutter_rng.poisson(cfg.clutter_rate)) if cfg.clutter_rate > 0 else 0
        for _ in range(n_clutter):
            cls = names[int(clutter_rng.choice(len(names), p=weights))]
            (l, w, h), _ = CLASS_PROFILES[cls]
            for _ in range(cfg.max_placement_tries):
                box = OrientedBox3D(
                    clutter_rng.uniform(-cfg.area[0] / 2, cfg.area[0] / 2),
                    clutter_rng.uniform(-cfg.area[1] / 2, cfg.area[1] / 2),
                    h / 2.0, l, w, h, clutter_rng.uniform(-math.pi, math.pi),
                )
                if cfg.clutter_overlap or all(iou_bev(box, b[t]) == 0.0 for b in tracks):
                    break
            p = clutter_rng.uniform(0.0, cfg.clutter_score_max)
            delta = ZERO_DELTA if t + 1 < cfg.frames else None
            entries.append((box, {cls: p}, cls, None, delta))

        # shuffle so detection ids carry no identity information
        for det_id, idx in enumerate(order_rng.permutation(len(entries))):
            box, scores, label, obj, delta = entries[idx]
            detections.append(Detection(box, scores, t, det_id, label))
            truth[(t, det_id)] = obj
            if delta is not None:
                tracklets.append(Tracklet(t, det_id, delta))

        if cfg.num_objects:
            locs = np.empty((cfg.num_objects * kpo, 3))
            for k, boxes in enumerate(tracks):
                b = boxes[t]
                local = offsets[k] * np.array([b.l, b.w, b.h])
                c, s = math.cos(b.rz), math.sin(b.rz)
                locs[k * kpo:(k + 1) * kpo, 0] = b.x + c * local[:, 0] - s * local[:, 1]
                locs[k * kpo:(k + 1) * kpo, 1] = b.y + s * local[:, 0] + c * local[:, 1]
                locs[k * kpo:(k + 1) * kpo, 2] = b.z + local[:, 2]
            feats = signatures[owner].copy()
            if cfg.feature_noise > 0:
                feats += feat_rng.normal(0.0, cfg.feature_noise, size=feats.shape)
            features[t] = KeypointFeatureSet(feats.astype(np.float32), locs, t)

    return SimulatedScene(cfg, classes, tracks, detections, tracklets, features, truth, owner)


def frame_assignment_accuracy(scene: SimulatedScene, tubes) -> float:
    """Fraction of detected object instances that are assigned correctly.

    An instance (object o, frame t) counts as correct when its detection lies
    in exactly one tube, that tube holds only detections of o, and the
    detections of o at the neighbouring frames (when present) are in the same
    tube. Frames where o was not detected impose nothing.
    """
    tube_of = {}
    for k, tube in enumerate(tubes):
        for key in tube.keys:
            tube_of.setdefault(key, []).append(k)
    pure = []
    for tube in tubes:
        owners = {scene.det_truth.get(key) for key in tube.keys}
        pure.append(len(owners) == 1 and None not in owners)

    instance = {}
    for key, obj in scene.det_truth.items():
        if obj is not None:
            instance[(obj, key[0])] = key
    if not instance:
        return 1.0
    correct = 0
    for (obj, t), key in instance.items():
        homes = tube_of.get(key, [])
        if len(homes) != 1 or not pure[homes[0]]:
            continue
        home = homes[0]
        ok = True
        for nb in (t - 1, t + 1):
            nb_key = instance.get((obj, nb))
            if nb_key is not None and tube_of.get(nb_key) != [home]:
                ok = False
        correct += ok
    return correct / len(instance)


def write_scene(scene: SimulatedScene, out_dir, seq_id: int = 0) -> dict:
    """Write a scene in the dataset layout; returns the manifest."""
    out_dir = Path(out_dir)
    name = seq_name(seq_id)
    (out_dir / "gt").mkdir(parents=True, exist_ok=True)
    (out_dir / "gt" / f"{name}.txt").write_text(write_labels(scene.gt_labels()))
    save_results(out_dir, seq_id, detections=scene.detections, tracklets=scene.tracklets)
    feat_dir = out_dir / "features" / name
    feat_dir.mkdir(parents=True, exist_ok=True)
    for frame, fset in sorted(scene.features.items()):
        write_feature_blob(feat_dir / f"{frame:06d}.kpfb", fset)
    (out_dir / "truth").mkdir(exist_ok=True)
    write_jsonl(
        out_dir / "truth" / f"{name}.jsonl",
        ({"frame": f, "id": i, "object": obj} for (f, i), obj in sorted(scene.det_truth.items())),
    )
    manifest = {
        "sequences": [name],
        "num_objects": len(scene.classes),
        "frames": scene.config.frames,
        "classes": {c: scene.classes.count(c) for c in sorted(set(scene.classes))},
        "num_detections": len(scene.detections),
        "num_clutter": sum(1 for v in scene.det_truth.values() if v is None),
        "num_tracklets": len(scene.tracklets),
        "keypoints_per_frame": len(scene.keypoint_owner),
        "config": asdict(scene.config),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
