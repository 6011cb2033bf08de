"""Random small linking problems with plenty of overlaps and score ties."""

import math

import numpy as np

from tracklink.codec import TrackDelta
from tracklink.geometry import OrientedBox3D
from tracklink.linker import Detection, Tracklet

SCORE_LEVELS = (0.25, 0.5, 0.75, 1.0)


def random_instance(rng, max_frames=6, max_dets=4, classes=("Car",)):
    frames = int(rng.integers(1, max_frames + 1))
    anchors = rng.uniform(-3, 3, size=(int(rng.integers(1, 4)), 2))
    velocity = rng.uniform(-1.5, 1.5, size=anchors.shape)
    dets, trks = [], []
    for t in range(frames):
        for i in range(int(rng.integers(0, max_dets + 1))):
            a = int(rng.integers(len(anchors)))
            x, y = anchors[a] + t * velocity[a] + rng.normal(0, 0.6, 2)
            box = OrientedBox3D(x, y, 0.0, 3.0, 1.6, 1.5, rng.normal(0, 0.3))
            scores = {c: float(rng.choice(SCORE_LEVELS)) for c in classes if rng.random() < 0.9}
            dets.append(Detection(box, scores or {classes[0]: 0.5}, t, i))
            if rng.random() < 0.85:
                step = velocity[a] + rng.normal(0, 0.3, 2)
                trks.append(Tracklet(t, i, TrackDelta(step[0] / 3.0, step[1] / 1.6, 0.0, rng.normal(0, 0.02))))
    return dets, trks


def chain_detection(frame, det_id, x, p, cls="Car", y=0.0):
    return Detection(OrientedBox3D(x, y, 0.0, 4.0, 2.0, 1.5, 0.0), {cls: p}, frame, det_id)


def step_tracklet(frame, det_id, dx_m, l=4.0):
    return Tracklet(frame, det_id, TrackDelta(dx_m / l, 0.0, 0.0, 0.0))


def isolated_object_scene():
    """Three objects moving along x for four frames, plus a fourth (id 3)
    that pops up at unrelated places and never overlaps itself across frames."""
    dets, trks = [], []
    for t in range(4):
        for k in range(3):
            x = 2.0 * t
            det = chain_detection(t, k, x, 0.9 - 0.1 * k, y=10.0 * k)
            dets.append(det)
            trks.append(step_tracklet(t, k, 2.0))
        # id 3 jumps 30 m between frames: no overlap with past or future
        a = Detection(OrientedBox3D(-30.0 * (t + 1), -40.0, 0.0, 4.0, 2.0, 1.5, math.pi / 3), {"Car": 0.95}, t, 3)
        dets.append(a)
        trks.append(step_tracklet(t, 3, 2.0))
    return dets, trks
