"""Regenerate tests/data/eval_fixture and its golden report.

Expected numbers come from the oracle matcher and brute-force AP in
tests/oracles.py, with label conversion and difficulty rules written out
again here rather than imported from the package.

    python3 tests/tools/make_golden.py
"""

import json
import math
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

from oracles import brute_force_ap, greedy_match_reference  # noqa: E402

OUT = HERE.parent / "data" / "eval_fixture"
SEQUENCES = (0, 1, 2)
FRAMES = 30
CLASSES = ("Car", "Pedestrian", "Cyclist")
THRESH = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}
NEIGHBOR = {"Car": "Van", "Pedestrian": "Person_sitting"}
DIMS = {  # l, w, h
    "Car": (3.9, 1.6, 1.5),
    "Van": (4.8, 1.9, 2.1),
    "Pedestrian": (0.8, 0.6, 1.75),
    "Person_sitting": (0.8, 0.6, 1.2),
    "Cyclist": (1.8, 0.6, 1.7),
}
NOISE = {"Car": 0.12, "Van": 0.12, "Pedestrian": 0.05, "Cyclist": 0.06, "Person_sitting": 0.05}
LEVELS = ("easy", "moderate", "hard")


def level_of(height, occluded, truncated):
    if height is None:
        return 1
    for k, (hmin, omax, tmax) in enumerate(((40, 0, 0.15), (25, 1, 0.30), (25, 2, 0.50))):
        if height >= hmin and occluded <= omax and truncated <= tmax:
            return k
    return 3


def camera_fields(box):
    x, y, z, l, w, h, rz = box
    ry = math.remainder(-rz - math.pi / 2, 2 * math.pi)
    return h, w, l, -y, -(z - h / 2), x, ry


def fmt(v):
    return repr(float(v))


def make_sequence(rng, seq):
    labels, preds, gts = [], [], []
    n_obj = int(rng.integers(6, 11))
    names = rng.choice(list(DIMS), size=n_obj, p=[0.35, 0.1, 0.25, 0.05, 0.25])
    starts = rng.uniform(5, 60, size=(n_obj, 2)) * [1, 1] - [0, 30]
    vel = rng.uniform(-0.8, 0.8, size=(n_obj, 2))
    yaw = rng.uniform(-math.pi, math.pi, n_obj)
    for t in range(FRAMES):
        det_id = 0
        for k in range(n_obj):
            if rng.random() < 0.1:
                continue
            name = str(names[k])
            l, w, h = DIMS[name]
            box = (*(starts[k] + t * vel[k]), h / 2 - 1.7, l, w, h, yaw[k])
            trunc = float(np.round(rng.choice([0.0, 0.0, 0.1, 0.2, 0.4, 0.7]), 2))
            occ = int(rng.choice([0, 0, 1, 2, 3]))
            if rng.random() < 0.2:
                bbox, height = (-1.0, -1.0, -1.0, -1.0), None
            else:
                top = float(np.round(rng.uniform(100, 200), 2))
                height = float(np.round(rng.uniform(15, 120), 2))
                left = float(np.round(rng.uniform(0, 1000), 2))
                bbox = (left, top, left + 50.0, top + height)
            cam = camera_fields(box)
            labels.append(" ".join([str(t), str(k), name, fmt(trunc), str(occ), fmt(0.0), *map(fmt, bbox), *map(fmt, cam)]))
            # what the evaluator should see after reading the text back
            h_, w_, l_, cx, cy, cz, ry = (float(v) for v in cam)
            gts.append((t, name, (cz, -cx, -cy + h_ / 2, l_, w_, h_, -ry - math.pi / 2), level_of(height, occ, trunc)))

            if rng.random() < 0.85:
                label = "Car" if name == "Van" else ("Pedestrian" if name == "Person_sitting" else name)
                noisy = list(box)
                noisy[0] += rng.normal(0, NOISE[name])
                noisy[1] += rng.normal(0, NOISE[name])
                noisy[6] += rng.normal(0, 0.05)
                score = float(np.round(rng.uniform(0.05, 1.0), 2))
                preds.append({"frame": t, "id": det_id, "class": label, "box": noisy, "scores": {label: score}})
                det_id += 1
        for _ in range(int(rng.integers(0, 3))):
            label = str(rng.choice(CLASSES))
            l, w, h = DIMS[label]
            box = [*rng.uniform([0, -30], [70, 30]), h / 2 - 1.7, l, w, h, rng.uniform(-math.pi, math.pi)]
            score = float(np.round(rng.uniform(0.05, 0.8), 2))
            preds.append({"frame": t, "id": det_id, "class": label, "box": box, "scores": {label: score}})
            det_id += 1
    for p in preds:
        p["box"] = [float(v) for v in p["box"]]
    labels.append(f"{FRAMES - 1} 99 DontCare -1 -1 -10 500.0 150.0 600.0 200.0 -1000 -1000 -1000 -10 -10 -10 -10")
    return labels, preds, gts


def expected(all_gts, all_preds):
    ap = {}
    for cls in CLASSES:
        ap[cls] = {}
        for level, diff in enumerate(LEVELS):
            flags, scores, num_gt = [], [], 0
            frames = {(s, g[0]) for s, g in all_gts} | {(s, p["frame"]) for s, p in all_preds}
            for key in sorted(frames):
                gt = []
                for s, (t, name, box, lv) in all_gts:
                    if (s, t) != key:
                        continue
                    if name == cls:
                        gt.append((box, lv > level))
                        num_gt += lv <= level
                    elif name == NEIGHBOR.get(cls):
                        gt.append((box, True))
                dets = [(p["box"], p["scores"][cls]) for s, p in all_preds if (s, p["frame"]) == key and p["class"] == cls]
                fl, _ = greedy_match_reference(gt, dets, THRESH[cls])
                flags += fl
                scores += [d[1] for d in dets]
            ap[cls][diff] = brute_force_ap(flags, scores, num_gt)
    mean = {}
    for diff in LEVELS:
        vals = [ap[c][diff] for c in CLASSES if ap[c][diff] is not None]
        mean[diff] = sum(vals) / len(vals) if vals else None
    return {"ap": ap, "map": mean}


def main():
    rng = np.random.default_rng(2024)
    (OUT / "gt").mkdir(parents=True, exist_ok=True)
    (OUT / "detections").mkdir(parents=True, exist_ok=True)
    all_gts, all_preds = [], []
    for seq in SEQUENCES:
        labels, preds, gts = make_sequence(rng, seq)
        name = f"{seq:04d}"
        (OUT / "gt" / f"{name}.txt").write_text("\n".join(labels) + "\n")
        with open(OUT / "detections" / f"{name}.jsonl", "w") as fh:
            for p in preds:
                fh.write(json.dumps(p, sort_keys=True) + "\n")
        all_gts += [(name, g) for g in gts]
        all_preds += [(name, p) for p in preds]
    golden = expected(all_gts, all_preds)
    (OUT / "golden.json").write_text(json.dumps(golden, indent=2, sort_keys=True) + "\n")
    print(json.dumps(golden, indent=2))


if __name__ == "__main__":
    main()
