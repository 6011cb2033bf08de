"""Command line front end.

Subcommands: synth, correlate, link, eval, encode, decode. A JSON config
file (``--config``) holds the sections ``linker``, ``eval`` and
``scenario`` plus the top-level keys ``seed``, ``threads`` and
``log_level``; command-line flags override it.

Exit codes: 0 success, 1 usage error, 2 data-format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import dataset_io as dio
from .codec import InvalidBoxError, TrackDelta, decode_delta, encode_delta
from .correlation import FeatureFormatError, argmax_match, correlate, read_feature_blob
from .evaluation import EvalConfig, ScoredBox, evaluate, tubes_to_predictions
from .geometry import OrientedBox3D
from .linker import LinkerConfig, group_by_frame, link_online, link_sequence
from .simulator import ScenarioConfig, generate, write_scene

log = logging.getLogger("tracklink")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

_SECTIONS = {"linker": LinkerConfig, "eval": EvalConfig, "scenario": ScenarioConfig}
_TOP_LEVEL = {"seed": 0, "threads": 1, "log_level": "WARNING"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_run_config(path) -> dict:
    """Read a config file, rejecting unknown keys. Missing keys take defaults."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: top level must be an object")
    unknown = set(raw) - set(_SECTIONS) - set(_TOP_LEVEL)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    resolved = dict(_TOP_LEVEL)
    resolved.update({k: raw[k] for k in _TOP_LEVEL if k in raw})
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        fields = {f.name for f in dataclasses.fields(cls)}
        bad = set(section) - fields
        if bad:
            raise UsageError(f"unknown keys in section {name!r}: {sorted(bad)}")
        resolved[name] = dict(section)
    return resolved


def _build(cls, section: dict):
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _echo_config(out_dir: Path, args, run: dict, **objects) -> None:
    resolved = {"subcommand": args.command, **{k: run[k] for k in _TOP_LEVEL}}
    resolved.update({k: _jsonable(v) for k, v in objects.items()})
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


# -- synth ------------------------------------------------------------------


def cmd_synth(args, run) -> int:
    section = dict(run["scenario"])
    section["seed"] = args.seed if args.seed is not None else section.get("seed", run["seed"])
    for flag, key in (("objects", "num_objects"), ("frames", "frames"), ("dropout", "dropout"),
                      ("position_noise", "position_noise"), ("clutter_rate", "clutter_rate")):
        value = getattr(args, flag)
        if value is not None:
            section[key] = value
    cfg = _build(ScenarioConfig, section)
    out = _out_dir(args.out)
    scene = generate(cfg)
    manifest = write_scene(scene, out)
    _echo_config(out, args, run, scenario=cfg)
    print(f"objects={manifest['num_objects']} frames={manifest['frames']} "
          f"detections={manifest['num_detections']} clutter={manifest['num_clutter']} "
          f"tracklets={manifest['num_tracklets']} keypoints_per_frame={manifest['keypoints_per_frame']}")
    return EXIT_OK


# -- correlate --------------------------------------------------------------


def match_entropy(indices: np.ndarray) -> float:
    """Shannon entropy (bits) of how matched rows spread over target keypoints."""
    matched = indices[indices >= 0]
    if matched.size == 0:
        return 0.0
    _, counts = np.unique(matched, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def cmd_correlate(args, run) -> int:
    a = read_feature_blob(args.features_a)
    b = read_feature_blob(args.features_b)
    threads = args.threads if args.threads is not None else run["threads"]
    try:
        cmap = correlate(a, b, radius=args.radius, threads=threads)
    except ValueError as exc:
        raise dio.DataFormatError(str(exc)) from None
    idx, val = argmax_match(cmap)
    finite = cmap.values[np.isfinite(cmap.values)]
    summary = {
        "n_a": a.n,
        "n_b": b.n,
        "d": a.d,
        "matched": int((idx >= 0).sum()),
        "match_entropy_bits": match_entropy(idx),
        "max_correlation": float(finite.max()) if finite.size else None,
        "mean_correlation": float(finite.mean()) if finite.size else None,
    }
    rows = [{"i": i, "j": int(j), "value": float(v) if math.isfinite(v) else None}
            for i, (j, v) in enumerate(zip(idx, val))]
    if args.out:
        out = _out_dir(args.out)
        dio.write_jsonl(out / "matches.jsonl", rows)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        _echo_config(out, args, run, radius=args.radius)
    else:
        for row in rows:
            print(json.dumps(row, sort_keys=True))
    print(json.dumps(summary, sort_keys=True), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


# -- link -------------------------------------------------------------------


def _linker_config(args, run) -> LinkerConfig:
    section = dict(run["linker"])
    for flag, key in (("delta_iou", "delta_iou"), ("suppress_iou", "suppress_iou"),
                      ("min_tube_len", "min_tube_len"), ("online", "online_window"), ("gate", "gate")):
        value = getattr(args, flag, None)
        if value is not None:
            section[key] = value
    return _build(LinkerConfig, section)


def _link_inputs(args):
    """[(seq name or None, detections path, tracklets path or None)]."""
    det_path = Path(args.detections)
    if det_path.is_dir():
        root = det_path
        det_dir = root / "detections" if (root / "detections").is_dir() else root
        trk_dir = Path(args.tracklets) if args.tracklets else root / "tracklets"
        jobs = []
        for p in sorted(det_dir.glob("*.jsonl")):
            trk = trk_dir / p.name
            jobs.append((p.stem, p, trk if trk.is_file() else None))
        return jobs
    if not det_path.is_file():
        raise FileNotFoundError(f"missing file: {det_path}")
    trk = Path(args.tracklets) if args.tracklets else None
    if trk is not None and not trk.is_file():
        raise FileNotFoundError(f"missing file: {trk}")
    return [(None, det_path, trk)]


def run_link(dets, trks, cfg: LinkerConfig):
    if cfg.online_window is not None:
        return link_online(group_by_frame(dets, trks), cfg)
    return link_sequence(dets, trks, cfg)


def cmd_link(args, run) -> int:
    cfg = _linker_config(args, run)
    jobs = _link_inputs(args)
    if cfg.gate == "tracklet":
        missing = [str(p) for _, p, t in jobs if t is None]
        if missing:
            raise UsageError("tracklet gating needs tracklets for: " + ", ".join(missing)
                             + " (pass --tracklets or use --gate overlap)")
    out = _out_dir(args.out)
    total = 0
    for name, det_path, trk_path in jobs:
        dets = dio.read_detections(det_path)
        trks = dio.read_tracklets(trk_path) if trk_path else []
        tubes = run_link(dets, trks, cfg)
        if name is None:
            target = out / "tubes.jsonl"
        else:
            (out / "tubes").mkdir(exist_ok=True)
            target = out / "tubes" / f"{name}.jsonl"
        dio.write_tubes(target, tubes)
        total += len(tubes)
        log.info("%s: %d detections -> %d tubes", det_path, len(dets), len(tubes))
    _echo_config(out, args, run, linker=cfg)
    print(f"sequences={len(jobs)} tubes={total}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------


def _files_by_stem(path: Path, subdirs, pattern):
    if path.is_file():
        return {None: path}
    if not path.is_dir():
        raise FileNotFoundError(f"missing file: {path}")
    for sub in subdirs:
        if (path / sub).is_dir():
            path = path / sub
            break
    return {p.stem: p for p in sorted(path.glob(pattern))}


def _read_predictions(path: Path, seq) -> list:
    preds = []
    for obj in dio.read_jsonl(path):
        if "tube" in obj:
            preds.extend(tubes_to_predictions([dio.tube_from_json(obj)], seq))
        else:
            det = dio.detection_from_json(obj)
            key = det.frame if seq is None else (seq, det.frame)
            preds.append(ScoredBox(key, det.label, det.box, det.score(det.label)))
    return preds


def cmd_eval(args, run) -> int:
    cfg = _build(EvalConfig, run["eval"])
    gt_files = _files_by_stem(Path(args.gt), ("gt", "label_02"), "*.txt")
    pred_files = _files_by_stem(Path(args.pred), ("tubes", "detections"), "*.jsonl")
    if None in gt_files or None in pred_files:
        if len(gt_files) != 1 or len(pred_files) != 1:
            raise UsageError("a single file must be paired with a single file")
        pairs = [(None, next(iter(gt_files.values())), next(iter(pred_files.values())))]
    else:
        extra = sorted(set(pred_files) - set(gt_files))
        if extra:
            log.warning("predictions without ground truth ignored: %s", extra)
        pairs = [(s, gt_files[s], pred_files.get(s)) for s in sorted(gt_files)]

    gts, preds = [], []
    for seq, gt_path, pred_path in pairs:
        gts.extend(dio.labels_to_ground_truth(dio.read_label_file(gt_path), seq, cfg))
        if pred_path is not None:
            preds.extend(_read_predictions(pred_path, seq))
    try:
        report = evaluate(gts, preds, cfg)
    except ValueError as exc:
        raise dio.DataFormatError(str(exc)) from None
    table = report.table()
    print(table)
    if args.out:
        out = _out_dir(args.out)
        (out / "report.json").write_text(report.to_json(indent=2, sort_keys=True) + "\n")
        (out / "report.txt").write_text(table + "\n")
        _echo_config(out, args, run, eval=cfg)
    return EXIT_OK


# -- encode / decode --------------------------------------------------------


def _read_records(args, keys):
    if args.input is None:
        values = [getattr(args, k) for k in keys]
        if any(v is None for v in values):
            raise UsageError("give --input or all of: " + ", ".join("--" + k.replace("_", "-") for k in keys))
        return [dict(zip(keys, values))]
    if args.input == "-":
        lines = sys.stdin.read().splitlines()
    else:
        lines = Path(args.input).read_text().splitlines()
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise dio.DataFormatError(f"line {lineno}: {exc}") from None
    return out


def _box(values):
    try:
        return OrientedBox3D.from_array(values)
    except (TypeError, ValueError) as exc:
        raise dio.DataFormatError(f"bad box {values!r}: {exc}") from None


def cmd_encode(args, run) -> int:
    for rec in _read_records(args, ("box_t", "box_t_tau")):
        try:
            delta = encode_delta(_box(rec["box_t"]), _box(rec["box_t_tau"]))
        except KeyError as exc:
            raise dio.DataFormatError(f"record lacks {exc}") from None
        print(json.dumps({"delta": delta.as_list()}))
    return EXIT_OK


def cmd_decode(args, run) -> int:
    for rec in _read_records(args, ("box", "delta")):
        try:
            delta = TrackDelta.from_array(rec["delta"])
            box = decode_delta(_box(rec["box"]), delta)
        except KeyError as exc:
            raise dio.DataFormatError(f"record lacks {exc}") from None
        except (TypeError, ValueError) as exc:
            raise dio.DataFormatError(str(exc)) from None
        print(json.dumps({"box": box.as_list()}))
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="seed for all randomness")
    common.add_argument("--threads", type=int, help="worker threads (never changes results)")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING, ...")

    parser = _Parser(prog="tracklink", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--objects", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--position-noise", type=float)
    p.add_argument("--clutter-rate", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("correlate", parents=[common], help="correlate two keypoint feature blobs")
    p.add_argument("features_a")
    p.add_argument("features_b")
    p.add_argument("--radius", type=float, help="gate pairs further apart than this (m)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("link", parents=[common], help="link detections into tubes")
    p.add_argument("--detections", required=True, help="detections JSONL or dataset directory")
    p.add_argument("--tracklets", help="tracklets JSONL (or directory)")
    p.add_argument("--online", type=int, metavar="OMEGA", help="causal window length in frames")
    p.add_argument("--delta-iou", type=float)
    p.add_argument("--suppress-iou", type=float)
    p.add_argument("--min-tube-len", type=int)
    p.add_argument("--gate", choices=("tracklet", "overlap"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("eval", parents=[common], help="3D AP of predictions against labels")
    p.add_argument("--gt", required=True, help="label file or dataset directory")
    p.add_argument("--pred", required=True, help="tubes/detections JSONL or directory")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("encode", parents=[common], help="boxes -> tracking deltas")
    p.add_argument("--input", help="JSONL with box_t / box_t_tau, '-' for stdin")
    p.add_argument("--box-t", type=float, nargs=7)
    p.add_argument("--box-t-tau", type=float, nargs=7)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", parents=[common], help="box + delta -> predicted box")
    p.add_argument("--input", help="JSONL with box / delta, '-' for stdin")
    p.add_argument("--box", type=float, nargs=7)
    p.add_argument("--delta", type=float, nargs=4)
    p.set_defaults(func=cmd_decode)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = load_run_config(args.config)
        if args.seed is not None:
            run["seed"] = args.seed
        if args.threads is not None:
            run["threads"] = args.threads
        if args.log_level is not None:
            run["log_level"] = args.log_level
        level = getattr(logging, str(run["log_level"]).upper(), None)
        if not isinstance(level, int):
            raise UsageError(f"unknown log level {run['log_level']!r}")
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, run)
    except UsageError as exc:
        print(f"tracklink: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dio.DataFormatError, FeatureFormatError, InvalidBoxError, FileNotFoundError) as exc:
        print(f"tracklink: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
