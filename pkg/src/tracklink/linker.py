"""Link per-frame detections into long-term tubes.

For every class a layered graph is built whose layers are frames ``tau``
apart. An edge joins a detection at ``t`` to a detection at ``t + tau`` when
the box predicted from the first detection's tracklet overlaps the second;
its weight is ``p_i + p_j + phi`` with ``phi = 1`` iff that overlap exceeds
``delta_iou``. Tubes are pulled out one at a time as the best-scoring path
(dynamic programming over the layers), rescored, and removed together with
the boxes they suppress, until no edge is left.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .codec import TrackDelta, decode_delta
from .geometry import OrientedBox3D, iou_3d

log = logging.getLogger(__name__)

RESCORE_FUNCTIONS = ("max", "mean")
GATE_MODES = ("tracklet", "overlap")


class LinkError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: OrientedBox3D
    scores: Mapping[str, float]
    frame: int
    id: int
    label: Optional[str] = None

    def __post_init__(self):
        if self.frame < 0:
            raise ValueError("frame index must be non-negative")
        for cls, p in self.scores.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"score for {cls!r} outside [0, 1]: {p}")
        if self.label is None and self.scores:
            best = max(sorted(self.scores), key=lambda c: self.scores[c])
            object.__setattr__(self, "label", best)

    @property
    def key(self) -> tuple[int, int]:
        return (self.frame, self.id)

    def score(self, class_id: str) -> float:
        return float(self.scores.get(class_id, 0.0))


@dataclass(frozen=True)
class Tracklet:
    """Predicted motion of detection ``source_id`` from ``source_frame`` to the next layer."""

    source_frame: int
    source_id: int
    delta: TrackDelta

    @property
    def key(self) -> tuple[int, int]:
        return (self.source_frame, self.source_id)


@dataclass
class Tube:
    class_id: str
    frames: list[int]
    det_ids: list[int]
    boxes: list[OrientedBox3D]
    raw_scores: list[float]
    scores: list[float]
    tube_score: float

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def keys(self) -> list[tuple[int, int]]:
        return list(zip(self.frames, self.det_ids))

    def sort_key(self):
        return (self.class_id, self.frames[0], self.det_ids)


@dataclass(frozen=True)
class LinkerConfig:
    """Linking parameters.

    ``link_min_iou`` is the overlap an edge needs to exist at all (strictly
    greater); ``None`` connects every pair of adjacent-layer detections.
    ``gate='overlap'`` scores pairs against the unmoved box instead of the
    tracklet prediction. Detections take part in a class graph only when
    their score for that class exceeds ``score_floor``.
    """

    delta_iou: float = 0.5
    suppress_iou: float = 0.3
    tau: int = 1
    rescore: str = "max"
    min_tube_len: int = 1
    online_window: Optional[int] = None
    link_min_iou: Optional[float] = 0.0
    gate: str = "tracklet"
    score_floor: float = 0.0
    classes: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        for name in ("delta_iou", "suppress_iou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.link_min_iou is not None and not 0.0 <= self.link_min_iou <= 1.0:
            raise ValueError("link_min_iou must lie in [0, 1]")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.min_tube_len < 1:
            raise ValueError("min_tube_len must be >= 1")
        if self.rescore not in RESCORE_FUNCTIONS:
            raise ValueError(f"rescore must be one of {RESCORE_FUNCTIONS}")
        if self.gate not in GATE_MODES:
            raise ValueError(f"gate must be one of {GATE_MODES}")
        if self.online_window is not None and self.online_window < 2:
            raise ValueError("online_window must be >= 2 frames")
        if self.classes is not None:
            object.__setattr__(self, "classes", tuple(self.classes))


def predicted_box(det: Detection, tracklet: Optional[Tracklet], cfg: LinkerConfig) -> Optional[OrientedBox3D]:
    """Where ``det`` is expected one layer later, or None without a tracklet."""
    if cfg.gate == "overlap":
        return det.box
    if tracklet is None:
        return None
    return decode_delta(det.box, tracklet.delta)


def _pair_overlap(det_t, det_t_tau, tracklet, cfg) -> float:
    pred = predicted_box(det_t, tracklet, cfg)
    if pred is None:
        return 0.0
    return iou_3d(det_t_tau.box, pred)


def link_score(
    det_t: Detection,
    det_t_tau: Detection,
    tracklet: Optional[Tracklet],
    class_id: str,
    cfg: Optional[LinkerConfig] = None,
) -> float:
    """``p_i + p_j + phi`` for one class, ``phi = [IoU(B_j, T_i) > delta]``."""
    cfg = cfg or LinkerConfig()
    if tracklet is not None and tracklet.key != det_t.key:
        raise LinkError(f"tracklet {tracklet.key} does not belong to detection {det_t.key}")
    overlap = _pair_overlap(det_t, det_t_tau, tracklet, cfg)
    return _weight(det_t, det_t_tau, overlap, class_id, cfg)


def _weight(det_t, det_t_tau, overlap, class_id, cfg) -> float:
    phi = 1.0 if overlap > cfg.delta_iou else 0.0
    return det_t.score(class_id) + det_t_tau.score(class_id) + phi


@dataclass
class LinkGraph:
    """Layered DAG of one class. Node keys are ``(frame, det_id)``."""

    class_id: str
    tau: int
    nodes: dict[tuple[int, int], Detection] = field(default_factory=dict)
    incoming: dict[tuple[int, int], list[tuple[tuple[int, int], float]]] = field(default_factory=dict)

    @property
    def edges(self) -> list[tuple[tuple[int, int], tuple[int, int], float]]:
        out = []
        for v, ins in self.incoming.items():
            out.extend((u, v, w) for u, w in ins)
        return sorted(out)

    def frames(self) -> list[int]:
        return sorted({k[0] for k in self.nodes})


def _index_tracklets(detections: Sequence[Detection], tracklets: Iterable[Tracklet]) -> dict:
    known = {d.key for d in detections}
    index = {}
    for trk in tracklets:
        if trk.key not in known:
            raise LinkError(f"tracklet references missing detection (frame {trk.source_frame}, id {trk.source_id})")
        if trk.key in index:
            raise LinkError(f"duplicate tracklet for detection {trk.key}")
        index[trk.key] = trk
    return index


def _check_unique(detections: Sequence[Detection]) -> None:
    seen = set()
    for det in detections:
        if det.key in seen:
            raise LinkError(f"duplicate detection key {det.key}")
        seen.add(det.key)


def build_graphs(
    detections: Iterable[Detection],
    tracklets: Iterable[Tracklet],
    class_id: str,
    cfg: Optional[LinkerConfig] = None,
) -> LinkGraph:
    """Build the class-specific linking graph."""
    cfg = cfg or LinkerConfig()
    detections = sorted(detections, key=lambda d: d.key)
    _check_unique(detections)
    trk_index = _index_tracklets(detections, tracklets)

    graph = LinkGraph(class_id, cfg.tau)
    by_frame = defaultdict(list)
    for det in detections:
        if det.score(class_id) > cfg.score_floor:
            graph.nodes[det.key] = det
            graph.incoming[det.key] = []
            by_frame[det.frame].append(det)

    for frame in sorted(by_frame):
        following = by_frame.get(frame + cfg.tau)
        if not following:
            continue
        for src in by_frame[frame]:
            trk = trk_index.get(src.key)
            for dst in following:
                overlap = _pair_overlap(src, dst, trk, cfg)
                if cfg.link_min_iou is not None and not overlap > cfg.link_min_iou:
                    continue
                graph.incoming[dst.key].append((src.key, _weight(src, dst, overlap, class_id, cfg)))
    return graph


def _chain(pred, key):
    out = []
    while key is not None:
        out.append(key)
        key = pred[key]
    out.reverse()
    return out


def _better(cand, incumbent, pred) -> bool:
    """Order (score, start, end_key) candidates: higher score, earlier start, smaller id chain."""
    score, start, end = cand
    best_score, best_start, best_end = incumbent
    if score != best_score:
        return score > best_score
    if start != best_start:
        return start < best_start
    ids = [k[1] for k in _chain(pred, end)]
    best_ids = [k[1] for k in _chain(pred, best_end)]
    return ids < best_ids


def _best_path(graph: LinkGraph, active: set):
    """Highest-scoring path with at least one edge among ``active`` nodes."""
    best_score: dict = {}
    start: dict = {}
    pred: dict = {}
    winner = None
    for v in sorted(active):
        best_score[v], start[v], pred[v] = 0.0, v[0], None
        for u, w in graph.incoming[v]:
            if u not in active:
                continue
            cand_score = best_score[u] + w
            if pred[v] is None:
                take = True
            else:
                # compare the two ways of reaching v through their predecessors
                take = _better((cand_score, start[u], u), (best_score[v], start[v], pred[v]), pred)
            if take:
                best_score[v], start[v], pred[v] = cand_score, start[u], u
        if pred[v] is not None:
            cand = (best_score[v], start[v], v)
            if winner is None or _better(cand, winner, pred):
                winner = cand
    if winner is None:
        return None, 0.0
    return _chain(pred, winner[2]), winner[0]


def _suppress(graph: LinkGraph, active: set, path, threshold: float) -> None:
    by_frame = defaultdict(list)
    for key in active:
        by_frame[key[0]].append(key)
    for key in path:
        active.discard(key)
    for key in path:
        box = graph.nodes[key].box
        for other in by_frame[key[0]]:
            if other in active and iou_3d(graph.nodes[other].box, box) > threshold:
                active.discard(other)


def _extract(graph: LinkGraph, cfg: LinkerConfig):
    """Iterated best-path extraction.

    Returns the list of ``(path, score)`` in extraction order and the keys left
    as isolated singletons. Nodes in neither were suppressed.
    """
    active = set(graph.nodes)
    paths = []
    while True:
        path, score = _best_path(graph, active)
        if path is None:
            break
        paths.append((path, score))
        _suppress(graph, active, path, cfg.suppress_iou)
    return paths, sorted(active)


def _rescore(raw: list[float], how: str) -> list[float]:
    if how == "max":
        value = max(raw)
    else:
        value = sum(raw) / len(raw)
    return [value] * len(raw)


def _make_tube(graph_nodes, class_id, keys, score, cfg) -> Tube:
    dets = [graph_nodes[k] for k in keys]
    raw = [d.score(class_id) for d in dets]
    return Tube(
        class_id=class_id,
        frames=[d.frame for d in dets],
        det_ids=[d.id for d in dets],
        boxes=[d.box for d in dets],
        raw_scores=raw,
        scores=_rescore(raw, cfg.rescore),
        tube_score=score,
    )


def extract_tubes(graph: LinkGraph, cfg: Optional[LinkerConfig] = None) -> list[Tube]:
    """Tubes of one class graph: extracted paths first, then leftover singletons."""
    cfg = cfg or LinkerConfig()
    paths, singles = _extract(graph, cfg)
    tubes = [_make_tube(graph.nodes, graph.class_id, p, s, cfg) for p, s in paths]
    tubes += [_make_tube(graph.nodes, graph.class_id, [k], 0.0, cfg) for k in singles]
    return [t for t in tubes if len(t) >= cfg.min_tube_len]


def _classes(detections: Sequence[Detection], cfg: LinkerConfig) -> list[str]:
    if cfg.classes is not None:
        return list(cfg.classes)
    return sorted({c for d in detections for c in d.scores})


def link_sequence(
    detections: Iterable[Detection],
    tracklets: Iterable[Tracklet] = (),
    cfg: Optional[LinkerConfig] = None,
) -> list[Tube]:
    """Link a whole sequence, every class independently.

    Tubes are returned sorted by (class, first frame, detection ids).
    """
    cfg = cfg or LinkerConfig()
    detections = list(detections)
    tracklets = list(tracklets)
    tubes = []
    for class_id in _classes(detections, cfg):
        graph = build_graphs(detections, tracklets, class_id, cfg)
        tubes.extend(extract_tubes(graph, cfg))
    tubes.sort(key=Tube.sort_key)
    return tubes


def chain_score(dets: Sequence[Detection], tracklets: Mapping, class_id: str, cfg: LinkerConfig) -> float:
    score = 0.0
    for u, v in zip(dets, dets[1:]):
        score += link_score(u, v, tracklets.get(u.key), class_id, cfg)
    return score


class _ClassState:
    def __init__(self):
        self.members: dict[int, list[tuple[int, int]]] = {}
        self.pending: dict[tuple[int, int], int] = {}


class OnlineLinker:
    """Causal linker over a sliding window of the last ``online_window`` frames.

    Every push re-links the window. When a frame falls out of the window its
    detections are committed: a detection inherits the tube its predecessor
    was committed to, otherwise it starts a new tube. ``finish`` commits what
    is left. With a window at least as long as the stream the result equals
    :func:`link_sequence`.
    """

    def __init__(self, cfg: LinkerConfig):
        if cfg.online_window is None:
            raise ValueError("online linking needs cfg.online_window")
        self.cfg = cfg
        self.window: list[int] = []
        self.detections: dict[int, list[Detection]] = {}
        self.tracklets: dict[tuple[int, int], Tracklet] = {}
        self.all_detections: dict[tuple[int, int], Detection] = {}
        self.states: dict[str, _ClassState] = {}
        self._next_gid = 0
        self._last_frame = None

    def _classes(self) -> list[str]:
        if self.cfg.classes is not None:
            return list(self.cfg.classes)
        return sorted({c for d in self.all_detections.values() for c in d.scores})

    def _state(self, class_id) -> _ClassState:
        if class_id not in self.states:
            self.states[class_id] = _ClassState()
        return self.states[class_id]

    def _window_graph(self, class_id) -> LinkGraph:
        dets = [d for f in self.window for d in self.detections[f]]
        trks = [t for d in dets if (t := self.tracklets.get(d.key)) is not None]
        return build_graphs(dets, trks, class_id, self.cfg)

    def _new_gid(self) -> int:
        gid = self._next_gid
        self._next_gid += 1
        return gid

    def push(self, frame: int, detections: Iterable[Detection], tracklets: Iterable[Tracklet] = ()) -> list[Tube]:
        """Add one frame; return the provisional tubes reaching this frame."""
        if self._last_frame is not None and frame <= self._last_frame:
            raise LinkError(f"frames must be pushed in increasing order ({frame} after {self._last_frame})")
        detections = sorted(detections, key=lambda d: d.key)
        for det in detections:
            if det.frame != frame:
                raise LinkError(f"detection {det.key} pushed with frame {frame}")
        _check_unique(detections)
        known = {d.key for d in detections}
        new_trk = {}
        for trk in tracklets:
            if trk.key not in known:
                raise LinkError(f"tracklet references missing detection {trk.key}")
            new_trk[trk.key] = trk

        if len(self.window) >= self.cfg.online_window:
            self._commit_oldest()
        self._last_frame = frame
        self.window.append(frame)
        self.detections[frame] = detections
        self.tracklets.update(new_trk)
        self.all_detections.update((d.key, d) for d in detections)
        return self._provisional(frame)

    def _commit_oldest(self) -> None:
        oldest = self.window[0]
        for class_id in self._classes():
            state = self._state(class_id)
            graph = self._window_graph(class_id)
            paths, singles = _extract(graph, self.cfg)
            successor = {}
            in_window = set(singles)
            for path, _ in paths:
                in_window.update(path)
                for u, v in zip(path, path[1:]):
                    successor[u] = v
            for key in sorted(k for k in graph.nodes if k[0] == oldest):
                if key in state.pending:
                    gid = state.pending.pop(key)
                elif key in in_window:
                    gid = self._new_gid()
                    state.members[gid] = []
                else:
                    continue
                state.members[gid].append(key)
                if key in successor:
                    state.pending[successor[key]] = gid
        self.window.pop(0)

    def _resolve_window(self, class_id):
        """Window paths with the committed tube each one continues (or None)."""
        state = self._state(class_id)
        graph = self._window_graph(class_id)
        paths, singles = _extract(graph, self.cfg)
        covered = set()
        resolved = []
        for path, _ in paths:
            covered.update(path)
            resolved.append((state.pending.get(path[0]), path))
        for key in singles:
            covered.add(key)
            resolved.append((state.pending.get(key), [key]))
        # a pending successor that the window suppressed still closes its tube
        for key, gid in sorted(state.pending.items()):
            if key in graph.nodes and key not in covered:
                resolved.append((gid, [key]))
        return graph, resolved

    def _tube_from_keys(self, class_id, keys) -> Tube:
        dets = [self.all_detections[k] for k in keys]
        score = chain_score(dets, self.tracklets, class_id, self.cfg)
        return _make_tube(self.all_detections, class_id, keys, score, self.cfg)

    def _provisional(self, frame) -> list[Tube]:
        tubes = []
        for class_id in self._classes():
            state = self._state(class_id)
            _, resolved = self._resolve_window(class_id)
            for gid, path in resolved:
                if path[-1][0] != frame:
                    continue
                prefix = state.members.get(gid, []) if gid is not None else []
                tubes.append(self._tube_from_keys(class_id, prefix + path))
        tubes.sort(key=Tube.sort_key)
        return tubes

    def finish(self) -> list[Tube]:
        """Commit the remaining window and return all final tubes."""
        tubes = []
        for class_id in self._classes():
            state = self._state(class_id)
            chains = {gid: list(keys) for gid, keys in state.members.items()}
            if self.window:
                _, resolved = self._resolve_window(class_id)
                for gid, path in resolved:
                    if gid is None:
                        gid = self._new_gid()
                    chains.setdefault(gid, []).extend(path)
            for keys in chains.values():
                if len(keys) >= self.cfg.min_tube_len:
                    tubes.append(self._tube_from_keys(class_id, keys))
        self.window = []
        tubes.sort(key=Tube.sort_key)
        return tubes


def link_online(stream, cfg: LinkerConfig) -> list[Tube]:
    """Run :class:`OnlineLinker` over ``(frame, detections, tracklets)`` items."""
    linker = OnlineLinker(cfg)
    for frame, dets, trks in stream:
        linker.push(frame, dets, trks)
    return linker.finish()


def group_by_frame(detections: Iterable[Detection], tracklets: Iterable[Tracklet] = ()):
    """``(frame, detections, tracklets)`` for every frame from first to last, for :func:`link_online`."""
    dets = defaultdict(list)
    trks = defaultdict(list)
    for d in detections:
        dets[d.frame].append(d)
    for t in tracklets:
        trks[t.source_frame].append(t)
    frames = set(dets) | set(trks)
    if not frames:
        return
    for frame in range(min(frames), max(frames) + 1):
        yield frame, dets.get(frame, []), trks.get(frame, [])
