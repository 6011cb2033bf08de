"""Oriented 3D boxes and their overlap.

Boxes are gravity aligned: the only rotation is the yaw ``r_z`` about the
vertical (z) axis. The internal frame is right-handed with z up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, astuple
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# areas/volumes below this are treated as empty
AREA_EPS = 1e-12


def wrap_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(angle, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


@dataclass(frozen=True)
class OrientedBox3D:
    """7-DoF box: center (x, y, z), size (l, w, h) and yaw ``rz``.

    ``l`` is measured along the heading direction, ``w`` across it and ``h``
    vertically. The yaw is normalized into (-pi, pi] on construction.
    """

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    rz: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z", "l", "w", "h", "rz"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"box field {name} is not finite: {value}")
            object.__setattr__(self, name, value)
        if self.l < 0 or self.w < 0 or self.h < 0:
            raise ValueError(f"negative box dimensions: {self.l}, {self.w}, {self.h}")
        object.__setattr__(self, "rz", wrap_angle(self.rz))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "OrientedBox3D":
        if len(values) != 7:
            raise ValueError(f"expected 7 box parameters, got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    def as_list(self) -> list[float]:
        return list(astuple(self))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @property
    def bev_area(self) -> float:
        return self.l * self.w

    @property
    def is_valid(self) -> bool:
        return self.l > 0 and self.w > 0 and self.h > 0


# local-frame corner signs: bottom face CCW seen from above, then the top face
_CORNER_SIGNS = np.array(
    [
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, 1],
        [-1, 1, 1],
        [-1, -1, 1],
        [1, -1, 1],
    ],
    dtype=np.float64,
)


def box_corners(box: OrientedBox3D) -> np.ndarray:
    """Return the 8 corners of ``box`` as an (8, 3) array.

    Order: bottom face counter-clockwise seen from above, starting at the
    local corner (+l/2, +w/2), followed by the top face in the same order.
    """
    half = np.array([box.l, box.w, box.h]) / 2.0
    local = _CORNER_SIGNS * half
    c, s = math.cos(box.rz), math.sin(box.rz)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def _rectangle(cx, cy, l, w, rz):
    c, s = math.cos(rz), math.sin(rz)
    hl, hw = l / 2.0, w / 2.0
    pts = []
    for sl, sw in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        lx, ly = sl * hl, sw * hw
        pts.append((cx + c * lx - s * ly, cy + s * lx + c * ly))
    return pts


def clip_polygon(subject, clipper):
    """Sutherland-Hodgman clip of ``subject`` by the convex CCW polygon ``clipper``.

    Points on a clip edge count as inside.
    """
    output = list(subject)
    n = len(clipper)
    for k in range(n):
        if not output:
            break
        ax, ay = clipper[k]
        bx, by = clipper[(k + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inputs = output
        output = []
        prev = inputs[-1]
        prev_side = side(prev)
        for cur in inputs:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    output.append(_crossing(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0:
                output.append(_crossing(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return output


def _crossing(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def polygon_area(poly) -> float:
    """Shoelace area (absolute value)."""
    if len(poly) < 3:
        return 0.0
    acc = 0.0
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        acc += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return abs(acc) / 2.0


def _ordered(a: OrientedBox3D, b: OrientedBox3D):
    # a fixed evaluation order makes iou(a, b) == iou(b, a) bit for bit
    return (a, b) if astuple(a) <= astuple(b) else (b, a)


def bev_intersection_area(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Area of the overlap of the two footprints in the x-y plane."""
    a, b = _ordered(a, b)
    if a.bev_area < AREA_EPS or b.bev_area < AREA_EPS:
        return 0.0
    # work in a's frame: a becomes axis aligned at the origin
    c, s = math.cos(a.rz), math.sin(a.rz)
    dx, dy = b.x - a.x, b.y - a.y
    bx, by = c * dx + s * dy, -s * dx + c * dy
    rect_a = _rectangle(0.0, 0.0, a.l, a.w, 0.0)
    rect_b = _rectangle(bx, by, b.l, b.w, b.rz - a.rz)
    area = polygon_area(clip_polygon(rect_a, rect_b))
    return area if area >= AREA_EPS else 0.0


def iou_bev(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Intersection over union of the bird's-eye-view footprints."""
    inter = bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.bev_area + b.bev_area - inter
    if union < AREA_EPS:
        return 0.0
    return min(1.0, inter / union)


def vertical_overlap(a: OrientedBox3D, b: OrientedBox3D) -> float:
    top = min(a.z + a.h / 2.0, b.z + b.h / 2.0)
    bottom = max(a.z - a.h / 2.0, b.z - b.h / 2.0)
    return max(0.0, top - bottom)


def intersection_volume(a: OrientedBox3D, b: OrientedBox3D) -> float:
    a, b = _ordered(a, b)
    dz = vertical_overlap(a, b)
    if dz == 0.0:
        return 0.0
    vol = bev_intersection_area(a, b) * dz
    return vol if vol >= AREA_EPS else 0.0


def iou_3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Volumetric IoU of two gravity-aligned oriented boxes."""
    a, b = _ordered(a, b)
    inter = intersection_volume(a, b)
    if inter == 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    if union < AREA_EPS:
        return 0.0
    return min(1.0, inter / union)


def iou_3d_matrix(boxes_a: Sequence[OrientedBox3D], boxes_b: Sequence[OrientedBox3D]) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou_3d(a, b)
    return out
