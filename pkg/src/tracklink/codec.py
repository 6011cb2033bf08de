"""Cross-frame tracking targets and the multi-task training objective.

A tracking target describes how a box moves from frame ``t`` to ``t + tau``,
with the centre displacement normalized by the box size at ``t`` and the yaw
change normalized by a full turn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .geometry import TWO_PI, OrientedBox3D, wrap_angle


class InvalidBoxError(ValueError):
    """Raised when a box cannot serve as a normalizer (non-positive size)."""


@dataclass(frozen=True)
class TrackDelta:
    dx: float
    dy: float
    dz: float
    drz: float

    def __post_init__(self):
        for name in ("dx", "dy", "dz", "drz"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"delta field {name} is not finite")
            object.__setattr__(self, name, value)

    @classmethod
    def from_array(cls, values) -> "TrackDelta":
        if len(values) != 4:
            raise ValueError(f"expected 4 delta values, got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_list(self) -> list[float]:
        return [self.dx, self.dy, self.dz, self.drz]


ZERO_DELTA = TrackDelta(0.0, 0.0, 0.0, 0.0)


def _check_normalizer(box: OrientedBox3D) -> None:
    if not (box.l > 0 and box.w > 0 and box.h > 0):
        raise InvalidBoxError(f"box dimensions must be positive, got l={box.l} w={box.w} h={box.h}")


def encode_delta(box_t: OrientedBox3D, box_t_tau: OrientedBox3D) -> TrackDelta:
    """Tracking target from ``box_t`` to the same object's ``box_t_tau``.

    The yaw difference is wrapped into (-pi, pi] before dividing by 2*pi,
    so ``drz`` lies in (-0.5, 0.5].
    """
    _check_normalizer(box_t)
    return TrackDelta(
        (box_t_tau.x - box_t.x) / box_t.l,
        (box_t_tau.y - box_t.y) / box_t.w,
        (box_t_tau.z - box_t.z) / box_t.h,
        wrap_angle(box_t_tau.rz - box_t.rz) / TWO_PI,
    )


def decode_delta(box_t: OrientedBox3D, delta: TrackDelta) -> OrientedBox3D:
    """Predicted box at ``t + tau``; dimensions are carried over from ``box_t``."""
    _check_normalizer(box_t)
    return OrientedBox3D(
        box_t.x + delta.dx * box_t.l,
        box_t.y + delta.dy * box_t.w,
        box_t.z + delta.dz * box_t.h,
        box_t.l,
        box_t.w,
        box_t.h,
        box_t.rz + delta.drz * TWO_PI,
    )


@dataclass(frozen=True)
class LossConfig:
    lambda_reg: float = 1.0
    lambda_tra: float = 1.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if self.lambda_reg < 0 or self.lambda_tra < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.smooth_l1_beta > 0:
            raise ValueError("smooth_l1_beta must be positive")


def smooth_l1(pred, target, beta: float = 1.0) -> float:
    """Summed smooth L1 (Huber-style) loss between two vectors."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if not beta > 0:
        raise ValueError("beta must be positive")
    err = np.abs(pred - target)
    per = np.where(err < beta, 0.5 * err * err / beta, err - 0.5 * beta)
    return float(per.sum())


class LossTerms(NamedTuple):
    total: float
    cls: float
    reg: float
    tra: float

    @property
    def is_finite(self) -> bool:
        return math.isfinite(self.total)


def multitask_loss(
    cls_probs,
    labels,
    box_preds=None,
    box_targets=None,
    delta_preds=None,
    delta_targets=None,
    cfg: Optional[LossConfig] = None,
) -> LossTerms:
    """Classification + box regression + tracking regression loss.

    Args:
        cls_probs: (N, C) softmax rows, column 0 is background.
        labels: (N,) ground-truth class index per RoI.
        box_preds, box_targets: (N_fg, k) residuals for the foreground RoIs.
        delta_preds, delta_targets: (N_tra, 4) tracking targets for RoIs whose
            object is visible in both frames.
        cfg: term weights and smooth L1 beta.

    Returns:
        ``LossTerms(total, cls, reg, tra)``. A zero probability at a
        ground-truth index gives ``total == inf`` (``is_finite`` is False).
        Empty foreground or tracked sets contribute 0.
    """
    cfg = cfg or LossConfig()
    probs = np.asarray(cls_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("need at least one RoI")
    n = probs.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise ValueError("label index out of range")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must be non-negative and sum to 1")

    p_true = probs[np.arange(n), labels]
    with np.errstate(divide="ignore"):
        l_cls = float(np.mean(-np.log(p_true)))

    n_fg = _count_rows(box_preds, box_targets)
    n_tra = _count_rows(delta_preds, delta_targets)
    if not n_tra <= n_fg <= n:
        raise ValueError(f"need N_tra <= N_fg <= N, got {n_tra}, {n_fg}, {n}")

    beta = cfg.smooth_l1_beta
    l_reg = 0.0
    if n_fg:
        l_reg = sum(smooth_l1(p, t, beta) for p, t in zip(box_preds, box_targets)) / n_fg
    l_tra = 0.0
    if n_tra:
        l_tra = sum(smooth_l1(p, t, beta) for p, t in zip(delta_preds, delta_targets)) / n_tra

    total = l_cls + cfg.lambda_reg * l_reg + cfg.lambda_tra * l_tra
    return LossTerms(float(total), l_cls, float(l_reg), float(l_tra))


def _count_rows(preds, targets) -> int:
    if preds is None and targets is None:
        return 0
    if preds is None or targets is None:
        raise ValueError("predictions and targets must be given together")
    if len(preds) != len(targets):
        raise ValueError(f"row count mismatch: {len(preds)} vs {len(targets)}")
    return len(preds)
