"""Detection metrics: greedy matching, average precision over distance or
IoU thresholds, and the per-axis translation-error decomposition.

Matching in ``center_distance`` mode uses planar center distance (z is
deliberately ignored, which is what lets vertically misplaced boxes keep a
perfect distance-based score); ``iou`` mode uses volumetric IoU and exposes
exactly that failure.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import iou3d

AP_MIN_RECALL = 0.1
AP_MIN_PRECISION = 0.1
_N_RECALL_SAMPLES = 101
ERROR_REFERENCE_DISTANCE = 2.0


@dataclass(frozen=True)
class MatchConfig:
    mode: str = "center_distance"
    distance_thresholds: tuple = (0.5, 1.0, 2.0, 4.0)
    iou_threshold: float = 0.7

    def __post_init__(self):
        if self.mode not in ("center_distance", "iou"):
            raise ConfigError(f"unknown match mode {self.mode!r}")
        t = self.distance_thresholds
        if not t or any(a <= 0 for a in t) or list(t) != sorted(t):
            raise ConfigError("distance thresholds must be positive and ascending")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError("IoU threshold must be in (0, 1]")

    @property
    def thresholds(self):
        return self.distance_thresholds if self.mode == "center_distance" else (self.iou_threshold,)


@dataclass
class EvalReport:
    mode: str
    ap: dict                 # class_id -> {threshold -> AP or None}
    map_score: float
    mean_abs_error: dict     # axis -> mean |error| over matched pairs
    tp: int
    fp: int
    misses: int
    n_gt: int
    n_pred: int

    def as_dict(self):
        return {
            "mode": self.mode,
            "mAP": self.map_score,
            "ap": {
                int(k): {float(t): (None if v is None else float(v)) for t, v in th.items()}
                for k, th in self.ap.items()
            },
            "mean_abs_error": {k: float(v) for k, v in self.mean_abs_error.items()},
            "counts": {
                "tp": self.tp, "fp": self.fp, "misses": self.misses,
                "n_gt": self.n_gt, "n_pred": self.n_pred,
            },
        }


def _center_distance(a, b):
    return math.hypot(a.x - b.x, a.y - b.y)


def match_scene(preds, gts, mode, threshold):
    """Greedy one-to-one matching inside a single scene and class.

    Predictions are visited by descending score; each claims the best
    unclaimed ground truth (nearest center in distance mode, highest
    volumetric IoU in IoU mode) when it passes the threshold.
    Returns (matched index pairs, true-positive flags in visit order,
    visit order).
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    claimed = set()
    pairs = []
    tp_flags = []
    for i in order:
        best_j = -1
        best_key = None
        for j, gt in enumerate(gts):
            if j in claimed:
                continue
            if mode == "center_distance":
                d = _center_distance(preds[i], gt)
                if d <= threshold and (best_key is None or d < best_key):
                    best_key, best_j = d, j
            else:
                v = iou3d(preds[i], gt)
                if v >= threshold and (best_key is None or v > best_key):
                    best_key, best_j = v, j
        if best_j >= 0:
            claimed.add(best_j)
            pairs.append((i, best_j))
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    return pairs, tp_flags, order


def average_precision(scores, tp_flags, n_gt):
    """AP from score-ranked correctness flags, nuScenes style.

    The precision curve is sampled on a uniform 101-point recall grid; the
    area keeps only recall > 0.1 and precision > 0.1 and renormalizes by
    the remaining 0.9 x 0.9 operating rectangle. Undefined (None) when
    there is no ground truth.
    """
    if n_gt == 0:
        return None
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    flags = np.asarray(tp_flags, dtype=np.float64)[order]
    tp_cum = np.cumsum(flags)
    recall = tp_cum / n_gt
    precision = tp_cum / np.arange(1, flags.size + 1)
    grid = np.linspace(0.0, 1.0, _N_RECALL_SAMPLES)
    sampled = np.interp(grid, recall, precision, right=0.0)
    start = round(100 * AP_MIN_RECALL) + 1
    clipped = np.clip(sampled[start:] - AP_MIN_PRECISION, 0.0, None)
    return float(np.clip(np.mean(clipped) / (1.0 - AP_MIN_PRECISION), 0.0, 1.0))


def evaluate_detections(preds, gts, cfg=MatchConfig()):
    """Full report over (scene_id, Box3D) prediction/ground-truth pairs.

    AP is computed per class per threshold and averaged into mAP over the
    classes that have ground truth. Per-axis errors and TP/FP/miss counts
    come from the 2.0 m distance threshold in center-distance mode and from
    the IoU threshold in IoU mode.
    """
    scenes = sorted({s for s, _ in preds} | {s for s, _ in gts})
    classes = sorted({b.class_id for _, b in preds} | {b.class_id for _, b in gts})
    by_scene_pred = {s: [b for ps, b in preds if ps == s] for s in scenes}
    by_scene_gt = {s: [b for gs, b in gts if gs == s] for s in scenes}

    ap = {}
    for k in classes:
        n_gt_k = sum(b.class_id == k for _, b in gts)
        ap[k] = {}
        for thr in cfg.thresholds:
            scores, flags = [], []
            for s in scenes:
                p = [b for b in by_scene_pred[s] if b.class_id == k]
                g = [b for b in by_scene_gt[s] if b.class_id == k]
                _, tp_flags, order = match_scene(p, g, cfg.mode, thr)
                scores.extend(p[i].score for i in order)
                flags.extend(tp_flags)
            ap[k][thr] = average_precision(scores, flags, n_gt_k)

    per_class = [
        float(np.mean([v for v in ap[k].values()]))
        for k in classes
        if all(v is not None for v in ap[k].values())
    ]
    map_score = float(np.mean(per_class)) if per_class else 0.0

    # error decomposition and counts at the reference threshold
    ref = ERROR_REFERENCE_DISTANCE if cfg.mode == "center_distance" else cfg.iou_threshold
    errs = {"x": [], "y": [], "z": []}
    tp = fp = misses = 0
    for s in scenes:
        for k in classes:
            p = [b for b in by_scene_pred[s] if b.class_id == k]
            g = [b for b in by_scene_gt[s] if b.class_id == k]
            pairs, tp_flags, _ = match_scene(p, g, cfg.mode, ref)
            tp += len(pairs)
            fp += len(p) - len(pairs)
            misses += len(g) - len(pairs)
            for i, j in pairs:
                errs["x"].append(abs(p[i].x - g[j].x))
                errs["y"].append(abs(p[i].y - g[j].y))
                errs["z"].append(abs(p[i].z - g[j].z))
    mean_err = {a: (float(np.mean(v)) if v else 0.0) for a, v in errs.items()}
    return EvalReport(
        mode=cfg.mode,
        ap=ap,
        map_score=map_score,
        mean_abs_error=mean_err,
        tp=tp,
        fp=fp,
        misses=misses,
        n_gt=len(gts),
        n_pred=len(preds),
    )
