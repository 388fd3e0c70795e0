"""Lesion-wise detection scoring: thresholding, dilation fusion and matching."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import GeometryError, InputError, ParameterError
from .volume import Volume, connected_components, dilate


def _array(x):
    return x.data if isinstance(x, Volume) else np.asarray(x)


def binarize(heatmap, threshold=0.5):
    """Voxel is foreground iff its probability is strictly above ``threshold``."""
    if not 0.0 <= threshold < 1.0:
        raise ParameterError(f"threshold must lie in [0, 1), got {threshold}")
    p = _array(heatmap)
    if p.size and (np.nanmin(p) < 0.0 or np.nanmax(p) > 1.0 or np.isnan(p).any()):
        raise InputError("heat map values must lie in [0, 1]")
    out = (p > threshold).astype(np.uint8)
    return Volume(out, heatmap.grid) if isinstance(heatmap, Volume) else out


@dataclass
class LesionMatchResult:
    case_id: str | None
    tp: int
    fp: int
    fn: int
    pairs: dict  # predicted component label -> tuple of overlapped ground-truth labels
    pred_sizes: dict = field(default_factory=dict)  # label -> voxels, after dilation
    gt_sizes: dict = field(default_factory=dict)
    pred_labels: np.ndarray | None = field(default=None, repr=False, compare=False)
    gt_labels: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_gt(self):
        return self.tp + self.fn

    def to_dict(self):
        return {
            "case_id": self.case_id,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "pairs": {str(k): list(v) for k, v in self.pairs.items()},
            "pred_sizes": {str(k): v for k, v in self.pred_sizes.items()},
            "gt_sizes": {str(k): v for k, v in self.gt_sizes.items()},
        }


def _check_same_grid(pred, gt):
    if isinstance(pred, Volume) and isinstance(gt, Volume):
        if not pred.grid.same_as(gt.grid):
            raise GeometryError(f"prediction grid {pred.grid} differs from ground-truth grid {gt.grid}")
    elif _array(pred).shape != _array(gt).shape:
        raise GeometryError(f"prediction shape {_array(pred).shape} differs from ground-truth shape {_array(gt).shape}")


def _sizes(labels, count):
    counts = np.bincount(labels.ravel(), minlength=count + 1)
    return {i: int(counts[i]) for i in range(1, count + 1)}


def count_matches(pairs, n_gt):
    """TP/FP/FN from the component overlap table.

    Every ground-truth lesion touched by any prediction is a TP, so one
    prediction covering two lesions scores two TPs. A prediction touching
    nothing is a FP.
    """
    hit = set()
    fp = 0
    for gts in pairs.values():
        if gts:
            hit.update(gts)
        else:
            fp += 1
    return len(hit), fp, n_gt - len(hit)


def match_lesions(pred, gt, dilation_radius=6, connectivity=26, case_id=None):
    """Match predicted and ground-truth lesions by at least one shared voxel.

    Only the prediction is dilated (Euclidean ball, voxel units) so that
    tightly neighbouring detections fuse; ``dilation_radius=0`` skips it.
    """
    _check_same_grid(pred, gt)
    if dilation_radius < 0:
        raise ParameterError(f"dilation radius must be non-negative, got {dilation_radius}")
    p = _array(pred)
    if p.any() and dilation_radius > 0:
        p = dilate(p, dilation_radius)
    plab, np_ = connected_components(p, connectivity)
    glab, ng = connected_components(_array(gt), connectivity)
    both = (plab > 0) & (glab > 0)
    code = plab[both].astype(np.int64) * (ng + 1) + glab[both]
    pairs = {i: () for i in range(1, np_ + 1)}
    linked = {}
    for c in np.unique(code):
        linked.setdefault(int(c // (ng + 1)), []).append(int(c % (ng + 1)))
    for k, v in linked.items():
        pairs[k] = tuple(sorted(v))
    tp, fp, fn = count_matches(pairs, ng)
    return LesionMatchResult(case_id, tp, fp, fn, pairs, _sizes(plab, np_), _sizes(glab, ng), plab, glab)


@dataclass(frozen=True)
class CaseMetrics:
    """Lesion-level ratios; ``None`` marks an undefined ratio."""

    case_id: str | None
    tp: int
    fp: int
    fn: int
    sensitivity: float | None
    ppv: float | None
    f1: float | None

    @property
    def excluded(self):
        return self.f1 is None

    def to_dict(self):
        return asdict(self)


def case_metrics(r):
    tp, fp, fn = int(r.tp), int(r.fp), int(r.fn)
    if min(tp, fp, fn) < 0:
        raise InputError(f"negative counts TP={tp} FP={fp} FN={fn}")
    sens = tp / (tp + fn) if tp + fn else None
    ppv = tp / (tp + fp) if tp + fp else None
    f1 = 2 * tp / (2 * tp + fn + fp) if tp + fn + fp else None
    return CaseMetrics(getattr(r, "case_id", None), tp, fp, fn, sens, ppv, f1)


def evaluate_heatmap(heatmap, gt, threshold=0.5, dilation_radius=6, connectivity=26, case_id=None):
    """Binarize, match and score one case."""
    r = match_lesions(binarize(heatmap, threshold), gt, dilation_radius, connectivity, case_id)
    return r, case_metrics(r)
