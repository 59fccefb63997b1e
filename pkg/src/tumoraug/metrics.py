"""Legacy and lesion-wise Dice / normalized surface Dice.

A *lesion* is a 26-connected component of a region mask.  Lesion-wise scores
match every prediction component to at most one ground-truth lesion via the
lesion's dilated neighbourhood; unmatched ground-truth lesions and unmatched
prediction components each score 0 and count in the denominator.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .volume import REGIONS, Phase, Region, check_same_shape, region_mask

METRIC_NAMES = ("legacy_dice", "lesion_dice", "legacy_nsd", "lesion_nsd")
CSV_COLUMNS = ("case_id", "region") + METRIC_NAMES

DEFAULT_DILATION = 3
DEFAULT_TOLERANCE_MM = 1.0

_CUBE = np.ones((3, 3, 3), dtype=bool)
_CROSS = ndimage.generate_binary_structure(3, 1)


@dataclass
class ComponentLabeling:
    labels: np.ndarray          # int32, 0 = background, components 1..count
    count: int
    sizes: np.ndarray           # sizes[i] = voxel count of component i + 1

    def mask(self, component_id: int) -> np.ndarray:
        return self.labels == component_id


def connected_components(binary: np.ndarray, connectivity: int = 26) -> ComponentLabeling:
    binary = np.asarray(binary, dtype=bool)
    if connectivity == 26:
        structure = _CUBE
    elif connectivity == 6:
        structure = _CROSS
    else:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    labels, count = ndimage.label(binary, structure=structure)
    labels = labels.astype(np.int32, copy=False)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return ComponentLabeling(labels, int(count), sizes)


def dilate(binary: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Iterated dilation with the full 3x3x3 element; voxels outside are background."""
    binary = np.asarray(binary, dtype=bool)
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    if iterations == 0 or not binary.any():
        return binary.copy()
    # k passes of the 3x3x3 cube == one (2k+1)^3 box, which separates per axis
    box = bbox_slices(binary, pad=iterations)
    block = binary[box].view(np.uint8)
    for axis in range(binary.ndim):
        block = ndimage.maximum_filter1d(block, 2 * iterations + 1, axis=axis,
                                         mode="constant", cval=0)
    out = np.zeros_like(binary)
    out[box] = block.astype(bool)
    return out


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    check_same_shape(a, b, names=("a", "b"))
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(binary: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbour in the background or off the grid."""
    binary = np.asarray(binary, dtype=bool)
    if not binary.any():
        return binary.copy()
    interior = ndimage.binary_erosion(binary, structure=_CROSS, border_value=0)
    return binary & ~interior


def _surface_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance in mm from each voxel of ``src`` to the nearest voxel of ``dst``."""
    edt = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return edt[src]


def bbox_slices(mask: np.ndarray, pad: int = 0) -> tuple[slice, ...]:
    """Bounding box of the nonzero voxels, grown by ``pad`` and clipped to the grid."""
    out = []
    for axis, n in enumerate(mask.shape):
        others = tuple(a for a in range(mask.ndim) if a != axis)
        hit = np.flatnonzero(np.any(mask, axis=others))
        if not hit.size:
            raise ValueError("empty mask has no bounding box")
        out.append(slice(max(int(hit[0]) - pad, 0), min(int(hit[-1]) + pad + 1, n)))
    return tuple(out)


def nsd(pred: np.ndarray, gt: np.ndarray, tol_mm: float = DEFAULT_TOLERANCE_MM,
        spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    check_same_shape(pred, gt, names=("pred", "gt"))
    if tol_mm < 0:
        raise ValueError("tolerance must be non-negative")
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 1.0
    if not (has_p and has_g):
        return 0.0
    # crop to the joint bounding box; both surfaces lie inside it
    box = bbox_slices(pred | gt, pad=1)
    pred, gt = pred[box], gt[box]
    sp = surface_voxels(pred)
    sg = surface_voxels(gt)
    spacing = tuple(float(s) for s in spacing)
    d_pg = _surface_distances(sp, sg, spacing)
    d_gp = _surface_distances(sg, sp, spacing)
    hits = int((d_pg <= tol_mm).sum()) + int((d_gp <= tol_mm).sum())
    return hits / (d_pg.size + d_gp.size)


# ---------------------------------------------------------------------------
# lesion matching
# ---------------------------------------------------------------------------

@dataclass
class GTLesion:
    id: int
    voxels: int
    matched: list[int] = field(default_factory=list)
    score: float = 0.0


@dataclass
class LesionMatchReport:
    lesions: list[GTLesion]
    false_positives: list[tuple[int, int]]  # (pred component id, voxel count)
    score: float

    @property
    def n_false_negatives(self) -> int:
        return sum(1 for les in self.lesions if not les.matched)


@dataclass
class _Matching:
    gt: ComponentLabeling
    pred: ComponentLabeling
    assigned: dict[int, list[int]]   # gt id -> pred component ids
    unmatched: list[int]              # pred component ids


def _match(pred: np.ndarray, gt: np.ndarray, dilation_iters: int) -> _Matching:
    gt_cc = connected_components(gt)
    pred_cc = connected_components(pred)
    # overlaps[g, p] = voxels of pred component p+1 inside the neighbourhood of gt lesion g+1
    overlaps = np.zeros((gt_cc.count, pred_cc.count), dtype=np.int64)
    if gt_cc.count and pred_cc.count:
        objects = ndimage.find_objects(gt_cc.labels)
        for g, sl in enumerate(objects):
            box = tuple(
                slice(max(s.start - dilation_iters, 0), min(s.stop + dilation_iters, n))
                for s, n in zip(sl, gt.shape)
            )
            hood = dilate(gt_cc.labels[box] == g + 1, dilation_iters)
            counts = np.bincount(pred_cc.labels[box][hood], minlength=pred_cc.count + 1)
            overlaps[g] = counts[1:]
    assigned: dict[int, list[int]] = {g: [] for g in range(1, gt_cc.count + 1)}
    unmatched = []
    for p in range(pred_cc.count):
        col = overlaps[:, p] if gt_cc.count else np.zeros(0, dtype=np.int64)
        if col.size and col.max() > 0:
            # argmax returns the first maximum -> ties go to the lowest GT id
            assigned[int(np.argmax(col)) + 1].append(p + 1)
        else:
            unmatched.append(p + 1)
    return _Matching(gt_cc, pred_cc, assigned, unmatched)


def _lesion_wise(pred, gt, dilation_iters: int,
                 score_fn: Callable[[np.ndarray, np.ndarray], float]) -> LesionMatchReport:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    check_same_shape(pred, gt, names=("pred", "gt"))
    m = _match(pred, gt, dilation_iters)
    lesions = []
    for g in range(1, m.gt.count + 1):
        matched = m.assigned[g]
        lesion = GTLesion(g, int(m.gt.sizes[g - 1]), matched)
        if matched:
            gt_mask = m.gt.labels == g
            pred_mask = np.isin(m.pred.labels, matched)
            box = bbox_slices(gt_mask | pred_mask, pad=1)
            lesion.score = score_fn(pred_mask[box], gt_mask[box])
        lesions.append(lesion)
    fps = [(p, int(m.pred.sizes[p - 1])) for p in m.unmatched]
    denom = len(lesions) + len(fps)
    score = 1.0 if denom == 0 else sum(les.score for les in lesions) / denom
    return LesionMatchReport(lesions, fps, score)


def lesion_wise_dice(pred: np.ndarray, gt: np.ndarray,
                     dilation_iters: int = DEFAULT_DILATION) -> tuple[float, LesionMatchReport]:
    report = _lesion_wise(pred, gt, dilation_iters, dice)
    return report.score, report


def lesion_wise_nsd(pred: np.ndarray, gt: np.ndarray, tol_mm: float = DEFAULT_TOLERANCE_MM,
                    dilation_iters: int = DEFAULT_DILATION,
                    spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    report = _lesion_wise(pred, gt, dilation_iters,
                          lambda p, g: nsd(p, g, tol_mm, spacing))
    return report.score


# ---------------------------------------------------------------------------
# per-case evaluation and reports
# ---------------------------------------------------------------------------

@dataclass
class RegionScores:
    legacy_dice: float
    lesion_dice: float
    legacy_nsd: float
    lesion_nsd: float

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass
class CaseScores:
    """Scores per region; a region maps to ``None`` when it is not reported."""

    case_id: str
    phase: Phase
    regions: dict[Region, RegionScores | None]

    def get(self, region: Region | str, metric: str) -> float | None:
        scores = self.regions.get(Region(region))
        return None if scores is None else getattr(scores, metric)

    def rows(self) -> list[dict]:
        out = []
        for region in REGIONS:
            scores = self.regions.get(region)
            if scores is None:
                continue
            out.append({"case_id": self.case_id, "region": region.value, **scores.as_dict()})
        return out


def evaluate_case(pred, gt, phase: Phase | str = Phase.POST, *, case_id: str = "",
                  spacing: Sequence[float] = (1.0, 1.0, 1.0),
                  tol_mm: float = DEFAULT_TOLERANCE_MM,
                  dilation_iters: int = DEFAULT_DILATION) -> CaseScores:
    """All four metrics for each region; RC is skipped for pre-treatment cases."""
    pred = np.asarray(getattr(pred, "data", pred))
    gt = np.asarray(getattr(gt, "data", gt))
    check_same_shape(pred, gt, names=("pred", "gt"))
    phase = Phase.parse(phase)
    regions: dict[Region, RegionScores | None] = {}
    for region in REGIONS:
        if region is Region.RC and phase is Phase.PRE:
            regions[region] = None
            continue
        p = region_mask(pred, region)
        g = region_mask(gt, region)
        regions[region] = RegionScores(
            legacy_dice=dice(p, g),
            lesion_dice=lesion_wise_dice(p, g, dilation_iters)[0],
            legacy_nsd=nsd(p, g, tol_mm, spacing),
            lesion_nsd=lesion_wise_nsd(p, g, tol_mm, dilation_iters, spacing),
        )
    return CaseScores(case_id, phase, regions)


def write_scores_csv(scores: Iterable[CaseScores], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for case in scores:
            for row in case.rows():
                writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v)
                                 for k, v in row.items()})


def read_scores_csv(path, phases: dict[str, Phase] | None = None) -> list[CaseScores]:
    by_case: dict[str, dict[Region, RegionScores | None]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            regions = by_case.setdefault(row["case_id"], {})
            regions[Region(row["region"])] = RegionScores(
                *(float(row[m]) for m in METRIC_NAMES))
    out = []
    for case_id, regions in by_case.items():
        phase = (phases or {}).get(case_id, Phase.POST)
        for region in REGIONS:
            regions.setdefault(region, None)
        out.append(CaseScores(case_id, phase, regions))
    return out


def scores_to_json(scores: Iterable[CaseScores]) -> str:
    rows = [row for case in scores for row in case.rows()]
    return json.dumps(rows, indent=2)
