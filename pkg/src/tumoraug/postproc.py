"""RC suppression, lesion-size thresholding and softmax-averaging ensembles.

Probability volumes are ``(5, nx, ny, nz)`` float arrays with channels in
label-code order (background, NETC, SNFH, ET, RC).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DimsMismatchError, EmptyListError
from .metrics import connected_components
from .volume import RC, Phase, Region, region_mask

THRESHOLD_ORDER = (Region.WT, Region.TC, Region.ET, Region.RC)


@dataclass(frozen=True)
class ThresholdSet:
    """Minimum lesion sizes (voxels) per region, per phase.

    Regions absent from a phase's mapping are not thresholded.  RC is never
    thresholded for pre-treatment cases.
    """

    name: str
    pre: Mapping[Region, int] = field(default_factory=dict)
    post: Mapping[Region, int] = field(default_factory=dict)

    def __post_init__(self):
        for phase_map in (self.pre, self.post):
            for region, value in phase_map.items():
                if Region(region) not in THRESHOLD_ORDER:
                    raise ValueError(f"thresholds apply to WT/TC/ET/RC only, got {region}")
                if value < 0:
                    raise ValueError(f"threshold for {region} must be >= 0, got {value}")
        object.__setattr__(self, "pre", {Region(k): int(v) for k, v in self.pre.items()})
        object.__setattr__(self, "post", {Region(k): int(v) for k, v in self.post.items()})

    def for_phase(self, phase: Phase | str) -> dict[Region, int]:
        phase = Phase.parse(phase)
        table = dict(self.pre if phase is Phase.PRE else self.post)
        if phase is Phase.PRE:
            table.pop(Region.RC, None)
        return table

    @classmethod
    def preset(cls, name: str) -> "ThresholdSet":
        key = name.strip().lower().replace(" ", "").replace("_", "")
        if key not in _PRESETS:
            raise ValueError(f"unknown threshold set {name!r}; choose from {sorted(_PRESETS)}")
        return _PRESETS[key]

    @classmethod
    def from_json(cls, doc, name: str = "custom") -> "ThresholdSet":
        """Build from ``{"phase", "wt", "tc", "et", "rc"}`` entries.

        ``doc`` is a preset name, one entry, or a list of entries.  An entry
        without ``phase`` (or with ``"both"``) applies to both phases.
        """
        if isinstance(doc, str):
            return cls.preset(doc)
        entries = [doc] if isinstance(doc, Mapping) else list(doc)
        pre: dict[Region, int] = {}
        post: dict[Region, int] = {}
        for entry in entries:
            unknown = set(entry) - {"phase", "wt", "tc", "et", "rc"}
            if unknown:
                raise ValueError(f"unknown threshold keys: {sorted(unknown)}")
            values = {Region(k.upper()): int(v) for k, v in entry.items() if k != "phase"}
            phase = str(entry.get("phase", "both")).lower()
            targets = [pre, post] if phase == "both" else \
                [pre if Phase.parse(phase) is Phase.PRE else post]
            for t in targets:
                t.update(values)
        return cls(name, pre, post)

    def to_json(self) -> list[dict]:
        return [
            {"phase": phase.value, **{r.value.lower(): v for r, v in table.items()}}
            for phase, table in ((Phase.PRE, self.pre), (Phase.POST, self.post))
        ]


_SET1 = {Region.WT: 200, Region.TC: 100, Region.ET: 60, Region.RC: 70}
_PRESETS = {
    "set0": ThresholdSet("set0"),
    "set1": ThresholdSet("set1", pre=_SET1, post=_SET1),
    "set2": ThresholdSet(
        "set2",
        pre={Region.WT: 250, Region.TC: 150, Region.ET: 100},
        post={Region.WT: 200, Region.TC: 100, Region.ET: 50, Region.RC: 80},
    ),
}


def argmax_labels(prob: np.ndarray) -> np.ndarray:
    """Per-voxel argmax; ties resolve to the lowest channel."""
    return np.argmax(np.asarray(prob), axis=0).astype(np.uint8)


def suppress_rc(prob: np.ndarray) -> np.ndarray:
    """Zero the RC channel and relabel each voxel by the remaining argmax."""
    prob = np.asarray(prob)
    return argmax_labels(prob[:RC])


def _threshold_pass(label: np.ndarray, table: Mapping[Region, int]) -> np.ndarray:
    out = label.copy()
    for region in THRESHOLD_ORDER:
        minimum = table.get(region, 0)
        if minimum <= 0:
            continue
        cc = connected_components(region_mask(out, region))
        small = np.flatnonzero(cc.sizes < minimum) + 1
        if small.size:
            out[np.isin(cc.labels, small)] = 0
    return out


def apply_thresholds(label: np.ndarray, ts: ThresholdSet, phase: Phase | str,
                     cascade: bool = True) -> np.ndarray:
    """Remove 26-connected lesions smaller than the region's threshold.

    One pass visits WT, TC, ET, RC in that order, each step seeing the output
    of the previous one.  Removing a small ET rim can cut a WT lesion in two,
    leaving a new undersized piece, so with ``cascade`` the pass is repeated
    until nothing changes: every surviving lesion then meets its minimum and
    the operation is idempotent.  ``cascade=False`` runs a single pass.
    """
    label = np.asarray(getattr(label, "data", label))
    table = ts.for_phase(phase)
    out = _threshold_pass(label, table)
    if cascade:
        prev = label
        while np.count_nonzero(out) != np.count_nonzero(prev):
            prev, out = out, _threshold_pass(out, table)
    return out


def ensemble(probs: Sequence[np.ndarray]) -> np.ndarray:
    """Voxel-wise mean of the models' softmax outputs.

    Values are sorted along the model axis and summed in float64 as offsets
    from the per-voxel minimum, so the result does not depend on the order of
    ``probs`` and averaging k copies of a volume returns it bit-for-bit.
    """
    probs = [np.asarray(p) for p in probs]
    if not probs:
        raise EmptyListError("ensemble needs at least one probability volume")
    shapes = {p.shape for p in probs}
    if len(shapes) != 1:
        raise DimsMismatchError(f"probability volumes differ in shape: {sorted(shapes)}")
    dtype = np.result_type(*probs)
    if len(probs) == 1:
        return probs[0].copy()
    stack = np.sort(np.stack(probs).astype(np.float64), axis=0)
    # anchor on the per-voxel minimum so identical inputs give exact zeros
    low = stack[0]
    return (low + (stack - low).sum(axis=0) / len(probs)).astype(dtype)


def ensemble_predict(probs: Sequence[np.ndarray], phase: Phase | str,
                     ts: ThresholdSet | None = None, cascade: bool = True) -> np.ndarray:
    mean = ensemble(probs)
    phase = Phase.parse(phase)
    label = suppress_rc(mean) if phase is Phase.PRE else argmax_labels(mean)
    return apply_thresholds(label, ts or ThresholdSet.preset("set0"), phase, cascade=cascade)


def load_threshold_set(spec: str) -> ThresholdSet:
    """Preset name or path to a JSON document."""
    if spec.lower().replace("_", "") in _PRESETS:
        return ThresholdSet.preset(spec)
    with open(spec) as fh:
        return ThresholdSet.from_json(json.load(fh), name=spec)
