"""On-the-fly synthetic tumor insertion.

For each training case a donor label from another patient is picked and
modified (optional SNFH removal, down-scaling), placed in healthy brain, the
four modalities are noised under the placed label and a synthesizer paints a
tumor matching the label into the noise.  A second tumor may follow.

Random draws come from :class:`RandomStream`.  Its ``decisions`` generator is
consumed in a fixed order so that the sequence of choices depends only on the
seed and on the geometry of the case:

1. insert a tumor at all?           ``random() < p_insert``
2. donor index                      ``integers(len(donors))``
3. remove SNFH?                     ``random() < p_remove_snfh``
4. scale                            ``uniform(lo, hi)``
5. placement tries                  ``integers(0, dim - size + 1, size=3)`` per try
6. second tumor?                    ``random() < p_second``, then 2-5 again

Voxel noise is drawn from the separate ``noise`` generator.
"""
from __future__ import annotations

import json
import logging
import math
import weakref
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, LabelOutsideSupportError, NoPlacementFoundError
from .metrics import bbox_slices, dilate
from .phantom import LESION_CONTRAST, brain_mask
from .volume import ET, MODALITIES, NETC, RC, SNFH, MultiModalCase, Phase

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    p_insert: float = 0.6
    p_remove_snfh: float = 0.7
    p_second: float = 0.4
    scale_bounds_removed: tuple[float, float] = (0.1, 0.3)
    scale_bounds_kept: tuple[float, float] = (0.3, 0.8)
    max_tumors: int = 2
    placement_margin_vox: int = 3
    max_placement_tries: int = 100

    def __post_init__(self):
        for name in ("p_insert", "p_remove_snfh", "p_second"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name in ("scale_bounds_removed", "scale_bounds_kept"):
            bounds = tuple(float(v) for v in getattr(self, name))
            if len(bounds) != 2 or not 0.0 < bounds[0] < bounds[1] <= 1.0:
                raise ValueError(f"{name} must satisfy 0 < lo < hi <= 1, got {bounds}")
            object.__setattr__(self, name, bounds)
        if self.max_tumors != 2:
            raise ValueError("max_tumors is fixed at 2")
        if self.placement_margin_vox < 0:
            raise ValueError("placement_margin_vox must be >= 0")
        if self.max_placement_tries < 1:
            raise ValueError("max_placement_tries must be >= 1")

    @classmethod
    def preset(cls, name: str) -> "AugmentConfig":
        try:
            return PRESETS[name.lower()]
        except KeyError:
            raise ValueError(f"unknown augmentation preset {name!r}; "
                             f"choose from {sorted(PRESETS)}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_bounds_removed"] = list(self.scale_bounds_removed)
        d["scale_bounds_kept"] = list(self.scale_bounds_kept)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "AugmentConfig":
        """Accept a full field mapping, or ``{"preset": name, **overrides}``."""
        doc = dict(doc)
        base = cls.preset(doc.pop("preset")).to_dict() if "preset" in doc else {}
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown augment config fields: {sorted(unknown)}")
        base.update(doc)
        return cls(**base)

    @classmethod
    def from_json(cls, text: str) -> "AugmentConfig":
        return cls.from_dict(json.loads(text))


PRESETS = {
    # model 2: one tumor, always with SNFH kept
    "regular": AugmentConfig(p_insert=0.75, p_remove_snfh=0.0, p_second=0.0),
    # model 3
    "custom": AugmentConfig(p_insert=0.6, p_remove_snfh=0.7, p_second=0.4),
}


class RandomStream:
    """Seed-determined pair of generators (decision draws and voxel noise)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        decision_seq, noise_seq = np.random.SeedSequence(self.seed).spawn(2)
        self.decisions = np.random.Generator(np.random.PCG64(decision_seq))
        self.noise = np.random.Generator(np.random.PCG64(noise_seq))


def _decisions(rng) -> np.random.Generator:
    return rng.decisions if isinstance(rng, RandomStream) else rng


def _noise(rng) -> np.random.Generator:
    return rng.noise if isinstance(rng, RandomStream) else rng


# ---------------------------------------------------------------------------
# donor labels
# ---------------------------------------------------------------------------

def bbox_crop(mask: np.ndarray) -> np.ndarray:
    if not np.any(mask):
        raise EmptyMaskError("mask has no tumor voxels")
    return mask[bbox_slices(mask)]


@dataclass(frozen=True, eq=False)
class Donor:
    id: str
    mask: np.ndarray  # tight crop around the donor's tumor

    def __post_init__(self):
        object.__setattr__(self, "mask", bbox_crop(np.asarray(self.mask, dtype=np.uint8)))


class LabelPool(Sequence):
    def __init__(self, donors: Iterable[Donor]):
        self.donors = list(donors)

    def __len__(self):
        return len(self.donors)

    def __getitem__(self, i):
        return self.donors[i]

    @classmethod
    def from_labels(cls, labels: Mapping[str, np.ndarray]) -> "LabelPool":
        """Tumor-free labels are skipped."""
        return cls(Donor(cid, lab) for cid, lab in labels.items() if np.any(lab))

    @classmethod
    def from_cases(cls, cases: Iterable[MultiModalCase]) -> "LabelPool":
        return cls.from_labels({c.id: c.label for c in cases})

    def eligible(self, case_id: str, phase: Phase | None = None) -> list[Donor]:
        """Donors from other patients.

        RC cannot be placed in a pre-treatment case, so for those targets
        donors consisting only of RC are left out.
        """
        donors = [d for d in self.donors if d.id != case_id]
        if phase is Phase.PRE:
            donors = [d for d in donors if ((d.mask > 0) & (d.mask != RC)).any()]
        return donors


# ---------------------------------------------------------------------------
# label modifier
# ---------------------------------------------------------------------------

_REMAP = np.arange(256, dtype=np.uint8)
_REMAP[SNFH] = ET
_REMAP[ET] = NETC


def adapt_classes(mask: np.ndarray, remove_snfh: bool) -> np.ndarray:
    """SNFH -> ET and ET -> NETC, applied simultaneously."""
    mask = np.asarray(mask, dtype=np.uint8)
    if not remove_snfh:
        return mask.copy()
    return _REMAP[mask]


def sample_scale(snfh_removed: bool, rng, cfg: AugmentConfig | None = None) -> float:
    cfg = cfg or PRESETS["custom"]
    lo, hi = cfg.scale_bounds_removed if snfh_removed else cfg.scale_bounds_kept
    gen = _decisions(rng)
    s = gen.uniform(lo, hi)
    while s <= lo:  # uniform() is half-open; keep the draw strictly inside
        s = gen.uniform(lo, hi)
    return float(s)


def scale_mask(mask: np.ndarray, s: float) -> np.ndarray:
    """Nearest-neighbour resample of the mask's bounding box by ``s`` per axis."""
    if not 0.0 < s <= 1.0:
        raise ValueError(f"scale must lie in (0, 1], got {s}")
    crop = bbox_crop(np.asarray(mask, dtype=np.uint8))
    # the epsilon stops e.g. 0.3 * 10 = 3.0000000000000004 rounding up to 4
    out_shape = [max(1, math.ceil(s * n - 1e-9)) for n in crop.shape]
    # sample at output voxel centres mapped through the effective ratio n/m,
    # which keeps the samples centred in the box
    idx = [np.minimum(np.floor((np.arange(m) + 0.5) * (n / m)).astype(np.intp), n - 1)
           for m, n in zip(out_shape, crop.shape)]
    return crop[np.ix_(*idx)]


# ---------------------------------------------------------------------------
# placement
# ---------------------------------------------------------------------------

def _place(forbidden: np.ndarray, brain: np.ndarray, shape: Sequence[int],
           tries: int, gen: np.random.Generator) -> tuple[int, int, int]:
    vol = np.asarray(brain.shape)
    shape = np.asarray(shape)
    if (shape > vol).any():
        raise NoPlacementFoundError(f"box {tuple(shape)} larger than volume {tuple(vol)}")
    high = vol - shape + 1
    for _ in range(tries):
        off = gen.integers(0, high, size=3)
        box = tuple(slice(int(o), int(o + n)) for o, n in zip(off, shape))
        if brain[box].all() and not forbidden[box].any():
            return tuple(int(o) for o in off)
    raise NoPlacementFoundError(f"no healthy box of size {tuple(shape)} in {tries} tries")


def find_placement(gt: np.ndarray, brain: np.ndarray, shape: Sequence[int],
                   occupied: np.ndarray | None, cfg: AugmentConfig, rng) -> tuple[int, int, int]:
    """Offset of a box of ``shape`` fully inside ``brain`` that avoids tumor.

    The ground-truth tumor is grown by ``cfg.placement_margin_vox`` before the
    overlap test; ``occupied`` marks earlier synthetic tumors.
    """
    gt = np.asarray(getattr(gt, "data", gt))
    brain = np.asarray(brain, dtype=bool)
    forbidden = dilate(gt > 0, cfg.placement_margin_vox)
    if occupied is not None:
        forbidden |= np.asarray(occupied, dtype=bool)
    return _place(forbidden, brain, shape, cfg.max_placement_tries, _decisions(rng))


# ---------------------------------------------------------------------------
# image side
# ---------------------------------------------------------------------------

def brain_stats(img: np.ndarray, brain: np.ndarray | None = None) -> tuple[float, float]:
    """Mean and population SD of the in-brain voxels (nonzero voxels by default)."""
    img = np.asarray(img)
    vals = img[img != 0] if brain is None else img[np.asarray(brain, dtype=bool)]
    if not vals.size:
        return 0.0, 0.0
    vals = vals.astype(np.float64)
    return float(vals.mean()), float(vals.std())


def insert_noise(img: np.ndarray, support: np.ndarray, rng, brain: np.ndarray | None = None,
                 stats: tuple[float, float] | None = None) -> np.ndarray:
    """Replace ``support`` voxels with Normal(mu_brain, sigma_brain) draws."""
    img = np.asarray(img)
    support = np.asarray(support, dtype=bool)
    out = np.array(img, dtype=np.float32, copy=True)
    n = int(support.sum())
    if n == 0:
        return out
    mu, sigma = stats if stats is not None else brain_stats(img, brain)
    out[support] = _noise(rng).normal(mu, sigma, size=n).astype(np.float32)
    return out


class Synthesizer(Protocol):
    def __call__(self, noised: Mapping[str, np.ndarray], placed_label: np.ndarray,
                 support: np.ndarray, stats: Mapping[str, tuple[float, float]] | None = None
                 ) -> dict[str, np.ndarray]: ...


TEXTURE_GAIN = 0.3

_CUBE = np.ones((3, 3, 3), dtype=bool)


def procedural_synthesize(noised: Mapping[str, np.ndarray], placed_label: np.ndarray,
                          support: np.ndarray,
                          stats: Mapping[str, tuple[float, float]] | None = None
                          ) -> dict[str, np.ndarray]:
    """Paint class-specific intensities into the noised support.

    Each class is ``mu_brain * contrast`` plus a damped copy of the noise as
    texture; support voxels touching the outside are replaced by the 3x3x3
    mean of the painted image to soften the boundary.  Nothing outside
    ``support`` is modified, and the result is a pure function of the inputs.
    """
    placed_label = np.asarray(placed_label, dtype=np.uint8)
    support = np.asarray(support, dtype=bool)
    if (placed_label.astype(bool) & ~support).any():
        raise LabelOutsideSupportError("placed label extends outside the noised support")
    out = {m: np.array(noised[m], dtype=np.float32, copy=True) for m in MODALITIES}
    if not support.any():
        return out
    box = bbox_slices(support, pad=1)
    sup = support[box]
    lab = placed_label[box]
    # support voxels with a 26-neighbour outside the support
    rim = sup & ~ndimage.binary_erosion(sup, structure=_CUBE, border_value=0)
    for m_idx, name in enumerate(MODALITIES):
        mu, _ = stats[name] if stats else brain_stats(noised[name])
        region = out[name][box].astype(np.float64)
        painted = region.copy()
        gain = np.ones(lab.shape)
        for code, contrast in LESION_CONTRAST.items():
            gain[lab == code] = contrast[m_idx]
        painted[sup] = mu * gain[sup] + TEXTURE_GAIN * (region[sup] - mu)
        smooth = ndimage.uniform_filter(painted, size=3, mode="nearest")
        painted[rim] = smooth[rim]
        block = out[name][box]
        block[sup] = painted[sup].astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# full case
# ---------------------------------------------------------------------------

@dataclass
class TumorRecord:
    donor_id: str
    snfh_removed: bool
    scale: float
    offset: tuple[int, int, int] | None = None
    shape: tuple[int, int, int] | None = None
    status: str = "inserted"  # inserted | no_placement | empty_label

    @property
    def inserted(self) -> bool:
        return self.status == "inserted"


@dataclass
class AugmentOutcome:
    tumors: list[TumorRecord] = field(default_factory=list)

    @property
    def tumors_inserted(self) -> int:
        return sum(t.inserted for t in self.tumors)

    @property
    def augmented(self) -> bool:
        """True when the case was selected for augmentation (even if placement failed)."""
        return bool(self.tumors)

    def to_dict(self) -> dict:
        return {
            "tumors_inserted": self.tumors_inserted,
            "tumors": [
                {"donor_id": t.donor_id, "snfh_removed": t.snfh_removed,
                 "scale": t.scale, "offset": list(t.offset) if t.offset else None,
                 "shape": list(t.shape) if t.shape else None, "status": t.status}
                for t in self.tumors
            ],
        }


_CONTEXT: "weakref.WeakKeyDictionary[MultiModalCase, tuple]" = weakref.WeakKeyDictionary()


def _case_context(case: MultiModalCase):
    """Brain mask and per-modality brain statistics, cached per (immutable) case."""
    ctx = _CONTEXT.get(case)
    if ctx is None:
        brain = brain_mask(case)
        ctx = (brain, {m: brain_stats(img, brain) for m, img in case.modalities.items()})
        _CONTEXT[case] = ctx
    return ctx


def augment_case(case: MultiModalCase, pool: LabelPool | Sequence[Donor], cfg: AugmentConfig,
                 rng: RandomStream | int, synthesizer: Synthesizer = procedural_synthesize,
                 brain: np.ndarray | None = None) -> tuple[MultiModalCase, AugmentOutcome]:
    """Insert zero, one or two synthetic tumors into ``case``.

    The input case is returned unchanged (the same object) when no tumor is
    placed.  Failed placements are recorded in the outcome, never raised.
    Donor RC voxels are dropped when the target is a pre-treatment case.
    """
    if not isinstance(rng, RandomStream):
        rng = RandomStream(rng)
    gen = rng.decisions
    outcome = AugmentOutcome()
    if not gen.random() < cfg.p_insert:
        return case, outcome

    pool = pool if isinstance(pool, LabelPool) else LabelPool(pool)
    donors = pool.eligible(case.id, case.phase)
    if not donors:
        raise ValueError(f"no donor labels available for case {case.id!r}")

    if brain is None:
        brain, stats = _case_context(case)
    else:
        brain = np.asarray(brain, dtype=bool)
        stats = {m: brain_stats(img, brain) for m, img in case.modalities.items()}
    forbidden = dilate(case.label > 0, cfg.placement_margin_vox)
    label = case.label.copy()
    images = case.modalities

    for attempt in range(cfg.max_tumors):
        if attempt and not gen.random() < cfg.p_second:
            break
        donor = donors[int(gen.integers(len(donors)))]
        remove = bool(gen.random() < cfg.p_remove_snfh)
        scale = sample_scale(remove, gen, cfg)
        record = TumorRecord(donor.id, remove, scale)
        outcome.tumors.append(record)

        placed = scale_mask(adapt_classes(donor.mask, remove), scale)
        if case.phase is Phase.PRE:
            placed = np.where(placed == RC, 0, placed).astype(np.uint8)
        record.shape = tuple(int(n) for n in placed.shape)
        if not placed.any():
            record.status = "empty_label"
            continue
        try:
            offset = _place(forbidden, brain, placed.shape, cfg.max_placement_tries, gen)
        except NoPlacementFoundError as exc:
            log.debug("case %s: %s", case.id, exc)
            record.status = "no_placement"
            continue
        record.offset = offset

        # noise and synthesis only touch the support, so they run on a crop
        # padded by one voxel for the boundary filter
        box = tuple(slice(max(o - 1, 0), min(o + n + 1, dim))
                    for o, n, dim in zip(offset, placed.shape, case.shape))
        inner = tuple(slice(o - b.start, o - b.start + n)
                      for o, n, b in zip(offset, placed.shape, box))
        placed_crop = np.zeros(tuple(b.stop - b.start for b in box), dtype=np.uint8)
        placed_crop[inner] = placed
        support = placed_crop > 0

        noised = {m: insert_noise(images[m][box], support, rng, stats=stats[m])
                  for m in MODALITIES}
        painted = synthesizer(noised, placed_crop, support, stats)
        if images is case.modalities:
            images = {m: np.array(img) for m, img in images.items()}
        for m in MODALITIES:
            images[m][box] = painted[m]
        keep = support & (label[box] == 0)
        label[box][keep] = placed_crop[keep]
        grown = np.zeros(case.shape, dtype=bool)
        grown[box] = support
        forbidden |= dilate(grown, cfg.placement_margin_vox)

    if outcome.tumors_inserted == 0:
        return case, outcome
    for img in images.values():
        img.flags.writeable = False
    label.flags.writeable = False
    return MultiModalCase(case.id, images, label, case.phase, case.spacing), outcome
