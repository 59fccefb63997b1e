"""Seeded synthetic cases: a spherical brain with spherical, optionally shelled, lesions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import LesionOutsideBrainError
from .volume import ET, MODALITIES, NETC, RC, SNFH, MultiModalCase, Phase

# mean brain intensity per modality
BASE_INTENSITY = {"t1n": 400.0, "t1c": 450.0, "t2w": 350.0, "t2f": 300.0}
NOISE_FRACTION = 0.05

# lesion intensity relative to brain, per class and modality (t1n, t1c, t2w, t2f)
LESION_CONTRAST = {
    NETC: (0.60, 0.70, 1.60, 1.20),
    SNFH: (0.85, 0.90, 1.40, 1.60),
    ET: (0.90, 1.80, 1.20, 1.30),
    RC: (0.40, 0.40, 1.90, 0.50),
}

# shelled lesion: SNFH out to the full radius, ET rim, NETC core
SHELL_FRACTIONS = ((1.0, SNFH), (0.65, ET), (0.4, NETC))


@dataclass
class LesionSpec:
    center: tuple[float, float, float]
    radius: float
    code: int | None = None  # None -> SNFH/ET/NETC shells

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError(f"lesion radius must be >= 1, got {self.radius}")
        if self.code is not None and self.code not in (NETC, SNFH, ET, RC):
            raise ValueError(f"lesion code must be 1..4, got {self.code}")
        self.center = tuple(float(c) for c in self.center)


@dataclass
class PhantomSpec:
    case_id: str = "phantom"
    dims: tuple[int, int, int] = (64, 64, 64)
    seed: int = 0
    phase: Phase = Phase.POST
    brain_radius: float | None = None  # default: 0.45 * min(dims)
    lesions: list[LesionSpec] = field(default_factory=list)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be 3 positive ints, got {self.dims}")
        self.phase = Phase.parse(self.phase)
        self.spacing = tuple(float(v) for v in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        if self.brain_radius is None:
            self.brain_radius = 0.45 * min(self.dims)
        self.lesions = [les if isinstance(les, LesionSpec) else LesionSpec(**les)
                        for les in self.lesions]

    @property
    def brain_center(self) -> tuple[float, float, float]:
        return tuple((d - 1) / 2.0 for d in self.dims)

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        known = {"case_id", "dims", "seed", "phase", "brain_radius", "lesions", "spacing"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id, "dims": list(self.dims), "seed": self.seed,
            "phase": self.phase.value, "brain_radius": self.brain_radius,
            "spacing": list(self.spacing),
            "lesions": [{"center": list(l.center), "radius": l.radius, "code": l.code}
                        for l in self.lesions],
        }


def _sq_distance(shape: Sequence[int], center: Sequence[float]) -> np.ndarray:
    x, y, z = (np.arange(n, dtype=np.float64) - c for n, c in zip(shape, center))
    return x[:, None, None] ** 2 + y[None, :, None] ** 2 + z[None, None, :] ** 2


def sphere(shape: Sequence[int], center: Sequence[float], radius: float) -> np.ndarray:
    return _sq_distance(shape, center) <= radius * radius


def make_label(spec: PhantomSpec) -> np.ndarray:
    label = np.zeros(spec.dims, dtype=np.uint8)
    bc = spec.brain_center
    for les in spec.lesions:
        if math.dist(les.center, bc) + les.radius > spec.brain_radius:
            raise LesionOutsideBrainError(
                f"lesion at {les.center} r={les.radius} leaves the brain sphere "
                f"(r={spec.brain_radius:.1f})")
        if les.code == RC and spec.phase is Phase.PRE:
            raise ValueError("pre-treatment phantoms cannot contain RC lesions")
        d2 = _sq_distance(spec.dims, les.center)
        if les.code is not None:
            label[d2 <= les.radius ** 2] = les.code
        else:
            for frac, code in SHELL_FRACTIONS:
                label[d2 <= (frac * les.radius) ** 2] = code
    return label


def make_case(spec: PhantomSpec) -> MultiModalCase:
    rng = np.random.default_rng(spec.seed)
    label = make_label(spec)
    brain = sphere(spec.dims, spec.brain_center, spec.brain_radius)
    modalities = {}
    for m_idx, name in enumerate(MODALITIES):
        base = BASE_INTENSITY[name]
        mean = np.where(brain, base, 0.0)
        for code, contrast in LESION_CONTRAST.items():
            mean[label == code] = base * contrast[m_idx]
        noise = rng.normal(0.0, NOISE_FRACTION * base, size=spec.dims)
        img = np.where(brain, np.maximum(mean + noise, 1.0), 0.0)
        modalities[name] = img.astype(np.float32)
    return MultiModalCase(spec.case_id, modalities, label, spec.phase, spec.spacing)


def brain_mask(case: MultiModalCase) -> np.ndarray:
    """Voxels with signal in any modality; phantom and skull-stripped backgrounds are 0."""
    mask = np.zeros(case.shape, dtype=bool)
    for img in case.modalities.values():
        mask |= img != 0
    return mask


def make_probability(label: np.ndarray, confidence: float = 0.9, seed: int = 0) -> np.ndarray:
    """Softmax-like ``(5, ...)`` volume whose argmax is ``label`` when confidence > 0.5."""
    if not 0.0 < confidence <= 1.0:
        raise ValueError("confidence must lie in (0, 1]")
    label = np.asarray(getattr(label, "data", label))
    rng = np.random.default_rng(seed)
    n_ch = 5
    weights = rng.uniform(0.5, 1.5, size=(n_ch,) + label.shape)
    onehot = np.eye(n_ch, dtype=bool)[label.astype(np.intp)].transpose(3, 0, 1, 2)
    weights[onehot] = 0.0
    rest = weights * ((1.0 - confidence) / weights.sum(axis=0, keepdims=True))
    prob = np.where(onehot, confidence, rest)
    return prob.astype(np.float32)


def random_spec(case_id: str, seed: int, dims: Sequence[int] = (64, 64, 64),
                phase: Phase | str | None = None, max_lesions: int = 2) -> PhantomSpec:
    """A spec with 1..max_lesions non-overlapping lesions at seeded positions."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in dims)
    phase = Phase.parse(phase) if phase is not None else \
        (Phase.POST if rng.random() < 0.5 else Phase.PRE)
    brain_r = 0.45 * min(dims)
    center = np.array([(d - 1) / 2.0 for d in dims])
    lesions: list[LesionSpec] = []
    n = int(rng.integers(1, max_lesions + 1))
    for _ in range(50 * n):
        if len(lesions) == n:
            break
        r = float(rng.uniform(0.08, 0.16) * min(dims))
        r = max(r, 1.5)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        dist = rng.uniform(0, max(brain_r - r - 1.0, 0))
        c = center + direction * dist
        if any(np.linalg.norm(c - np.array(l.center)) < r + l.radius + 4 for l in lesions):
            continue
        if phase is Phase.POST and rng.random() < 0.3:
            code = RC
        else:
            code = None
        lesions.append(LesionSpec(tuple(float(v) for v in c), r, code))
    return PhantomSpec(case_id, dims, seed, phase, brain_r, lesions)
