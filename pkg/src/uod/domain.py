"""Domain registry and the small vocabulary types shared by every stage.

Coordinates are ``(row, col)``, zero-indexed and real-valued. Pixel
intensities are normalized to ``[0, 1]`` at ingestion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

CALIBRATED = "calibrated"
PIXEL_ONLY = "px"  # no physical spacing; metrics stay in pixels


class DomainError(ValueError):
    """Raised for invalid domain specs and registry misuse."""


@dataclass(frozen=True)
class DomainSpec:
    """Identity and geometry of one anatomical domain.

    ``pixel_spacing`` is mm per pixel, ``"px"`` for pixel-only data, or
    ``"calibrated"`` when the spacing is derived per image. In that case ``calibration`` names the two
    landmark indices whose physical distance is known (the wrist rule).
    """

    name: str
    num_landmarks: int
    native_size: tuple[int, int]
    channels: int = 1
    pixel_spacing: Union[float, str] = 1.0
    calibration: Optional[tuple[int, int]] = None
    domain_id: int = -1

    def validate(self) -> None:
        if not self.name:
            raise DomainError("domain name must be non-empty")
        if int(self.num_landmarks) < 1:
            raise DomainError(f"{self.name}: num_landmarks must be >= 1")
        if len(self.native_size) != 2 or min(self.native_size) <= 0:
            raise DomainError(f"{self.name}: native_size must be two positive ints")
        if int(self.channels) < 1:
            raise DomainError(f"{self.name}: channels must be >= 1")
        if isinstance(self.pixel_spacing, str):
            if self.pixel_spacing not in (CALIBRATED, PIXEL_ONLY):
                raise DomainError(f"{self.name}: unknown spacing marker {self.pixel_spacing!r}")
            if self.pixel_spacing == CALIBRATED and self.calibration is None:
                raise DomainError(f"{self.name}: calibrated spacing needs a calibration rule")
        elif not float(self.pixel_spacing) > 0:
            raise DomainError(f"{self.name}: pixel_spacing must be positive")
        if self.calibration is not None:
            p, q = self.calibration
            if p == q or not (0 <= p < self.num_landmarks and 0 <= q < self.num_landmarks):
                raise DomainError(f"{self.name}: calibration indices {self.calibration} invalid")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_landmarks": int(self.num_landmarks),
            "native_size": [int(s) for s in self.native_size],
            "channels": int(self.channels),
            "pixel_spacing": self.pixel_spacing,
            "calibration": list(self.calibration) if self.calibration is not None else None,
            "domain_id": int(self.domain_id),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        cal = d.get("calibration")
        return cls(
            name=d["name"],
            num_landmarks=int(d["num_landmarks"]),
            native_size=tuple(int(s) for s in d["native_size"]),
            channels=int(d.get("channels", 1)),
            pixel_spacing=d.get("pixel_spacing", 1.0),
            calibration=tuple(cal) if cal is not None else None,
            domain_id=int(d.get("domain_id", -1)),
        )


@dataclass
class LandmarkSet:
    coords: np.ndarray
    domain_id: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.coords)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.coords)))


@dataclass
class ImageRecord:
    image_id: str
    pixels: np.ndarray  # H x W x C, float in [0, 1]
    domain_id: int
    landmarks: Optional[LandmarkSet] = None

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.pixels.shape[0]), int(self.pixels.shape[1])


@dataclass
class DomainRegistry:
    """Dense, ordered collection of domains. Sealed registries are read-only."""

    _specs: list[DomainSpec] = field(default_factory=list)
    _sealed: bool = False

    def register(self, spec: DomainSpec) -> int:
        if self._sealed:
            raise DomainError("registry is sealed")
        spec.validate()
        if any(s.name == spec.name for s in self._specs):
            raise DomainError(f"domain {spec.name!r} already registered")
        d = len(self._specs)
        self._specs.append(DomainSpec(**{**spec.__dict__, "domain_id": d}))
        return d

    def seal(self) -> "DomainRegistry":
        self._sealed = True
        return self

    @property
    def sealed(self) -> bool:
        return self._sealed

    def __len__(self) -> int:
        return len(self._specs)

    def __iter__(self) -> Iterator[DomainSpec]:
        return iter(list(self._specs))

    def __getitem__(self, domain_id: int) -> DomainSpec:
        if not 0 <= int(domain_id) < len(self._specs):
            raise DomainError(f"unknown domain_id {domain_id}")
        return self._specs[int(domain_id)]

    def by_name(self, name: str) -> DomainSpec:
        for s in self._specs:
            if s.name == name:
                return s
        raise DomainError(f"unknown domain {name!r}")

    @property
    def landmark_counts(self) -> list[int]:
        return [s.num_landmarks for s in self._specs]

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self._specs]

    @classmethod
    def from_list(cls, items: Sequence[dict]) -> "DomainRegistry":
        reg = cls()
        for item in sorted(items, key=lambda x: x.get("domain_id", 0)):
            reg.register(DomainSpec.from_dict(item))
        return reg.seal()


def register_domain(registry: DomainRegistry, spec: DomainSpec) -> int:
    return registry.register(spec)


def validate_record(rec: ImageRecord, registry: DomainRegistry) -> list[str]:
    """Return every invariant violation of ``rec``; an empty list means ok."""
    if len(registry) == 0:
        raise DomainError("registry is empty")
    return record_violations(rec, registry[rec.domain_id])


def record_violations(rec: ImageRecord, spec: DomainSpec) -> list[str]:
    violations = []
    px = np.asarray(rec.pixels)
    if px.ndim != 3:
        violations.append(f"shape: expected H x W x C array, got ndim={px.ndim}")
    elif px.shape[2] != spec.channels:
        violations.append(f"shape: expected {spec.channels} channels, got {px.shape[2]}")
    if px.size and (not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0):
        violations.append("pixel range: values outside [0, 1]")
    if rec.landmarks is not None:
        lm = rec.landmarks
        if lm.domain_id != rec.domain_id:
            violations.append("landmark domain: landmark set belongs to another domain")
        if len(lm) != spec.num_landmarks:
            violations.append(
                f"landmark count: expected {spec.num_landmarks}, got {len(lm)}"
            )
        if not lm.is_finite():
            violations.append("landmark finite: non-finite coordinate")
        elif px.ndim >= 2 and len(lm):
            h, w = px.shape[:2]
            c = lm.coords
            if c[:, 0].min() < 0 or c[:, 1].min() < 0 or c[:, 0].max() > h - 1 or c[:, 1].max() > w - 1:
                violations.append("landmark bounds: coordinate outside image")
    return violations
