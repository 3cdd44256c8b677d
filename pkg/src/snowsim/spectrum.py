"""White-space spectrum model and subcarrier geometry.

A base station owns a contiguous band W (possibly with occupied TV ranges
inside it) and splits it into n overlapping orthogonal subcarriers of width
w that overlap their neighbors by a fraction alpha:

    n = floor(W / (w * alpha)) - 1
    center_i = band_start + (i + 1) * (w * alpha)

Subcarriers that intersect an occupied range, or whose half-width sticks out
of the band, are marked unusable but keep their index so the rest of the
stack can ignore their FFT bins without renumbering anything.

All frequencies are integer Hz so spacing identities are exactly assertable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import hashlib

__all__ = [
    "SpectrumError",
    "SpectrumBand",
    "SubcarrierPlan",
    "plan_subcarriers",
    "subcarrier_center",
]


class SpectrumError(ValueError):
    """Invalid band geometry or subcarrier parameters."""


@dataclass(frozen=True)
class SpectrumBand:
    """A contiguous chunk of spectrum with optional occupied sub-ranges."""

    start_hz: int
    end_hz: int
    occupied_ranges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "start_hz", int(self.start_hz))
        object.__setattr__(self, "end_hz", int(self.end_hz))
        occ = tuple((int(a), int(b)) for a, b in self.occupied_ranges)
        object.__setattr__(self, "occupied_ranges", occ)
        if self.end_hz <= self.start_hz:
            raise SpectrumError("band end must exceed band start")
        prev_end = self.start_hz
        for a, b in occ:
            if b <= a:
                raise SpectrumError(f"occupied range ({a}, {b}) is empty")
            if a < prev_end:
                raise SpectrumError("occupied ranges must be sorted and non-overlapping")
            if a < self.start_hz or b > self.end_hz:
                raise SpectrumError("occupied range outside band")
            prev_end = b

    @property
    def width_hz(self) -> int:
        return self.end_hz - self.start_hz

    def range_is_clear(self, lo: int, hi: int) -> bool:
        """True when [lo, hi] lies in the band and misses every occupied range."""
        if lo < self.start_hz or hi > self.end_hz:
            return False
        for a, b in self.occupied_ranges:
            if lo < b and hi > a:
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "start_hz": self.start_hz,
            "end_hz": self.end_hz,
            "occupied": [list(r) for r in self.occupied_ranges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpectrumBand":
        return cls(d["start_hz"], d["end_hz"],
                   tuple(tuple(r) for r in d.get("occupied", [])))


@dataclass(frozen=True)
class SubcarrierPlan:
    """Immutable subcarrier layout over a band. Shareable across threads."""

    band: SpectrumBand
    subcarrier_width_hz: int
    overlap_fraction: float
    spacing_hz: int = field(init=False)
    centers: tuple[int, ...] = field(init=False)
    usable: tuple[bool, ...] = field(init=False)

    def __post_init__(self):
        w = int(self.subcarrier_width_hz)
        alpha = float(self.overlap_fraction)
        if w <= 0:
            raise SpectrumError("subcarrier width must be positive")
        if not (0.0 < alpha <= 0.5):
            raise SpectrumError("invalid overlap")
        spacing = w * alpha
        if abs(spacing - round(spacing)) > 1e-9:
            raise SpectrumError("width * overlap must be an integer number of Hz")
        spacing = int(round(spacing))
        n = self.band.width_hz // spacing - 1
        if n < 1:
            raise SpectrumError("band too narrow")
        centers = tuple(self.band.start_hz + (i + 1) * spacing for i in range(n))
        half = w // 2
        usable = tuple(self.band.range_is_clear(c - half, c + half) for c in centers)
        object.__setattr__(self, "subcarrier_width_hz", w)
        object.__setattr__(self, "spacing_hz", spacing)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "usable", usable)

    @property
    def n(self) -> int:
        return len(self.centers)

    @property
    def usable_indices(self) -> tuple[int, ...]:
        return tuple(i for i, u in enumerate(self.usable) if u)

    def check_index(self, index: int) -> int:
        if not 0 <= index < self.n:
            raise IndexError(f"subcarrier index {index} out of range [0, {self.n})")
        return int(index)

    def center(self, index: int) -> int:
        return self.centers[self.check_index(index)]

    def plan_hash(self) -> str:
        """Stable 16-hex-digit digest of the layout (waveform dump header)."""
        key = repr((self.band.start_hz, self.band.end_hz, self.band.occupied_ranges,
                    self.subcarrier_width_hz, self.spacing_hz))
        return hashlib.md5(key.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "band": self.band.to_dict(),
            "subcarrier_width_hz": self.subcarrier_width_hz,
            "overlap": self.overlap_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubcarrierPlan":
        return plan_subcarriers(SpectrumBand.from_dict(d["band"]),
                                d["subcarrier_width_hz"], d["overlap"])


def plan_subcarriers(band: SpectrumBand, width_hz: int, overlap: float) -> SubcarrierPlan:
    """Split `band` into n = floor(W/(w*alpha)) - 1 overlapping subcarriers."""
    return SubcarrierPlan(band, width_hz, overlap)


def subcarrier_center(plan: SubcarrierPlan, index: int) -> int:
    """Center frequency in Hz: band start + (index+1) * spacing."""
    return plan.center(index)
