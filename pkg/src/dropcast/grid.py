"""Periodic lat-lon raster and latitude area weights."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Equal-angle lat-lon grid; rows are latitude bands, columns wrap in longitude.

    Angles are stored in degrees. Rows are ordered south to north unless the
    caller builds a reversed grid explicitly.
    """

    n_lat: int
    n_lon: int
    lat_lower: tuple[float, ...]
    lat_upper: tuple[float, ...]
    lon_step: float

    def __post_init__(self):
        if self.n_lat < 1 or self.n_lon < 2:
            raise ValueError(f"invalid grid dimensions ({self.n_lat}, {self.n_lon})")
        if len(self.lat_lower) != self.n_lat or len(self.lat_upper) != self.n_lat:
            raise ValueError("latitude bounds must have n_lat entries")
        lo = np.asarray(self.lat_lower)
        hi = np.asarray(self.lat_upper)
        if np.any(lo >= hi):
            raise ValueError("every latitude band needs lower < upper")
        if lo.min() < -90.0 - 1e-9 or hi.max() > 90.0 + 1e-9:
            raise ValueError("latitude bounds outside [-90, 90]")
        if not np.isclose(self.n_lon * self.lon_step, 360.0, rtol=0, atol=1e-9):
            raise ValueError("n_lon * lon_step must equal 360 degrees")
        if self.n_lat > 1:
            d = np.diff((lo + hi) / 2)
            if not (np.all(d > 0) or np.all(d < 0)):
                raise ValueError("rows must be monotone in latitude")

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_lat, self.n_lon

    @property
    def lat_centers(self) -> np.ndarray:
        return (np.asarray(self.lat_lower) + np.asarray(self.lat_upper)) / 2

    @property
    def lon_centers(self) -> np.ndarray:
        return np.arange(self.n_lon) * self.lon_step

    def reversed(self) -> GridSpec:
        return GridSpec(self.n_lat, self.n_lon, self.lat_lower[::-1], self.lat_upper[::-1], self.lon_step)

    def to_dict(self) -> dict:
        return {
            "n_lat": self.n_lat,
            "n_lon": self.n_lon,
            "lat_lower": list(self.lat_lower),
            "lat_upper": list(self.lat_upper),
            "lon_step": self.lon_step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GridSpec:
        return cls(
            n_lat=int(d["n_lat"]),
            n_lon=int(d["n_lon"]),
            lat_lower=tuple(float(v) for v in d["lat_lower"]),
            lat_upper=tuple(float(v) for v in d["lat_upper"]),
            lon_step=float(d["lon_step"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> GridSpec:
        return cls.from_dict(json.loads(s))


def make_equiangular_grid(n_lat: int, n_lon: int) -> GridSpec:
    """Cell-centered grid: ``n_lat`` equal bands tiling [-90, 90], no pole row."""
    if n_lat < 1 or n_lon < 2:
        raise ValueError(f"invalid grid dimensions ({n_lat}, {n_lon})")
    edges = np.linspace(-90.0, 90.0, n_lat + 1)
    edges[0], edges[-1] = -90.0, 90.0
    return GridSpec(
        n_lat=n_lat,
        n_lon=n_lon,
        lat_lower=tuple(float(v) for v in edges[:-1]),
        lat_upper=tuple(float(v) for v in edges[1:]),
        lon_step=360.0 / n_lon,
    )


@dataclass(frozen=True)
class AreaWeights:
    raw: np.ndarray
    normalized: np.ndarray


def area_weights(grid: GridSpec) -> AreaWeights:
    """Per-row ``sin(upper) - sin(lower)``, divided by its mean over rows."""
    lo = np.deg2rad(np.asarray(grid.lat_lower, dtype=np.float64))
    hi = np.deg2rad(np.asarray(grid.lat_upper, dtype=np.float64))
    raw = np.sin(hi) - np.sin(lo)
    normalized = raw / raw.mean()
    raw.setflags(write=False)
    normalized.setflags(write=False)
    return AreaWeights(raw=raw, normalized=normalized)


def band_rows(grid: GridSpec, lat_band: tuple[float, float]) -> np.ndarray:
    """Indices of rows whose center lies inside ``lat_band`` (inclusive)."""
    lo, hi = sorted(lat_band)
    c = grid.lat_centers
    return np.nonzero((c >= lo) & (c <= hi))[0]


def central_band(grid: GridSpec, fraction: float = 0.5) -> tuple[float, float]:
    """Latitude band spanned by the central ``fraction`` of rows."""
    n = max(1, int(round(grid.n_lat * fraction)))
    start = (grid.n_lat - n) // 2
    rows = slice(start, start + n)
    lo = min(min(grid.lat_lower[rows]), min(grid.lat_upper[rows]))
    hi = max(max(grid.lat_lower[rows]), max(grid.lat_upper[rows]))
    return float(lo), float(hi)
