"""Fixed-point geographic locations and the local metric frame used by the simulator."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .codec import DecodeError, Reader, Writer

SCALE = 10**7
LOCATION_SIZE = 8
EARTH_RADIUS_M = 6_371_008.8


@dataclass(frozen=True, order=True)
class Location:
    """Latitude/longitude in units of 1e-7 degree."""

    lat_e7: int
    lon_e7: int

    def __post_init__(self):
        if abs(self.lat_e7) > 90 * SCALE or abs(self.lon_e7) > 180 * SCALE:
            raise ValueError("location out of range")

    @classmethod
    def from_degrees(cls, lat: float, lon: float) -> "Location":
        return cls(round(lat * SCALE), round(lon * SCALE))

    @property
    def lat(self) -> float:
        return self.lat_e7 / SCALE

    @property
    def lon(self) -> float:
        return self.lon_e7 / SCALE

    def to_bytes(self) -> bytes:
        return Writer().i32(self.lat_e7).i32(self.lon_e7).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Location":
        if len(data) != LOCATION_SIZE:
            raise DecodeError("location must be 8 bytes")
        r = Reader(data)
        try:
            return cls(r.i32(), r.i32())
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc


def distance_m(a: Location, b: Location) -> float:
    """Great-circle (haversine) distance in metres."""
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dp = p2 - p1
    dl = math.radians(b.lon - a.lon)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


@dataclass(frozen=True)
class LocalFrame:
    """Equirectangular map between planar metres and fixed-point locations."""

    origin_lat: float = 39.96
    origin_lon: float = 116.35

    def to_location(self, x: float, y: float) -> Location:
        lat = self.origin_lat + math.degrees(y / EARTH_RADIUS_M)
        lon = self.origin_lon + math.degrees(
            x / (EARTH_RADIUS_M * math.cos(math.radians(self.origin_lat))))
        return Location.from_degrees(lat, lon)

    @property
    def quantum_m(self) -> float:
        """Largest planar step, in metres, between adjacent fixed-point coordinates."""
        return math.radians(1e-7) * EARTH_RADIUS_M

    def to_xy(self, loc: Location) -> tuple[float, float]:
        y = math.radians(loc.lat - self.origin_lat) * EARTH_RADIUS_M
        x = math.radians(loc.lon - self.origin_lon) * EARTH_RADIUS_M * math.cos(
            math.radians(self.origin_lat))
        return x, y
