"""Raster data model: band grids, validity masks, channel schemas and stacks.

Values are held as float32 arrays. No-data pixels are remapped to 0 in input
channels and tracked by a boolean validity mask; prescription maps keep the
sentinel in place so labels are never silently turned into real rates.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

NODATA = -9999.0
SPECTRAL_BANDS = ("nir", "red", "green", "blue")
WEATHER_VARIABLES = ("temperature", "precipitation", "humidity", "wind_speed")
WEATHER_INTERVALS = ("00h", "08h", "16h")
KINDS = ("spectral", "index", "weather")


class RasterError(ValueError):
    """Raised for malformed rasters, schemas or raster files."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BandGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.size == 0:
            raise RasterError(f"band grid must be a non-empty 2-D array, got shape {v.shape}")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class ValidityMask:
    valid: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.valid, dtype=bool)
        if v.ndim != 2:
            raise RasterError(f"mask must be 2-D, got shape {v.shape}")
        object.__setattr__(self, "valid", _frozen(v))

    @classmethod
    def all_valid(cls, height: int, width: int) -> "ValidityMask":
        return cls(np.ones((height, width), dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def __and__(self, other: "ValidityMask") -> "ValidityMask":
        if self.shape != other.shape:
            raise RasterError(f"mask shape mismatch {self.shape} vs {other.shape}")
        return ValidityMask(self.valid & other.valid)


@dataclass(frozen=True)
class ChannelSchema:
    entries: tuple[tuple[str, str], ...]

    def __post_init__(self):
        entries = tuple((str(n), str(k)) for n, k in self.entries)
        if not entries:
            raise RasterError("schema must have at least one channel")
        names = [n for n, _ in entries]
        if len(set(names)) != len(names):
            raise RasterError(f"duplicate channel names in schema: {names}")
        for name, kind in entries:
            if kind not in KINDS:
                raise RasterError(f"channel {name!r} has unknown kind {kind!r}")
        object.__setattr__(self, "entries", entries)

    @property
    def count(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def names_of(self, kind: str) -> list[str]:
        return [n for n, k in self.entries if k == kind]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise RasterError(f"channel {name!r} not in schema") from None

    def to_json(self) -> list[dict]:
        return [{"name": n, "kind": k} for n, k in self.entries]

    @classmethod
    def from_json(cls, entries: Iterable[dict]) -> "ChannelSchema":
        return cls(tuple((e["name"], e["kind"]) for e in entries))

    def checksum(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def weather_channel(variable: str, interval: str) -> str:
    return f"{variable}_{interval}"


def default_schema() -> ChannelSchema:
    """4 spectral bands + BNDVI/NDVI + 4 weather variables at 3 intervals = 18."""
    entries = [(b, "spectral") for b in SPECTRAL_BANDS]
    entries += [("bndvi", "index"), ("ndvi", "index")]
    entries += [
        (weather_channel(v, t), "weather") for v in WEATHER_VARIABLES for t in WEATHER_INTERVALS
    ]
    return ChannelSchema(tuple(entries))


@dataclass(frozen=True)
class RasterStack:
    schema: ChannelSchema
    data: np.ndarray  # (C, H, W) float32
    mask: ValidityMask
    parcel_id: str
    phase: int = 2

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3:
            raise RasterError(f"stack data must be (C, H, W), got {d.shape}")
        if d.shape[0] != self.schema.count:
            raise RasterError(
                f"schema has {self.schema.count} channels but stack has {d.shape[0]}"
            )
        if d.shape[1:] != self.mask.shape:
            raise RasterError(f"mask {self.mask.shape} does not match channels {d.shape[1:]}")
        if self.phase not in (1, 2, 3):
            raise RasterError(f"phase must be 1, 2 or 3, got {self.phase}")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> list[BandGrid]:
        return [BandGrid(c) for c in self.data]

    def channel(self, name: str) -> BandGrid:
        return BandGrid(self.data[self.schema.index(name)])


@dataclass(frozen=True)
class PrescriptionMap:
    """Nitrogen rates in kg N/ha; invalid pixels keep the sentinel value."""

    grid: BandGrid
    mask: ValidityMask
    parcel_id: str
    phase: int = 2
    sentinel: float = NODATA

    def __post_init__(self):
        if self.grid.shape != self.mask.shape:
            raise RasterError(f"mask {self.mask.shape} does not match grid {self.grid.shape}")
        vals = self.grid.values[self.mask.valid]
        if vals.size and vals.min() < 0:
            raise RasterError("prescription map has negative valid rates")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


@dataclass(frozen=True)
class WeatherSeries:
    """Per-variable forecasts at the three eight-hour intervals of the fertilization day."""

    values: dict[str, tuple[float, ...]] = field(default_factory=dict)

    def value(self, variable: str, interval: str) -> float:
        if variable not in self.values:
            raise RasterError(f"weather series has no variable {variable!r}")
        series = self.values[variable]
        if len(series) != len(WEATHER_INTERVALS):
            raise RasterError(
                f"weather variable {variable!r} has {len(series)} intervals, "
                f"expected {len(WEATHER_INTERVALS)}"
            )
        return float(series[WEATHER_INTERVALS.index(interval)])


def _check_no_nan(values: np.ndarray, what: str = "grid"):
    bad = np.argwhere(np.isnan(values))
    if bad.size:
        coords = ", ".join(f"({r}, {c})" for r, c in bad[:5])
        more = f" and {len(bad) - 5} more" if len(bad) > 5 else ""
        raise RasterError(f"NaN in {what} at pixel(s) {coords}{more}")


def remap_nodata(grid: BandGrid, sentinel: float = NODATA) -> tuple[BandGrid, ValidityMask]:
    if not np.isfinite(sentinel):
        raise RasterError(f"sentinel must be finite, got {sentinel}")
    _check_no_nan(grid.values)
    invalid = grid.values == np.float32(sentinel)
    out = np.where(invalid, np.float32(0), grid.values)
    return BandGrid(out), ValidityMask(~invalid)


def _normalized_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    den = a + b
    out = np.zeros_like(den)
    np.divide(a - b, den, out=out, where=den != 0)
    return out.astype(np.float32)


VEGETATION_INDICES: dict[str, tuple[tuple[str, str], Callable]] = {
    "bndvi": (("nir", "blue"), _normalized_difference),
    "ndvi": (("nir", "red"), _normalized_difference),
}


def _index_from_bands(bands: dict[str, np.ndarray], mask: np.ndarray, index_name: str) -> np.ndarray:
    key = index_name.lower()
    if key not in VEGETATION_INDICES:
        raise RasterError(f"unknown vegetation index {index_name!r}")
    (a, b), fn = VEGETATION_INDICES[key]
    for src in (a, b):
        if src not in bands:
            raise RasterError(f"index {index_name!r} needs channel {src!r}")
    out = fn(bands[a], bands[b])
    out[~mask] = 0
    return out


def compute_vegetation_index(stack: RasterStack, index_name: str) -> BandGrid:
    bands = {}
    for name in stack.schema.names_of("spectral"):
        bands[name] = stack.data[stack.schema.index(name)]
    return BandGrid(_index_from_bands(bands, stack.mask.valid, index_name))


def assemble_input_stack(
    spectral: Sequence[BandGrid],
    indices: Sequence[str],
    weather: WeatherSeries,
    schema: ChannelSchema | None = None,
    masks: Sequence[ValidityMask] | None = None,
    parcel_id: str = "parcel",
    phase: int = 2,
) -> RasterStack:
    """Stack spectral bands, derived indices and broadcast weather planes in schema order.

    ``spectral`` follows the schema's spectral channel order. Band values are
    copied untouched at valid pixels; ``masks`` (one per band, default all
    valid) are AND-ed and every channel is 0 where the result is invalid, so a
    stack survives a save/load through the sentinel encoding unchanged.
    """
    schema = schema or default_schema()
    spectral_names = schema.names_of("spectral")
    if len(spectral) != len(spectral_names):
        raise RasterError(
            f"schema expects {len(spectral_names)} spectral bands, got {len(spectral)}"
        )
    if [i.lower() for i in indices] != schema.names_of("index"):
        raise RasterError(
            f"indices {list(indices)} do not match schema {schema.names_of('index')}"
        )
    shape = spectral[0].shape
    for g in spectral:
        if g.shape != shape:
            raise RasterError(f"spectral bands differ in size: {shape} vs {g.shape}")
    mask = ValidityMask.all_valid(*shape)
    for m in masks or ():
        mask = mask & m

    bands = dict(zip(spectral_names, (g.values for g in spectral)))
    planes = {}
    planes.update(bands)
    for name in schema.names_of("index"):
        planes[name] = _index_from_bands(bands, mask.valid, name)
    for var in WEATHER_VARIABLES:
        for t in WEATHER_INTERVALS:
            name = weather_channel(var, t)
            if name in schema.names:
                planes[name] = np.full(shape, weather.value(var, t), dtype=np.float32)
    missing = [n for n in schema.names if n not in planes]
    if missing:
        raise RasterError(f"cannot build schema channels {missing}")
    data = np.stack([planes[n] for n in schema.names]).astype(np.float32, copy=False)
    data[:, ~mask.valid] = 0.0
    return RasterStack(schema, data, mask, parcel_id, phase)


# --- .band / .json file format ------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_band_file(path: Path, data: np.ndarray, header: dict) -> dict:
    """Write ``data`` (C, H, W) as little-endian float32 plus a JSON sidecar.

    Returns a ``{filename: sha256}`` dict for both files.
    """
    path = Path(path)
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        data = data[None]
    path.write_bytes(data.tobytes(order="C"))
    header = dict(header, channels=header.get("channels"), height=data.shape[1],
                  width=data.shape[2], count=data.shape[0], dtype="float32le")
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(header, indent=2, sort_keys=True))
    return {path.name: _sha256(path), sidecar.name: _sha256(sidecar)}


def read_band_file(path: Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not path.exists() or not sidecar.exists():
        raise RasterError(f"missing raster file or header for {path}")
    header = json.loads(sidecar.read_text())
    shape = (header["count"], header["height"], header["width"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != np.prod(shape):
        raise RasterError(f"{path.name}: expected {np.prod(shape)} values, found {raw.size}")
    return raw.reshape(shape).astype(np.float32), header


def save_stack(stack: RasterStack, path: Path) -> dict:
    sentinel = NODATA
    data = np.where(stack.mask.valid[None], stack.data, np.float32(sentinel))
    header = {
        "kind": "stack",
        "channels": stack.schema.to_json(),
        "nodata": sentinel,
        "parcel_id": stack.parcel_id,
        "phase": stack.phase,
    }
    return write_band_file(path, data, header)


def load_stack(path: Path) -> RasterStack:
    data, header = read_band_file(path)
    schema = ChannelSchema.from_json(header["channels"])
    sentinel = header.get("nodata", NODATA)
    planes, mask = [], None
    for i, plane in enumerate(data):
        _check_no_nan(plane, f"{Path(path).name} channel {i}")
        grid, m = remap_nodata(BandGrid(plane), sentinel)
        planes.append(grid.values)
        mask = m if mask is None else mask & m
    return RasterStack(schema, np.stack(planes), mask, header["parcel_id"], header["phase"])


def save_prescription(pmap: PrescriptionMap, path: Path) -> dict:
    data = np.where(pmap.mask.valid, pmap.grid.values, np.float32(pmap.sentinel))
    header = {
        "kind": "prescription",
        "channels": [{"name": "nitrogen_kg_ha", "kind": "label"}],
        "nodata": pmap.sentinel,
        "parcel_id": pmap.parcel_id,
        "phase": pmap.phase,
    }
    return write_band_file(path, data, header)


def load_prescription(path: Path) -> PrescriptionMap:
    data, header = read_band_file(path)
    sentinel = header.get("nodata", NODATA)
    values = data[0]
    _check_no_nan(values, Path(path).name)
    mask = ValidityMask(values != np.float32(sentinel))
    return PrescriptionMap(BandGrid(values), mask, header["parcel_id"], header["phase"], sentinel)
