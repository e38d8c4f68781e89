"""Seedable synthetic parcels: smooth multispectral fields plus nitrogen truth.

The ground-truth rate decreases with vegetation vigour:

    N = N_MAX * (1 - sigmoid(SLOPE * NDVI + OFFSET)) + noise,  clipped at 0

with NDVI computed from the emitted (float32) NIR and red bands.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import raster
from .raster import (
    NODATA,
    BandGrid,
    PrescriptionMap,
    RasterStack,
    ValidityMask,
    WeatherSeries,
)

N_MAX = 160.0
SLOPE = 6.0
OFFSET = -1.5
MANIFEST_VERSION = 1

# NIR/red spans keep NDVI roughly in [-0.03, 0.58], i.e. rates of ~20-140 kg N/ha
DEFAULT_BAND_RANGES = {
    "nir": (1400.0, 2600.0),
    "red": (700.0, 1500.0),
    "green": (300.0, 1500.0),
    "blue": (100.0, 1100.0),
}

# (low, high) of each weather variable's daily base value
WEATHER_RANGES = {
    "temperature": (4.0, 22.0),
    "precipitation": (0.0, 6.0),
    "humidity": (45.0, 95.0),
    "wind_speed": (0.5, 9.0),
}


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    height: int = 48
    width: int = 48
    correlation_length: float = 6.0
    band_ranges: dict = field(default_factory=lambda: dict(DEFAULT_BAND_RANGES))
    label_noise_sd: float = 4.0
    boundary_irregularity: float = 0.4
    seed: int = 0
    parcel_id: str = "parcel_000"
    phase: int = 2

    def validate(self):
        if self.height <= 0 or self.width <= 0:
            raise SynthError(f"scene size must be positive, got {self.height}x{self.width}")
        if not 0 < self.correlation_length <= min(self.height, self.width):
            raise SynthError(
                f"correlation_length {self.correlation_length} must be in (0, min(H, W)]"
            )
        for name in raster.SPECTRAL_BANDS:
            if name not in self.band_ranges:
                raise SynthError(f"band_ranges missing {name!r}")
            lo, hi = self.band_ranges[name]
            if not lo < hi:
                raise SynthError(f"band {name!r}: min {lo} must be < max {hi}")
        if self.label_noise_sd < 0:
            raise SynthError("label_noise_sd must be nonnegative")
        if not 0 <= self.boundary_irregularity <= 1:
            raise SynthError("boundary_irregularity must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise SynthError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class SyntheticScene:
    stack: RasterStack
    truth: PrescriptionMap
    weather: WeatherSeries | None = None

    @property
    def scene_id(self) -> str:
        return f"{self.stack.parcel_id}_p{self.stack.phase}"


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    z = gaussian_filter1d(z, sigma, axis=0, mode="reflect")
    return gaussian_filter1d(z, sigma, axis=1, mode="reflect")


def _unit_range(z: np.ndarray) -> np.ndarray:
    lo, hi = z.min(), z.max()
    if hi - lo <= 0:
        return np.full_like(z, 0.5)
    return (z - lo) / (hi - lo)


def nitrogen_from_ndvi(ndvi: np.ndarray) -> np.ndarray:
    ndvi = np.asarray(ndvi, dtype=np.float64)
    return N_MAX * (1.0 - 1.0 / (1.0 + np.exp(-(SLOPE * ndvi + OFFSET))))


def _boundary_mask(rng, spec: FieldSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    edge = np.minimum(np.minimum(rows, h - 1 - rows), np.minimum(cols, w - 1 - cols))
    depth = edge / (min(h, w) / 2.0)
    wobble = _unit_range(_smooth_field(rng, (h, w), spec.correlation_length))
    threshold = spec.boundary_irregularity * (0.25 + 0.5 * wobble)
    return depth >= threshold


def _weather(rng) -> WeatherSeries:
    values = {}
    for var, (lo, hi) in WEATHER_RANGES.items():
        base = rng.uniform(lo, hi)
        drift = rng.normal(0.0, 0.05 * (hi - lo), size=len(raster.WEATHER_INTERVALS))
        values[var] = tuple(float(np.clip(base + d, lo, hi)) for d in drift)
    return WeatherSeries(values)


def generate_scene(spec: FieldSpec, schema: raster.ChannelSchema | None = None) -> SyntheticScene:
    spec.validate()
    schema = schema or raster.default_schema()
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width)

    bands = []
    for name in raster.SPECTRAL_BANDS:
        lo, hi = spec.band_ranges[name]
        t = _unit_range(_smooth_field(rng, shape, spec.correlation_length))
        vals = np.clip(lo + t * (hi - lo), lo, hi).astype(np.float32)
        # float32 rounding must not leave the declared range
        vals = np.clip(vals, np.float32(lo), np.float32(hi))
        bands.append(vals)
    valid = _boundary_mask(rng, spec)
    noise = _smooth_field(rng, shape, spec.correlation_length)
    sd = noise.std()
    noise = noise / sd if sd > 0 else np.zeros(shape)
    weather = _weather(rng)

    nir, red = bands[0], bands[1]
    ndvi = raster._normalized_difference(nir, red)
    n = nitrogen_from_ndvi(ndvi) + spec.label_noise_sd * noise
    n = np.clip(n, 0.0, None).astype(np.float32)

    mask = ValidityMask(valid)
    spectral = [BandGrid(np.where(valid, b, np.float32(0))) for b in bands]
    stack = raster.assemble_input_stack(
        spectral,
        schema.names_of("index"),
        weather,
        schema,
        masks=[mask],
        parcel_id=spec.parcel_id,
        phase=spec.phase,
    )
    truth = PrescriptionMap(
        BandGrid(np.where(valid, n, np.float32(NODATA))), mask, spec.parcel_id, spec.phase
    )
    return SyntheticScene(stack, truth, weather)


def default_specs(n: int = 35, seed: int = 0, size: int = 48) -> list[FieldSpec]:
    """``n`` varied desk-scale parcels derived from one seed."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        specs.append(
            FieldSpec(
                height=size,
                width=size,
                correlation_length=float(rng.uniform(3.0, 8.0)),
                label_noise_sd=float(rng.uniform(2.0, 6.0)),
                boundary_irregularity=float(rng.uniform(0.1, 0.6)),
                seed=int(rng.integers(0, 2**63)),
                parcel_id=f"parcel_{i:03d}",
            )
        )
    return specs


@dataclass
class DatasetManifest:
    scenes: list[dict] = field(default_factory=list)
    schema: list[dict] = field(default_factory=lambda: raster.default_schema().to_json())
    schema_version: int = MANIFEST_VERSION

    def to_json(self) -> dict:
        return {"schema_version": self.schema_version, "schema": self.schema, "scenes": self.scenes}

    def save(self, path: Path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        return cls(scenes=d["scenes"], schema=d["schema"], schema_version=d["schema_version"])


def _spec_json(spec: FieldSpec) -> dict:
    d = asdict(spec)
    d["band_ranges"] = {k: list(v) for k, v in spec.band_ranges.items()}
    return d


def generate_dataset(specs: list[FieldSpec], out_dir: Path, schema=None) -> DatasetManifest:
    schema = schema or raster.default_schema()
    ids = [s.parcel_id for s in specs]
    dupes = sorted({p for p in ids if ids.count(p) > 1})
    if dupes:
        raise SynthError(f"duplicate parcel_id(s): {dupes}")
    manifest = DatasetManifest(schema=schema.to_json())
    if not specs:
        return manifest
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for spec in specs:
        scene = generate_scene(spec, schema)
        sid = scene.scene_id
        files = raster.save_stack(scene.stack, out_dir / f"{sid}.stack.band")
        files.update(raster.save_prescription(scene.truth, out_dir / f"{sid}.truth.band"))
        manifest.scenes.append(
            {
                "scene_id": sid,
                "parcel_id": spec.parcel_id,
                "phase": spec.phase,
                "seed": spec.seed,
                "spec": _spec_json(spec),
                "stack": f"{sid}.stack.band",
                "truth": f"{sid}.truth.band",
                "checksums": files,
            }
        )
    manifest.save(out_dir / "manifest.json")
    return manifest


def load_dataset(out_dir: Path, verify: bool = True) -> list[SyntheticScene]:
    out_dir = Path(out_dir)
    manifest = DatasetManifest.load(out_dir / "manifest.json")
    scenes = []
    for entry in manifest.scenes:
        if verify:
            for name, digest in entry["checksums"].items():
                if raster._sha256(out_dir / name) != digest:
                    raise SynthError(f"checksum mismatch for {name}")
        stack = raster.load_stack(out_dir / entry["stack"])
        truth = raster.load_prescription(out_dir / entry["truth"])
        scenes.append(SyntheticScene(stack, truth))
    return scenes
