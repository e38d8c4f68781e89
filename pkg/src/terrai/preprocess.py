"""Scene-to-patch preparation: outlier filtering, 8x8 windows, split, z-scores, flips."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .synth import SyntheticScene

PATCH = 8
IQR_K = 1.5
SCALE_EPS = 1e-8


class PreprocessError(ValueError):
    pass


Origin = tuple  # (parcel_id, phase, row, col)


@dataclass(frozen=True)
class LabeledPatch:
    input: np.ndarray  # (C, 8, 8)
    label: np.ndarray  # (8, 8), sentinel at invalid pixels
    label_mask: np.ndarray  # (8, 8) bool
    origin: Origin
    input_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.input.shape[1:] != (PATCH, PATCH) or self.label.shape != (PATCH, PATCH):
            raise PreprocessError(f"patch must be 8x8, got {self.input.shape} / {self.label.shape}")
        if self.input_mask is None:
            object.__setattr__(self, "input_mask", self.label_mask)


# -- outlier filtering ---------------------------------------------------------


def scene_mean_rate(scene: SyntheticScene) -> float:
    vals = scene.truth.grid.values[scene.truth.mask.valid]
    return float(vals.mean()) if vals.size else float("nan")


def iqr_fences(values: Sequence[float], k: float = IQR_K) -> tuple[float, float]:
    q1, q3 = np.quantile(np.asarray(values, dtype=np.float64), [0.25, 0.75])
    iqr = q3 - q1
    return q1 - k * iqr, q3 + k * iqr


def iqr_filter(scenes: Sequence, key: Callable = scene_mean_rate, k: float = IQR_K):
    """Split ``scenes`` into (kept, dropped) by Tukey fences on ``key(scene)``.

    The interval is closed, so a value sitting exactly on a fence is kept.
    """
    if len(scenes) < 4:
        raise PreprocessError(f"IQR filtering needs at least 4 scenes, got {len(scenes)}")
    stats = np.array([key(s) for s in scenes], dtype=np.float64)
    lo, hi = iqr_fences(stats, k)
    keep = (stats >= lo) & (stats <= hi)
    kept = [s for s, ok in zip(scenes, keep) if ok]
    dropped = [s for s, ok in zip(scenes, keep) if not ok]
    if not kept:
        raise PreprocessError("IQR filter dropped every scene")
    return kept, dropped


# -- patch extraction ----------------------------------------------------------


@dataclass
class PatchSet:
    """Struct-of-arrays view over many patches."""

    inputs: np.ndarray  # (N, C, 8, 8) float32
    labels: np.ndarray  # (N, 8, 8) float32
    label_masks: np.ndarray  # (N, 8, 8) bool
    input_masks: np.ndarray  # (N, 8, 8) bool
    origins: list = field(default_factory=list)

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, idx) -> "PatchSet":
        if isinstance(idx, slice):
            idx = range(len(self))[idx]
        idx = np.asarray(idx, dtype=np.int64)
        return PatchSet(
            self.inputs[idx], self.labels[idx], self.label_masks[idx], self.input_masks[idx],
            [self.origins[i] for i in idx],
        )

    def patch(self, i: int) -> LabeledPatch:
        return LabeledPatch(self.inputs[i], self.labels[i], self.label_masks[i], self.origins[i],
                            self.input_masks[i])

    @property
    def parcel_ids(self) -> list[str]:
        return [o[0] for o in self.origins]

    @classmethod
    def from_patches(cls, patches: Sequence[LabeledPatch], channels: int | None = None) -> "PatchSet":
        if not patches:
            c = channels or 0
            return cls(np.zeros((0, c, PATCH, PATCH), np.float32), np.zeros((0, PATCH, PATCH), np.float32),
                       np.zeros((0, PATCH, PATCH), bool), np.zeros((0, PATCH, PATCH), bool), [])
        return cls(
            np.stack([p.input for p in patches]).astype(np.float32),
            np.stack([p.label for p in patches]).astype(np.float32),
            np.stack([p.label_mask for p in patches]),
            np.stack([p.input_mask for p in patches]),
            [tuple(p.origin) for p in patches],
        )

    @classmethod
    def concat(cls, sets: Sequence["PatchSet"]) -> "PatchSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.from_patches([])
        return cls(
            np.concatenate([s.inputs for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.label_masks for s in sets]),
            np.concatenate([s.input_masks for s in sets]),
            [o for s in sets for o in s.origins],
        )

    def save(self, path: Path):
        origins = np.array(
            [(str(p), int(k), int(r), int(c)) for p, k, r, c in self.origins],
            dtype=[("parcel_id", "U64"), ("phase", "i4"), ("row", "i4"), ("col", "i4")],
        )
        with open(path, "wb") as fh:
            np.savez(fh, inputs=self.inputs, labels=self.labels, label_masks=self.label_masks,
                     input_masks=self.input_masks, origins=origins)

    @classmethod
    def load(cls, path: Path) -> "PatchSet":
        with np.load(path) as z:
            origins = [(str(o["parcel_id"]), int(o["phase"]), int(o["row"]), int(o["col"]))
                       for o in z["origins"]]
            return cls(z["inputs"], z["labels"], z["label_masks"], z["input_masks"], origins)


def extract_patch_set(scene: SyntheticScene, size: int = PATCH) -> PatchSet:
    stack, truth = scene.stack, scene.truth
    h, w = stack.height, stack.width
    if h < size or w < size:
        raise PreprocessError(f"scene {h}x{w} is smaller than the {size}x{size} patch")
    lab_mask = sliding_window_view(truth.mask.valid, (size, size))  # (h-7, w-7, 8, 8)
    keep = lab_mask.reshape(lab_mask.shape[0], lab_mask.shape[1], -1).any(axis=-1)
    rows, cols = np.nonzero(keep)  # row-major
    x = sliding_window_view(stack.data, (size, size), axis=(1, 2))  # (C, h-7, w-7, 8, 8)
    y = sliding_window_view(truth.grid.values, (size, size))
    im = sliding_window_view(stack.mask.valid, (size, size))
    pid, phase = stack.parcel_id, stack.phase
    return PatchSet(
        np.ascontiguousarray(x[:, rows, cols].transpose(1, 0, 2, 3)),
        np.ascontiguousarray(y[rows, cols]),
        np.ascontiguousarray(lab_mask[rows, cols]),
        np.ascontiguousarray(im[rows, cols]),
        [(pid, phase, int(r), int(c)) for r, c in zip(rows, cols)],
    )


def extract_patches(scene: SyntheticScene) -> list[LabeledPatch]:
    """All stride-1 8x8 windows in row-major origin order, minus all-invalid label windows."""
    ps = extract_patch_set(scene)
    return [ps.patch(i) for i in range(len(ps))]


# -- split ---------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list[int]
    validation: list[int]
    test: list[int]
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    bin_edges: list[float] = field(default_factory=list)
    test_parcels: list[str] = field(default_factory=list)

    def to_json(self, origins: Sequence[Origin]) -> dict:
        def listing(idx):
            return [list(origins[i]) for i in idx]

        return {
            "ratios": list(self.ratios),
            "seed": self.seed,
            "bin_edges": self.bin_edges,
            "test_parcels": self.test_parcels,
            "train": listing(self.train),
            "validation": listing(self.validation),
            "test": listing(self.test),
        }


def patch_mean_label(labels: np.ndarray, masks: np.ndarray) -> np.ndarray:
    n = masks.reshape(len(masks), -1).sum(axis=1)
    s = np.where(masks, labels.astype(np.float64), 0.0).reshape(len(masks), -1).sum(axis=1)
    return s / np.maximum(n, 1)


def stratified_split(patches: PatchSet, ratios=(0.6, 0.2, 0.2), seed: int = 0, bins: int = 10) -> DatasetSplit:
    """Parcel-isolated test pool, then quantile-stratified train/validation.

    Whole parcels (in seeded random order) go to test until they cover at least
    the test ratio of all patches. The remainder is binned by mean valid label
    and each bin is split train:validation in proportion ``ratios[0]:ratios[1]``.
    """
    r_train, r_val, r_test = ratios
    if abs(r_train + r_val + r_test - 1.0) > 1e-9 or min(ratios) < 0:
        raise PreprocessError(f"ratios must be nonnegative and sum to 1, got {ratios}")
    if bins < 1:
        raise PreprocessError("bins must be positive")
    rng = np.random.default_rng(seed)
    pids = np.array(patches.parcel_ids)
    parcels = sorted(set(pids.tolist()))
    if len(parcels) < 2:
        raise PreprocessError(f"need at least 2 parcels to isolate a test set, got {len(parcels)}")
    order = [parcels[i] for i in rng.permutation(len(parcels))]
    counts = {p: int(np.sum(pids == p)) for p in parcels}
    total = len(patches)
    test_parcels, covered = [], 0
    for p in order:
        if covered >= r_test * total and test_parcels:
            break
        test_parcels.append(p)
        covered += counts[p]
    if len(test_parcels) == len(parcels):
        raise PreprocessError("too few parcels: the test pool absorbed every parcel")

    in_test = np.isin(pids, test_parcels)
    test = np.nonzero(in_test)[0].tolist()
    rest = np.nonzero(~in_test)[0]
    stat = patch_mean_label(patches.labels[rest], patches.label_masks[rest])
    edges = np.quantile(stat, np.linspace(0.0, 1.0, bins + 1))
    bin_id = np.searchsorted(edges[1:-1], stat, side="right")
    frac = r_train / (r_train + r_val)
    train, val = [], []
    for b in range(bins):
        members = rest[bin_id == b]
        if not members.size:
            continue
        members = members[rng.permutation(members.size)]
        n_train = int(round(frac * members.size))
        train.extend(members[:n_train].tolist())
        val.extend(members[n_train:].tolist())
    return DatasetSplit(sorted(train), sorted(val), test, tuple(ratios), seed,
                        [float(e) for e in edges], sorted(test_parcels))


def cap_per_parcel(indices: Sequence[int], patches: PatchSet, max_per_parcel: int | None, seed: int) -> list[int]:
    """Seeded subsample keeping at most ``max_per_parcel`` patches from each parcel."""
    if max_per_parcel is None:
        return list(indices)
    rng = np.random.default_rng(seed)
    by_parcel: dict[str, list[int]] = {}
    for i in indices:
        by_parcel.setdefault(patches.origins[i][0], []).append(i)
    out = []
    for p in sorted(by_parcel):
        idx = np.array(by_parcel[p])
        if idx.size > max_per_parcel:
            idx = np.sort(rng.choice(idx, size=max_per_parcel, replace=False))
        out.extend(idx.tolist())
    return sorted(out)


# -- standardization -----------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    label_mean: float
    label_scale: float
    mode: str = "stddev"
    fitted_on: str = "train"

    def apply_arrays(self, inputs, labels, label_masks, input_masks):
        x = (inputs.astype(np.float64) - self.mean[:, None, None]) / self.scale[:, None, None]
        x = np.where(input_masks[:, None], x, inputs).astype(np.float32)
        y = np.where(label_masks, (labels.astype(np.float64) - self.label_mean) / self.label_scale, labels)
        return x, y.astype(np.float32)

    def apply(self, patches: PatchSet) -> PatchSet:
        x, y = self.apply_arrays(patches.inputs, patches.labels, patches.label_masks, patches.input_masks)
        return PatchSet(x, y, patches.label_masks, patches.input_masks, list(patches.origins))

    def inverse_label(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.label_scale + self.label_mean

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "label_mean": self.label_mean,
            "label_scale": self.label_scale,
            "mode": self.mode,
            "fitted_on": self.fitted_on,
            "epsilon": SCALE_EPS,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"]), np.array(d["scale"]), d["label_mean"], d["label_scale"],
                   d.get("mode", "stddev"), d.get("fitted_on", "train"))

    def save(self, path: Path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Path) -> "Standardizer":
        return cls.from_json(json.loads(Path(path).read_text()))


def _spread(values: np.ndarray, mode: str) -> float:
    var = float(np.var(values)) if values.size else 0.0
    if mode == "stddev":
        return float(np.sqrt(var))
    if mode == "variance":
        return var
    raise PreprocessError(f"unknown scale mode {mode!r}; use 'stddev' or 'variance'")


def _clamped(s: float, what: str) -> float:
    if s < SCALE_EPS:
        warnings.warn(f"{what} is (near) constant; scale clamped to {SCALE_EPS}", RuntimeWarning, stacklevel=3)
        return SCALE_EPS
    return s


def fit_standardizer(train, mode: str = "stddev") -> Standardizer:
    """Per-channel statistics over valid pixels of the training patches only (population variance)."""
    ps = train if isinstance(train, PatchSet) else PatchSet.from_patches(list(train))
    if not len(ps):
        raise PreprocessError("cannot fit a standardizer on zero patches")
    c = ps.inputs.shape[1]
    means, scales = np.zeros(c), np.zeros(c)
    valid_in = ps.input_masks
    for ch in range(c):
        v = ps.inputs[:, ch][valid_in].astype(np.float64)
        means[ch] = v.mean() if v.size else 0.0
        scales[ch] = _clamped(_spread(v, mode), f"channel {ch}")
    lab = ps.labels[ps.label_masks].astype(np.float64)
    return Standardizer(means, scales, float(lab.mean()), _clamped(_spread(lab, mode), "label"), mode)


def apply_standardizer(s: Standardizer, patch: LabeledPatch) -> LabeledPatch:
    x, y = s.apply_arrays(patch.input[None], patch.label[None], patch.label_mask[None], patch.input_mask[None])
    return replace(patch, input=x[0], label=y[0])


# -- augmentation --------------------------------------------------------------


def flip_arrays(x: np.ndarray, flip_h: bool, flip_v: bool) -> np.ndarray:
    if flip_h:
        x = x[..., ::-1]
    if flip_v:
        x = x[..., ::-1, :]
    return np.ascontiguousarray(x)


def augment_flips(patch: LabeledPatch, seed) -> LabeledPatch:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flip_h, flip_v = rng.random(2) < 0.5
    return replace(
        patch,
        input=flip_arrays(patch.input, flip_h, flip_v),
        label=flip_arrays(patch.label, flip_h, flip_v),
        label_mask=flip_arrays(patch.label_mask, flip_h, flip_v),
        input_mask=flip_arrays(patch.input_mask, flip_h, flip_v),
    )


def augment_batch(inputs, labels, masks, rng: np.random.Generator):
    """Independent 50% horizontal and vertical flips for each patch of a batch."""
    n = len(inputs)
    flips = rng.random((n, 2)) < 0.5
    h, v = flips[:, 0], flips[:, 1]
    inputs = np.where(h[:, None, None, None], inputs[..., ::-1], inputs)
    inputs = np.where(v[:, None, None, None], inputs[..., ::-1, :], inputs)
    labels = np.where(h[:, None, None], labels[..., ::-1], labels)
    labels = np.where(v[:, None, None], labels[..., ::-1, :], labels)
    masks = np.where(h[:, None, None], masks[..., ::-1], masks)
    masks = np.where(v[:, None, None], masks[..., ::-1, :], masks)
    return inputs, labels, masks
