"""Reproducible stage runner behind the ``terrai`` command line.

Stages write into ``<output_dir>/<stage>/`` and finish with a ``stage.json``
record holding the checksum of the config sections the stage depends on and
the sha256 of every file it produced. A downstream stage refuses to run when
that record is missing, its files changed, or the config moved on since.

All randomness derives from the single global seed through
:func:`stage_seed` (sha256 of ``"<seed>:<stage name>"``).
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluate, green, preprocess, raster, synth, unet
from .preprocess import PatchSet, Standardizer
from .train import TrainConfig, train_loop

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
OUTPUT_ENV = "TERRAI_OUTPUT_ROOT"
STAGES = ("synth", "prep", "train", "eval", "render", "green-report")

DEFAULT_CONFIG = {
    "config_version": CONFIG_VERSION,
    "seed": 0,
    "output_dir": None,
    "dataset": {"n_scenes": 35, "size": 48, "spec_path": None},
    "preprocess": {
        "iqr_k": 1.5,
        "bins": 10,
        "ratios": [0.6, 0.2, 0.2],
        "scale": "stddev",
        "max_patches_per_parcel": None,
    },
    "model": {"variants": ["small", "baseline", "large"], "activation": "relu"},
    "train": {
        "learning_rate": 1e-3,
        "max_epochs": 200,
        "patience": 10,
        "batch_size": 64,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_epsilon": 1e-8,
        "augment": True,
    },
    "energy": {"power_watts": None, "emission_factor": 0.166, "emission_label": "EU grid 2023"},
    "render": {"max_maps": None},
}

# config sections each stage's outputs depend on
STAGE_SECTIONS = {
    "synth": ("seed", "dataset"),
    "prep": ("seed", "dataset", "preprocess"),
    "train": ("seed", "dataset", "preprocess", "model", "train"),
    "eval": ("seed", "dataset", "preprocess", "model", "train"),
}


class StageError(Exception):
    """Pipeline failure carrying a process exit code (2 = usage/dependency, 1 = runtime)."""

    def __init__(self, message: str, code: int = 1, kind: str = "runtime"):
        super().__init__(message)
        self.code = code
        self.kind = kind


def stage_seed(seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# -- config --------------------------------------------------------------------


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in out:
            raise StageError(f"unknown config key {where!r}", 2, "config")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, where + ".")
        else:
            out[k] = v
    return out


def set_path(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise StageError(f"unknown config key {dotted!r}", 2, "config")
        node = node[k]
    if keys[-1] not in node:
        raise StageError(f"unknown config key {dotted!r}", 2, "config")
    node[keys[-1]] = value


def validate_config(cfg: dict):
    if cfg.get("config_version") != CONFIG_VERSION:
        raise StageError(f"config_version must be {CONFIG_VERSION}", 2, "config")
    if not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < 2**64:
        raise StageError("seed must be a 64-bit unsigned integer", 2, "config")
    for v in cfg["model"]["variants"]:
        if v not in unet.VARIANTS:
            raise StageError(f"unknown model variant {v!r}", 2, "config")
    if cfg["preprocess"]["scale"] not in ("stddev", "variance"):
        raise StageError("preprocess.scale must be 'stddev' or 'variance'", 2, "config")
    spec_path = cfg["dataset"].get("spec_path")
    if spec_path and not Path(spec_path).exists():
        raise StageError(f"dataset.spec_path {spec_path} does not exist", 2, "config")
    try:
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise StageError(f"invalid train config: {exc}", 2, "config") from None


def load_config(path: Path | None = None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise StageError(f"config file {path} not found", 2, "config")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise StageError(f"config {path} is not valid JSON: {exc}", 2, "config") from None
        cfg = _merge(cfg, user)
    for k, v in (overrides or {}).items():
        set_path(cfg, k, v)
    if not cfg.get("output_dir"):
        cfg["output_dir"] = os.environ.get(OUTPUT_ENV, "runs/default")
    validate_config(cfg)
    return cfg


def config_checksum(cfg: dict, stage: str) -> str:
    subset = {k: cfg[k] for k in STAGE_SECTIONS[stage]}
    return hashlib.sha256(_canonical(subset).encode()).hexdigest()


def train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    kwargs = {k: v for k, v in cfg["train"].items() if k in names}
    return TrainConfig(seed=stage_seed(cfg["seed"], "train"), **kwargs)


# -- stage records ---------------------------------------------------------------


def _write_record(stage_dir: Path, stage: str, cfg: dict, outputs: list[Path], upstream: dict | None = None,
                  extra: dict | None = None) -> dict:
    record = {
        "stage": stage,
        "seed": cfg["seed"],
        "config_checksum": config_checksum(cfg, stage) if stage in STAGE_SECTIONS else None,
        "upstream": upstream or {},
        "outputs": {str(p.relative_to(stage_dir)): sha256_file(p) for p in sorted(outputs)},
    }
    record.update(extra or {})
    (stage_dir / "stage.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return record


def _require(stage_dir: Path, stage: str, cfg: dict, needed_by: str) -> dict:
    rec_path = stage_dir / "stage.json"
    if not rec_path.exists():
        raise StageError(f"{needed_by} requires the {stage} stage output in {stage_dir}; run `terrai {stage}` first",
                         2, "dependency")
    record = json.loads(rec_path.read_text())
    if stage in STAGE_SECTIONS and record.get("config_checksum") != config_checksum(cfg, stage):
        raise StageError(f"{stage} artifacts in {stage_dir} were produced with a different config; rerun {stage}",
                         2, "checksum")
    for rel, digest in record["outputs"].items():
        p = stage_dir / rel
        if not p.exists() or sha256_file(p) != digest:
            raise StageError(f"checksum mismatch for {p}", 2, "checksum")
    return record


def _record_digest(stage_dir: Path) -> str:
    return sha256_file(stage_dir / "stage.json")


def _dirs(cfg: dict) -> dict[str, Path]:
    root = Path(cfg["output_dir"])
    return {s: root / s for s in ("synth", "prep", "train", "eval", "render", "green")}


# -- stages ----------------------------------------------------------------------


def _specs(cfg: dict) -> list[synth.FieldSpec]:
    ds = cfg["dataset"]
    if ds.get("spec_path"):
        entries = json.loads(Path(ds["spec_path"]).read_text())
        return [synth.FieldSpec(**{**e, "band_ranges": {k: tuple(v) for k, v in
                                                        e.get("band_ranges", synth.DEFAULT_BAND_RANGES).items()}})
                for e in entries]
    return synth.default_specs(ds["n_scenes"], stage_seed(cfg["seed"], "synth"), ds["size"])


def run_synth(cfg: dict) -> dict:
    d = _dirs(cfg)["synth"]
    d.mkdir(parents=True, exist_ok=True)
    try:
        manifest = synth.generate_dataset(_specs(cfg), d)
    except synth.SynthError as exc:
        raise StageError(str(exc), 2, "config") from None
    outputs = [d / "manifest.json"] if manifest.scenes else []
    for s in manifest.scenes:
        outputs += [d / name for name in s["checksums"]]
    return _write_record(d, "synth", cfg, outputs, extra={"n_scenes": len(manifest.scenes)})


def run_prep(cfg: dict) -> dict:
    dirs = _dirs(cfg)
    _require(dirs["synth"], "synth", cfg, "prep")
    d = dirs["prep"]
    d.mkdir(parents=True, exist_ok=True)
    pp = cfg["preprocess"]
    scenes = synth.load_dataset(dirs["synth"])
    kept, dropped = preprocess.iqr_filter(scenes, k=pp["iqr_k"])
    patches = PatchSet.concat([preprocess.extract_patch_set(s) for s in kept])
    seed = stage_seed(cfg["seed"], "split")
    split = preprocess.stratified_split(patches, tuple(pp["ratios"]), seed, pp["bins"])
    cap = pp.get("max_patches_per_parcel")
    sub_seed = stage_seed(cfg["seed"], "subsample")
    # capping the union keeps the stratified train:validation proportions
    chosen = set(preprocess.cap_per_parcel(split.train + split.validation, patches, cap, sub_seed))
    train_idx = [i for i in split.train if i in chosen]
    val_idx = [i for i in split.validation if i in chosen]
    std = preprocess.fit_standardizer(patches[train_idx], pp["scale"])
    std.save(d / "standardizer.json")
    outputs = [d / "standardizer.json"]
    for name, idx in (("train", train_idx), ("validation", val_idx), ("test", split.test)):
        std.apply(patches[idx]).save(d / f"{name}.npz")
        outputs.append(d / f"{name}.npz")
    doc = split.to_json(patches.origins)
    doc["train_used"] = len(train_idx)
    doc["validation_used"] = len(val_idx)
    doc["max_patches_per_parcel"] = cap
    doc["dropped_scenes"] = [s.scene_id for s in dropped]
    doc["kept_scenes"] = [s.scene_id for s in kept]
    (d / "split.json").write_text(json.dumps(doc, sort_keys=True))
    outputs.append(d / "split.json")
    log.info("prep: %d patches, train=%d validation=%d test=%d, dropped %d scenes", len(patches),
             len(train_idx), len(val_idx), len(split.test), len(dropped))
    return _write_record(d, "prep", cfg, outputs, {"synth": _record_digest(dirs["synth"])},
                         extra={"n_patches": len(patches)})


def _energy_source(cfg: dict):
    watts = cfg["energy"].get("power_watts")
    return green.EstimatedEnergySource(float(watts)) if watts else None


def run_train(cfg: dict) -> dict:
    dirs = _dirs(cfg)
    _require(dirs["prep"], "prep", cfg, "train")
    prep = dirs["prep"]
    train_set = PatchSet.load(prep / "train.npz")
    val_set = PatchSet.load(prep / "validation.npz")
    manifest = synth.DatasetManifest.load(dirs["synth"] / "manifest.json")
    schema_sum = raster.ChannelSchema.from_json(manifest.schema).checksum()
    tcfg = train_config(cfg)
    d = dirs["train"]
    d.mkdir(parents=True, exist_ok=True)
    outputs, reports = [], {}
    for variant in cfg["model"]["variants"]:
        vdir = d / variant
        vdir.mkdir(exist_ok=True)
        model = unet.build_model(unet.width_config(variant), stage_seed(cfg["seed"], f"init:{variant}"),
                                 train_set.inputs.shape[1], cfg["model"]["activation"])
        report = train_loop(model, train_set, val_set, tcfg, _energy_source(cfg))
        ckpt = vdir / "checkpoint.bin"
        unet.save_checkpoint(model, ckpt, schema_sum, {"config_checksum": config_checksum(cfg, "train")})
        report.checkpoint = str(ckpt)
        (vdir / "train_report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
        outputs += [ckpt, ckpt.with_suffix(".json")]
        reports[variant] = report
    # train reports carry wall time, so they stay out of the checksummed outputs
    _write_record(d, "train", cfg, outputs, {"prep": _record_digest(prep)},
                  extra={"variants": list(cfg["model"]["variants"])})
    return reports


def _predict_original_units(model: unet.UNetModel, patches: PatchSet, std: Standardizer) -> np.ndarray:
    # negative nitrogen rates are not applicable, so predictions floor at 0 kg/ha
    return np.clip(std.inverse_label(model.predict(patches.inputs)), 0.0, None)


def run_eval(cfg: dict) -> dict:
    dirs = _dirs(cfg)
    _require(dirs["prep"], "prep", cfg, "eval")
    _require(dirs["train"], "train", cfg, "eval")
    prep = dirs["prep"]
    std = Standardizer.load(prep / "standardizer.json")
    test = PatchSet.load(prep / "test.npz")
    if not len(test):
        raise StageError("test partition is empty", 1)
    labels = std.inverse_label(test.labels)
    scenes = {s.scene_id: s for s in synth.load_dataset(dirs["synth"])}
    test_ids = sorted({f"{o[0]}_p{o[1]}" for o in test.origins})
    groups = {sid: [i for i, o in enumerate(test.origins) if f"{o[0]}_p{o[1]}" == sid] for sid in test_ids}

    d = dirs["eval"]
    d.mkdir(parents=True, exist_ok=True)
    rows, doc, outputs = [], {"variants": {}, "test_scenes": test_ids}, []

    def score(name: str, pred: np.ndarray):
        pm = evaluate.patch_metrics(pred, labels, test.label_masks)
        recs, truths, per_map = [], [], {}
        mdir = d / "maps" / name
        mdir.mkdir(parents=True, exist_ok=True)
        for sid in test_ids:
            truth = scenes[sid].truth
            idx = groups[sid]
            rec = evaluate.reconstruct_from_arrays([test.origins[i] for i in idx], pred[idx], truth.shape,
                                                   truth.parcel_id, truth.phase, truth.mask.valid)
            recs.append(rec.pmap)
            truths.append(truth)
            per_map[sid] = evaluate.map_metrics(rec.pmap, truth)
            path = mdir / f"{sid}.band"
            raster.save_prescription(rec.pmap, path)
            outputs.extend([path, path.with_suffix(".json")])
        mm = evaluate.map_metrics(recs, truths)
        rows.extend([(name, pm), (name, mm)])
        return {"patch": pm, "map": mm, "per_map": per_map}

    train_mean = np.full(test.labels.shape, std.label_mean)
    doc["variants"]["train_mean"] = score("train_mean", train_mean)
    for variant in cfg["model"]["variants"]:
        model, header = unet.load_checkpoint(dirs["train"] / variant / "checkpoint.bin")
        res = score(variant, _predict_original_units(model, test, std))
        res["parameter_count"] = header["parameter_count"]
        doc["variants"][variant] = res
    (d / "metrics.csv").write_text(evaluate.metrics_csv(rows))
    (d / "metrics.json").write_text(evaluate.metrics_json(doc))
    outputs += [d / "metrics.csv", d / "metrics.json"]
    _write_record(d, "eval", cfg, outputs, {"train": _record_digest(dirs["train"]), "prep": _record_digest(prep)})
    return doc


def run_render(cfg: dict) -> list[Path]:
    dirs = _dirs(cfg)
    record = _require(dirs["eval"], "eval", cfg, "render")
    doc = json.loads((dirs["eval"] / "metrics.json").read_text())
    scenes = {s.scene_id: s for s in synth.load_dataset(dirs["synth"])}
    limit = cfg["render"].get("max_maps")
    ids = doc["test_scenes"][:limit] if limit else doc["test_scenes"]
    d = dirs["render"]
    written = []
    for variant in cfg["model"]["variants"]:
        (d / variant).mkdir(parents=True, exist_ok=True)
        for sid in ids:
            pred = raster.load_prescription(dirs["eval"] / "maps" / variant / f"{sid}.band")
            a, p, _ = evaluate.render_pair(scenes[sid].truth, pred, d / variant / sid)
            written += [a, p]
    _write_record(d, "render", cfg, written, {"eval": _record_digest(dirs["eval"])})
    return written


def run_green_report(cfg: dict, joules: dict[str, float] | None = None, power_watts: float | None = None) -> list:
    """Build the energy/CO2e table from train reports or explicitly measured joules."""
    dirs = _dirs(cfg)
    samples: dict[str, green.EnergySample] = {}
    if joules:
        samples = {k: green.EnergySample(k, float(v), "measured") for k, v in joules.items()}
    else:
        if not (dirs["train"] / "stage.json").exists():
            raise StageError("green-report needs train reports or --joules", 2, "dependency")
        for variant in cfg["model"]["variants"]:
            rep = json.loads((dirs["train"] / variant / "train_report.json").read_text())
            if power_watts:
                samples[variant] = green.EnergySample.estimated(variant, rep["wall_seconds"], power_watts)
            elif rep.get("energy"):
                samples[variant] = green.EnergySample(**rep["energy"])
            else:
                raise StageError(f"train report for {variant} has no energy; pass --power-watts or --joules",
                                 2, "dependency")
    ef = green.EmissionFactor(cfg["energy"]["emission_factor"], cfg["energy"]["emission_label"])
    try:
        rows = green.green_report(samples, ef)
    except green.GreenError as exc:
        raise StageError(str(exc), 2, "usage") from None
    d = dirs["green"]
    d.mkdir(parents=True, exist_ok=True)
    (d / "green_report.csv").write_text(green.report_csv(rows, ef))
    (d / "green_report.json").write_text(green.report_json(rows, ef))
    return rows


def run_all(cfg: dict):
    run_synth(cfg)
    run_prep(cfg)
    run_train(cfg)
    doc = run_eval(cfg)
    run_render(cfg)
    return doc
