"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. Criteria 7 and 8 train
all three widths on the 35-scene dataset using ``configs/desk.json`` and take
several minutes each.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from terrai import evaluate, green, pipeline, preprocess, synth, train, unet
from terrai.autodiff import Graph
from terrai.gradcheck import check_model

from conftest import standardized_patches

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"


def verdict(capsys, number, ok, detail, seconds, limit):
    ok = ok and seconds < limit
    with capsys.disabled():
        print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} | {detail} | {seconds:.1f}s (limit {limit:.0f}s)")
    return ok


def test_criterion_1_green_golden(capsys):
    t0 = time.perf_counter()
    j = {"small": 16619.0, "baseline": 33172.0, "large": 52769.0}
    kwh = {k: green.joules_to_kwh(v) for k, v in j.items()}
    d_small = green.delta_energy(kwh["baseline"], kwh["small"])
    d_large = green.delta_energy(kwh["baseline"], kwh["large"])
    checks = [
        abs(kwh["small"] - 4.62e-3) <= 5e-6,
        abs(kwh["baseline"] - 9.21e-3) <= 5e-6,
        abs(kwh["large"] - 14.66e-3) <= 5e-6,
        abs(d_small - 4.60e-3) <= 2e-5,
        abs(d_large - 5.44e-3) <= 2e-5,
        abs(green.co2_equivalent(d_small) - 0.76) <= 0.01,
        abs(green.co2_equivalent(d_large) - 0.90) <= 0.01,
        abs(green.efficiency_gain(j["baseline"], j["small"]) - 49.90) <= 0.01,
    ]
    detail = (f"kWh {kwh['small']:.4e}/{kwh['baseline']:.4e}/{kwh['large']:.4e}, "
              f"dE {d_small:.4e}/{d_large:.4e}, CO2e {green.co2_equivalent(d_small):.3f}/"
              f"{green.co2_equivalent(d_large):.3f} g, gain {green.efficiency_gain(j['baseline'], j['small']):.3f}%")
    assert verdict(capsys, 1, all(checks), detail, time.perf_counter() - t0, 1)


def test_criterion_2_gradients(capsys):
    t0 = time.perf_counter()
    patch = standardized_patches(40, seed=3)
    # a patch with some no-data pixels so the mask is exercised too
    i = int(np.argmin(patch.label_masks.reshape(len(patch), -1).sum(axis=1)))
    x = patch.inputs[i:i + 1].astype(np.float64)
    label = patch.labels[i:i + 1].astype(np.float64)
    mask = patch.label_masks[i:i + 1]
    # Check a briefly trained model. At initialization the biases are exactly 0, so any
    # all-zero receptive field (no-data inputs, dead units) puts a pre-activation exactly
    # on the ReLU kink, where a central difference is not a derivative.
    model = unet.build_model(unet.width_config("small"), seed=0)
    train.train_loop(model, patch, patch, train.TrainConfig(max_epochs=3, patience=3, batch_size=8))
    model = model.astype(np.float64)
    errors = check_model(model, x, label, mask, step=1e-5)
    worst = max(errors, key=errors.get)
    detail = (f"{unet.parameter_count(model)} params, max rel err {errors[worst]:.2e} ({worst}), "
              f"{int(mask.sum())}/64 valid pixels")
    assert verdict(capsys, 2, errors[worst] < 5e-3, detail, time.perf_counter() - t0, 300)


def _loss_and_grads(model, x, label, mask, pred_junk=None):
    model.zero_grad()
    g = Graph()
    pred = model.forward(x, g)
    if pred_junk is not None:
        pred.data[:, 0][~mask] = pred_junk
    loss = unet.masked_rmse_loss(g, pred, label, mask)
    g.backward(loss)
    return loss.data.tobytes(), [p.grad.tobytes() for p in model.parameters()]


def test_criterion_3_masking_contract(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    ok, trials = True, 0
    for variant in ("small", "baseline"):
        model = unet.build_model(unet.width_config(variant), seed=1)
        for _ in range(5):
            x = rng.standard_normal((4, 18, 8, 8)).astype(np.float32)
            label = rng.standard_normal((4, 8, 8)).astype(np.float32)
            mask = rng.random((4, 8, 8)) > 0.35
            base = _loss_and_grads(model, x, label, mask)
            mutated = label.copy()
            mutated[~mask] = rng.uniform(-1e4, 1e4, (~mask).sum()).astype(np.float32)
            ok &= _loss_and_grads(model, x, mutated, mask) == base
            junk = rng.uniform(-1e4, 1e4, (~mask).sum()).astype(np.float32)
            ok &= _loss_and_grads(model, x, label, mask, pred_junk=junk) == base
            trials += 2
    detail = f"{trials} label/prediction mutations, loss and all parameter gradients bit-identical: {ok}"
    assert verdict(capsys, 3, ok, detail, time.perf_counter() - t0, 10)


def _quantile_oracle(values, q):
    v = sorted(values)
    h = (len(v) - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (h - lo) * (v[hi] - v[lo])


def test_criterion_4_preprocessing_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    count_ok = True
    for k in range(20):
        h, w = (int(v) for v in rng.integers(8, 40, 2))
        spec = synth.FieldSpec(height=h, width=w, seed=k, boundary_irregularity=float(rng.uniform(0, 0.9)))
        scene = synth.generate_scene(spec)
        valid = scene.truth.mask.valid
        brute = [(r, c) for r in range(h - 7) for c in range(w - 7) if valid[r:r + 8, c:c + 8].any()]
        got = [o[2:] for o in preprocess.extract_patch_set(scene).origins]
        count_ok &= got == brute

    iqr_ok = True
    for _ in range(50):
        n = int(rng.integers(4, 40))
        means = rng.lognormal(4, 0.6, n).tolist()
        if rng.random() < 0.5:
            means[int(rng.integers(n))] *= 8
        q1, q3 = _quantile_oracle(means, 0.25), _quantile_oracle(means, 0.75)
        lo, hi = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
        expected = [i for i, m in enumerate(means) if lo <= m <= hi]
        kept, _ = preprocess.iqr_filter(list(enumerate(means)), key=lambda t: t[1])
        iqr_ok &= [i for i, _ in kept] == expected

    split_ok = True
    for seed in range(5):
        n_parcels, per = 10, 200
        labels = rng.uniform(0, 150, (n_parcels * per, 8, 8)).astype(np.float32)
        masks = np.ones(labels.shape, bool)
        origins = [(f"p{i // per}", 2, i % per, 0) for i in range(len(labels))]
        ps = preprocess.PatchSet(np.zeros((len(labels), 1, 8, 8), np.float32), labels, masks, masks, origins)
        bins = 10
        split = preprocess.stratified_split(ps, (0.6, 0.2, 0.2), seed, bins)
        n = len(ps)
        split_ok &= len(split.test) == 0.2 * n
        split_ok &= abs(len(split.train) - 0.6 * n) <= bins and abs(len(split.validation) - 0.2 * n) <= bins
        test_parcels = {origins[i][0] for i in split.test}
        split_ok &= not test_parcels & {origins[i][0] for i in split.train + split.validation}
        rest = np.array(sorted(split.train + split.validation))
        stat = preprocess.patch_mean_label(labels[rest], masks[rest])
        bin_id = np.searchsorted(np.array(split.bin_edges)[1:-1], stat, side="right")
        in_train = np.isin(rest, split.train)
        for b in range(bins):
            m = bin_id == b
            # within a bin, train:validation is 60:20 up to one patch
            split_ok &= abs(in_train[m].sum() - 0.75 * m.sum()) <= 1
            split_ok &= abs((~in_train[m]).sum() - 0.25 * m.sum()) <= 1
    detail = f"patch counts {count_ok}, IQR oracle {iqr_ok}, split ratios+isolation {split_ok}"
    assert verdict(capsys, 4, count_ok and iqr_ok and split_ok, detail, time.perf_counter() - t0, 30)


def test_criterion_5_reconstruction_oracle(capsys):
    t0 = time.perf_counter()
    exact, coverage_ok = True, True
    for seed in range(10):
        scene = synth.generate_scene(synth.FieldSpec(seed=100 + seed, boundary_irregularity=0.6))
        ps = preprocess.extract_patch_set(scene)
        valid = scene.truth.mask.valid
        rec = evaluate.reconstruct_from_arrays(ps.origins, ps.labels, scene.truth.shape, mask=valid)
        exact &= np.array_equal(rec.pmap.mask.valid, valid)
        exact &= np.array_equal(rec.pmap.grid.values[valid], scene.truth.grid.values[valid])
        brute = np.zeros(scene.truth.shape, int)
        for _, _, r, c in ps.origins:
            for i in range(8):
                for j in range(8):
                    brute[r + i, c + j] += 1
        coverage_ok &= np.array_equal(brute, rec.coverage)
    detail = f"10 scenes 48x48: exact on valid pixels {exact}, coverage matches brute force {coverage_ok}"
    assert verdict(capsys, 5, exact and coverage_ok, detail, time.perf_counter() - t0, 30)


def test_criterion_6_overfit(capsys):
    t0 = time.perf_counter()
    patches = standardized_patches(20)
    cfg = train.TrainConfig(max_epochs=500, patience=500, batch_size=64, seed=0, augment=False)
    runs = []
    for _ in range(2):
        model = unet.build_model(unet.width_config("small"), seed=0)
        rep = train.train_loop(model, patches, patches, cfg)
        runs.append((rep, b"".join(p.data.tobytes() for p in model.parameters())))
    (rep, w1), (rep2, w2) = runs
    reached = next((i + 1 for i, v in enumerate(rep.validation_losses) if v < 0.05), None)
    deterministic = w1 == w2 and rep.validation_losses == rep2.validation_losses
    detail = (f"best masked RMSE {rep.best_validation_loss:.4f} (standardized) at epoch {rep.best_epoch}, "
              f"<0.05 first at epoch {reached}, deterministic {deterministic}")
    ok = rep.best_validation_loss < 0.05 and deterministic
    assert verdict(capsys, 6, ok, detail, time.perf_counter() - t0, 600)


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """Run the full desk pipeline twice with the same config into two directories."""
    runs = []
    for name in ("run_a", "run_b"):
        out = tmp_path_factory.mktemp(name)
        cfg = pipeline.load_config(DESK_CONFIG, {"output_dir": str(out)})
        t0 = time.perf_counter()
        doc = pipeline.run_all(cfg)
        runs.append((out, cfg, doc, time.perf_counter() - t0))
    return runs


@pytest.mark.slow
def test_criterion_7_desk_learning_signal(desk_runs, capsys):
    out, cfg, _, seconds = desk_runs[0]
    doc = json.loads((out / "eval" / "metrics.json").read_text())
    v = doc["variants"]
    mean_mape = v["train_mean"]["patch"]["mape"]
    base_mape = v["baseline"]["patch"]["mape"]
    rel = 1 - base_mape / mean_mape
    map_rel = 1 - v["baseline"]["map"]["mape"] / v["train_mean"]["map"]["mape"]
    counts = [v[n]["parameter_count"] for n in ("small", "baseline", "large")]
    n_test = len(doc["test_scenes"])
    per_map = all(len(v[n]["per_map"]) == n_test > 0 for n in ("small", "baseline", "large"))
    ok = rel >= 0.30 and map_rel >= 0.30 and per_map and counts[0] < counts[1] < counts[2]
    detail = (f"baseline test MAPE {base_mape:.2f}% vs train-mean {mean_mape:.2f}% ({100 * rel:.1f}% better; "
              f"map scope {100 * map_rel:.1f}%), per-map metrics for {n_test} maps x 3 variants {per_map}, "
              f"params {counts[0]} < {counts[1]} < {counts[2]}")
    assert verdict(capsys, 7, ok, detail, seconds, 3600)


@pytest.mark.slow
def test_criterion_8_determinism(desk_runs, capsys):
    (a, _, _, ta), (b, _, _, tb) = desk_runs
    files = [Path("eval/metrics.csv"), Path("eval/metrics.json")]
    for variant in ("small", "baseline", "large"):
        files += [Path(f"train/{variant}/checkpoint.bin"), Path(f"train/{variant}/checkpoint.json")]
    same = {str(f): (a / f).read_bytes() == (b / f).read_bytes() for f in files}
    detail = f"{sum(same.values())}/{len(same)} artifacts bit-identical across two runs"
    if not all(same.values()):
        detail += f"; differing: {[k for k, ok in same.items() if not ok]}"
    assert verdict(capsys, 8, all(same.values()), detail, ta + tb, 2 * 3600)
