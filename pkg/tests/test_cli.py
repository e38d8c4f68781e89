import json

import pytest

from terrai import cli, pipeline

TINY = [
    "--dataset.n_scenes", "6", "--dataset.size", "16",
    "--model.variants", '["small"]',
    "--train.max_epochs", "2", "--train.patience", "2",
    "--preprocess.max_patches_per_parcel", "12",
]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    lines = [line for line in err.splitlines() if line.startswith("{")]
    assert len(lines) == 1
    return json.loads(lines[0])


def test_eval_before_train_is_dependency_error(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert run(capsys, "synth", "--output_dir", out, *TINY)[0] == 0
    assert run(capsys, "prep", "--output_dir", out, *TINY)[0] == 0
    code, _, err = run(capsys, "eval", "--output_dir", out, *TINY)
    assert code == 2
    doc = error_line(err)
    assert doc["kind"] == "dependency" and "train" in doc["message"]


def test_unknown_key_and_bad_usage(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--output_dir", str(tmp_path), "--dataset.nope", "3")
    assert code == 2 and error_line(err)["kind"] == "config"
    code, _, err = run(capsys, "bogus")
    assert code == 2 and error_line(err)["kind"] == "usage"
    code, _, err = run(capsys, "synth", "--model.variants", '["tiny"]')
    assert code == 2


def test_missing_config_file(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--config", str(tmp_path / "none.json"))
    assert code == 2 and "not found" in error_line(err)["message"]


def test_config_file_and_env_root(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"config_version": 1, "dataset": {"n_scenes": 3, "size": 12}}))
    monkeypatch.setenv(pipeline.OUTPUT_ENV, str(tmp_path / "envroot"))
    code, out, _ = run(capsys, "synth", "--config", str(cfg))
    assert code == 0 and "3 scenes" in out
    assert (tmp_path / "envroot" / "synth" / "manifest.json").exists()


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in cli.COMMANDS:
        assert name in out


def test_green_report_reproduces_published_table(tmp_path, capsys):
    code, out, _ = run(capsys, "green-report", "--output_dir", str(tmp_path),
                       "--joules", "small=16619", "baseline=33172", "large=52769")
    assert code == 0
    rows = {line.split(",")[0]: line.split(",") for line in out.splitlines()[2:]}
    assert float(rows["small"][2]) == pytest.approx(4.62e-3, abs=5e-6)
    assert float(rows["small"][5]) == pytest.approx(0.76, abs=0.01)
    assert float(rows["large"][5]) == pytest.approx(0.90, abs=0.01)
    assert float(rows["small"][6]) == pytest.approx(49.90, abs=0.01)
    assert (tmp_path / "green" / "green_report.json").exists()
    code, _, err = run(capsys, "green-report", "--output_dir", str(tmp_path), "--joules", "small")
    assert code == 2


def test_stage_checksum_mismatch_detected(tmp_path, capsys):
    out = str(tmp_path / "run")
    run(capsys, "synth", "--output_dir", out, *TINY)
    code, _, err = run(capsys, "prep", "--output_dir", out, *TINY, "--dataset.size", "20")
    assert code == 2 and error_line(err)["kind"] == "checksum"
    band = next((tmp_path / "run" / "synth").glob("*.truth.band"))
    raw = bytearray(band.read_bytes())
    raw[0] ^= 1
    band.write_bytes(bytes(raw))
    code, _, err = run(capsys, "prep", "--output_dir", out, *TINY)
    assert code == 2 and "checksum" in error_line(err)["message"]


def test_full_tiny_pipeline_is_deterministic(tmp_path, capsys):
    digests = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        code, stdout, err = run(capsys, "all", "--output_dir", out, "--power-watts", "15", *TINY)
        assert code == 0, err
        root = tmp_path / name
        assert (root / "render" / "stage.json").exists()
        assert list((root / "render" / "small").glob("*_predicted.pgm"))
        rep = json.loads((root / "train" / "small" / "train_report.json").read_text())
        assert rep["energy"]["source"] == "estimated" and rep["epochs"] == 2
        digests.append({
            "ckpt": pipeline.sha256_file(root / "train" / "small" / "checkpoint.bin"),
            "csv": pipeline.sha256_file(root / "eval" / "metrics.csv"),
            "json": pipeline.sha256_file(root / "eval" / "metrics.json"),
        })
        code, stdout, _ = run(capsys, "green-report", "--output_dir", out, *TINY)
        assert code == 2  # no baseline variant was trained
    assert digests[0] == digests[1]
