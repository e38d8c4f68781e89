"""``terrai`` command line: synth | prep | train | eval | render | green-report.

Every command takes ``--config PATH`` (JSON) and any number of dotted
overrides such as ``--train.max_epochs 20`` or ``--model.variants '["small"]'``.
Override values are parsed as JSON when possible, otherwise kept as strings.

Exit status: 0 success, 1 runtime error, 2 usage/dependency/checksum error.
Errors are reported as a single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .pipeline import StageError

COMMANDS = {
    "synth": "generate the synthetic scene dataset and its manifest",
    "prep": "IQR filtering, patch extraction, split and standardization",
    "train": "train every configured U-Net variant and write checkpoints",
    "eval": "patch and map metrics plus reconstructed prescription maps",
    "render": "actual vs predicted maps as 8-bit PGM pairs",
    "green-report": "energy, savings and CO2e table from train reports",
    "all": "run synth, prep, train, eval and render in order",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise StageError(message, 2, "usage")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: list[str]) -> dict:
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise StageError(f"unexpected argument {tok!r}", 2, "usage")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise StageError(f"override {tok} needs a value", 2, "usage")
            raw = tokens[i + 1]
            i += 2
        out[key.replace("-", "_")] = _parse_value(raw)
    return out


def _parse_joules(items: list[str] | None) -> dict | None:
    if not items:
        return None
    out = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise StageError(f"--joules expects VARIANT=JOULES, got {item!r}", 2, "usage")
        try:
            out[name] = float(value)
        except ValueError:
            raise StageError(f"--joules value for {name!r} is not a number", 2, "usage") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="terrai",
        description="Nitrogen prescription maps from multispectral rasters (synthetic desk-scale pipeline).",
        epilog=f"Dotted config overrides (--section.key VALUE) are accepted after the command. "
               f"Default output root comes from ${pipeline.OUTPUT_ENV} when the config sets none.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        if name in ("train", "green-report", "all"):
            p.add_argument("--power-watts", type=float,
                           help="estimate energy as wall time x this device power (W)")
        if name == "green-report":
            p.add_argument("--joules", nargs="+", metavar="VARIANT=J",
                           help="measured energy per run, e.g. small=16619 baseline=33172")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        parser = build_parser()
        args, rest = parser.parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "all") else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        overrides = parse_overrides(rest)
        power = getattr(args, "power_watts", None)
        if power is not None and args.command != "green-report":
            overrides["energy.power_watts"] = power
        cfg = pipeline.load_config(args.config, overrides)
        cmd = args.command
        if cmd == "synth":
            rec = pipeline.run_synth(cfg)
            print(f"synth: {rec['n_scenes']} scenes -> {pipeline._dirs(cfg)['synth']}")
        elif cmd == "prep":
            rec = pipeline.run_prep(cfg)
            print(f"prep: {rec['n_patches']} patches -> {pipeline._dirs(cfg)['prep']}")
        elif cmd == "train":
            for variant, rep in pipeline.run_train(cfg).items():
                print(f"train: {variant} params={rep.parameter_count} epochs={rep.epochs} "
                      f"best_val={rep.best_validation_loss:.5f}@{rep.best_epoch} stop={rep.stop_reason}")
        elif cmd == "eval":
            doc = pipeline.run_eval(cfg)
            for name, res in doc["variants"].items():
                pm, mm = res["patch"], res["map"]
                print(f"eval: {name} patch rmse={pm.rmse:.3f} mape={pm.mape:.2f}% smape={pm.smape:.2f}% | "
                      f"map rmse={mm.rmse:.3f} mape={mm.mape:.2f}% smape={mm.smape:.2f}%")
        elif cmd == "render":
            print(f"render: {len(pipeline.run_render(cfg))} images -> {pipeline._dirs(cfg)['render']}")
        elif cmd == "green-report":
            rows = pipeline.run_green_report(cfg, _parse_joules(args.joules), power)
            sys.stdout.write(pipeline.green.report_csv(rows))
        elif cmd == "all":
            pipeline.run_all(cfg)
            print(f"all stages complete -> {cfg['output_dir']}")
        return 0
    except StageError as exc:
        print(json.dumps({"status": "error", "code": exc.code, "kind": exc.kind, "message": str(exc)}),
              file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic line
        print(json.dumps({"status": "error", "code": 1, "kind": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
