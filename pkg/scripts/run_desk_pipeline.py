"""Run synth -> prep -> train -> eval -> render on the 35-scene desk config and print the results table.

    python3 scripts/run_desk_pipeline.py --output runs/desk [--power-watts 15]
"""
import argparse
import json
import logging
from pathlib import Path

from terrai import pipeline

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "desk.json")
    ap.add_argument("--output", default="runs/desk")
    ap.add_argument("--power-watts", type=float, default=None)
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")

    overrides = {"output_dir": args.output}
    if args.power_watts:
        overrides["energy.power_watts"] = args.power_watts
    cfg = pipeline.load_config(args.config, overrides)
    doc = pipeline.run_all(cfg)

    print(f"\n{'variant':<11}{'params':>9}{'epochs':>8}  {'patch rmse':>10}{'mape%':>8}{'smape%':>8}"
          f"  {'map rmse':>9}{'mape%':>8}{'smape%':>8}")
    for name, res in doc["variants"].items():
        params, epochs = "-", "-"
        if name != "train_mean":
            params = res["parameter_count"]
            rep = json.loads((Path(args.output) / "train" / name / "train_report.json").read_text())
            epochs = rep["epochs"]
        p, m = res["patch"], res["map"]
        print(f"{name:<11}{params:>9}{epochs:>8}  {p.rmse:>10.3f}{p.mape:>8.2f}{p.smape:>8.2f}"
              f"  {m.rmse:>9.3f}{m.mape:>8.2f}{m.smape:>8.2f}")
    if args.power_watts:
        from terrai.green import report_csv
        print()
        print(report_csv(pipeline.run_green_report(cfg)), end="")


if __name__ == "__main__":
    main()
