"""Finite-difference check of every U-Net parameter gradient on one standardized patch.

    python3 scripts/gradcheck_unet.py --variant small --step 1e-5 [--untrained]
"""
import argparse

import numpy as np

from terrai import preprocess, synth, train, unet
from terrai.gradcheck import check_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variant", default="small")
    ap.add_argument("--step", type=float, default=1e-5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--untrained", action="store_true",
                    help="check at initialization (zero biases put some units exactly on the ReLU kink)")
    args = ap.parse_args()

    scenes = [synth.generate_scene(synth.FieldSpec(height=16, width=16, seed=args.seed + i, parcel_id=f"g{i}"))
              for i in range(4)]
    pool = preprocess.PatchSet.concat([preprocess.extract_patch_set(s) for s in scenes])
    pool = preprocess.fit_standardizer(pool).apply(pool)
    i = int(np.argmin(pool.label_masks.reshape(len(pool), -1).sum(axis=1)))

    model = unet.build_model(unet.width_config(args.variant), seed=args.seed)
    if not args.untrained:
        sub = pool[np.arange(0, len(pool), max(1, len(pool) // 40))]
        train.train_loop(model, sub, sub, train.TrainConfig(max_epochs=3, patience=3, batch_size=8))
    model = model.astype(np.float64)
    errors = check_model(model, pool.inputs[i:i + 1].astype(np.float64),
                         pool.labels[i:i + 1].astype(np.float64), pool.label_masks[i:i + 1], args.step)
    for name, err in errors.items():
        print(f"{name:<26}{err:.3e}")
    print(f"max relative error {max(errors.values()):.3e} over {unet.parameter_count(model)} parameters")


if __name__ == "__main__":
    main()
