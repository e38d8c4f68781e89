"""Train the small U-Net on 20 fixed standardized patches and print the loss curve."""
import numpy as np

from terrai import preprocess, synth, train, unet


def main(epochs=500):
    scenes = [synth.generate_scene(synth.FieldSpec(height=16, width=16, seed=i, parcel_id=f"q{i}"))
              for i in range(4)]
    pool = preprocess.PatchSet.concat([preprocess.extract_patch_set(s) for s in scenes])
    sub = pool[np.sort(np.random.default_rng(0).choice(len(pool), 20, replace=False))]
    sub = preprocess.fit_standardizer(sub).apply(sub)
    model = unet.build_model(unet.width_config("small"), seed=0)
    rep = train.train_loop(model, sub, sub, train.TrainConfig(max_epochs=epochs, patience=epochs, augment=False))
    for e in range(0, epochs, 50):
        print(f"epoch {e + 1:>4}  masked rmse {rep.validation_losses[e]:.4f}")
    print(f"best {rep.best_validation_loss:.4f} at epoch {rep.best_epoch}")


if __name__ == "__main__":
    main()
