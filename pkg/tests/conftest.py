import numpy as np
import pytest

from terrai import preprocess, synth


def standardized_patches(n: int, seed: int = 0, scenes: int = 4):
    """``n`` standardized patches drawn from a few small synthetic scenes."""
    sets = [
        preprocess.extract_patch_set(
            synth.generate_scene(synth.FieldSpec(height=16, width=16, seed=seed + i, parcel_id=f"q{i}"))
        )
        for i in range(scenes)
    ]
    pool = preprocess.PatchSet.concat(sets)
    idx = np.sort(np.random.default_rng(seed).choice(len(pool), n, replace=False))
    sub = pool[idx]
    return preprocess.fit_standardizer(sub).apply(sub)


@pytest.fixture(scope="session")
def patches20():
    return standardized_patches(20)
