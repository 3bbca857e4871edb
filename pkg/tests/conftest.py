import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shapepoint.synthvol import (SynthConfig, generate_case, mix_seed,
                                 save_manifest, split_dataset, store_case)


def make_dataset(root: Path, n_cases: int = 8, dims: int = 16, seed: int = 5,
                 preset: str = "complex"):
    """Generate a small on-disk dataset with manifest; returns the manifest."""
    config = SynthConfig.for_preset(preset, dims=(dims,) * 3, seed=seed)
    ids = [f"{i:03d}" for i in range(n_cases)]
    manifest = split_dataset(ids, seed=seed)
    for entry in manifest.cases:
        entry.seed = mix_seed(seed, 1000 + int(entry.case_id))
        entry.path = f"case_{entry.case_id}"
        volume, mask = generate_case(config, case_seed=entry.seed)
        store_case(root / entry.path, volume, mask, seed=entry.seed, preset=preset)
    save_manifest(root / "manifest.json", manifest)
    return manifest


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """8 complex 16^3 cases (4 train / 2 val / 2 test) shared across tests."""
    root = tmp_path_factory.mktemp("tiny_dataset")
    manifest = make_dataset(root)
    return root, manifest


@pytest.fixture(scope="session")
def sample_mask():
    """One deterministic complex 32^3 mask for geometry tests."""
    config = SynthConfig.for_preset("complex", dims=(32, 32, 32), seed=77)
    _, mask = generate_case(config, case_seed=77)
    return mask
