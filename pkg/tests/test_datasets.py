import json

import numpy as np
import pytest

from pointshade.cloud import load_pcls
from pointshade.datasets import DatasetConfig, generate_dataset, load_manifest, load_split, proportional_split
from pointshade.images import load_pfm


def small_config(**kw):
    defaults = dict(n_scenes=4, n_lightings=1, effect="ao", n_points=600,
                    seed=1, ao_rays=32, gi_rays=48, bounces=2, ref_size=24,
                    split_scenes=(2, 1, 1))
    defaults.update(kw)
    return DatasetConfig(**defaults)


def test_proportional_split_shapes():
    assert sum(proportional_split(17)) == 17
    assert proportional_split(17) == (10, 2, 5)
    assert all(c >= 1 for c in proportional_split(3))
    assert proportional_split(1) == (1, 0, 0)


def test_effect_validation():
    with pytest.raises(ValueError, match="not supported"):
        DatasetConfig(effect="sss")


def test_ao_dataset_layout_and_combinatorics(tmp_path):
    config = small_config(n_lightings=2, split_lightings=(1, 0, 1))
    out = tmp_path / "data"
    manifest = generate_dataset(out, config)
    clouds = sorted((out / "clouds").glob("*.pcls"))
    assert len(clouds) == 8  # scenes x lightings files
    assert manifest["lighting_independent"] is True
    # AO ignores lighting: identical content across the lighting axis
    a = (out / "clouds" / "scene0000_l00.pcls").read_bytes()
    b = (out / "clouds" / "scene0000_l01.pcls").read_bytes()
    assert a == b
    sizes = {k: len(v) for k, v in manifest["splits"].items()}
    assert sizes == {"train": 4, "val": 2, "test": 2}


def test_dataset_deterministic_bytes(tmp_path):
    config = small_config()
    m1 = generate_dataset(tmp_path / "a", config)
    m2 = generate_dataset(tmp_path / "b", config)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    assert m1 == m2


def test_ao_targets_in_range_and_loadable(tmp_path):
    config = small_config()
    generate_dataset(tmp_path / "d", config)
    manifest = load_manifest(tmp_path / "d")
    total = 0
    for split in ("train", "val", "test"):
        for name, cloud in load_split(tmp_path / "d", manifest, split):
            assert cloud.target.shape == (600, 1)
            assert np.all(cloud.target >= 0) and np.all(cloud.target <= 1)
            assert np.all(np.isfinite(cloud.target))
            total += 1
    assert total == 4


def test_gi_targets_nonnegative_and_direct_channel(tmp_path):
    config = small_config(effect="gi", n_scenes=3, split_scenes=(1, 1, 1),
                          n_lightings=3, split_lightings=(1, 1, 1), n_points=300)
    generate_dataset(tmp_path / "g", config)
    manifest = load_manifest(tmp_path / "g")
    assert manifest["lighting_independent"] is False
    name, cloud = load_split(tmp_path / "g", manifest, "train")[0]
    assert cloud.target.shape == (300, 3)
    assert cloud.direct is not None
    assert np.all(cloud.target >= 0) and np.all(np.isfinite(cloud.target))
    assert np.all(cloud.direct >= 0)


def test_reference_images_cover_test_split(tmp_path):
    config = small_config()
    generate_dataset(tmp_path / "r", config)
    manifest = load_manifest(tmp_path / "r")
    assert set(manifest["references"]) == set(manifest["splits"]["test"])
    for name, rel in manifest["references"].items():
        img = load_pfm(tmp_path / "r" / rel)
        assert img.width == 24 and img.height == 24
        assert img.mask.any()
        assert np.all(img.values[img.mask] >= 0)


def test_manifest_is_json_and_echoes_config(tmp_path):
    config = small_config()
    generate_dataset(tmp_path / "m", config)
    with open(tmp_path / "m" / "manifest.json") as f:
        manifest = json.load(f)
    assert manifest["config"]["n_scenes"] == 4
    assert manifest["config"]["seed"] == 1
    assert "occlusion" in manifest["target_convention"]
