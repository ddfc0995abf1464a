"""Synthetic dataset generator tests: determinism, structure, confounders."""

import numpy as np
import pytest

from gradcamo.errors import ValidationError
from gradcamo.synth import (
    CONTROL_LABEL,
    SynthConfig,
    count_cells,
    describe,
    format_describe,
    generate,
    well_name,
)
from gradcamo.volume import prepare_cells

SMALL = dict(n_doses=3, wells_per_dose=2, sites_per_well=2, cells_per_site=4,
             volume_shape=(96, 96, 12), margin_xy=20,
             cell_radius_xy=(9.0, 13.0), cell_radius_z=(5.0, 6.0))


@pytest.fixture(scope="module")
def small_clean():
    return generate(SynthConfig(seed=11, confound_strength=0.0, **SMALL))


@pytest.fixture(scope="module")
def full_clean():
    return generate(SynthConfig(seed=5, confound_strength=0.0))


@pytest.fixture(scope="module")
def full_confounded():
    return generate(SynthConfig(seed=5, confound_strength=1.0))


def bg_gradient_features(stacks, masks, manifest, crop_xy=64):
    """Mean |gradient| over out-of-mask voxels, one row per cell."""
    cells, kept, _ = prepare_cells(stacks, masks, manifest, crop_xy=crop_xy,
                                   min_voxels=200)
    feats, labels, splits = [], [], []
    for crop, rec in zip(cells, kept):
        out = crop.mask == 0
        row = []
        for ch in range(crop.volume.shape[0]):
            v = crop.volume[ch]
            gx = np.abs(np.diff(v, axis=0))[out[1:] & out[:-1]]
            gy = np.abs(np.diff(v, axis=1))[out[:, 1:] & out[:, :-1]]
            row.append(float(gx.mean() + gy.mean()))
        feats.append(row)
        labels.append(rec.label)
        splits.append(rec.split)
    return np.array(feats), np.array(labels), np.array(splits)


def nearest_mean_accuracy(feats, labels, splits):
    train = splits == "train"
    test = splits == "test"
    classes = np.unique(labels)
    mu = np.stack([feats[train & (labels == k)].mean(axis=0) for k in classes])
    pred = classes[np.argmin(((feats[test, None, :] - mu[None]) ** 2).sum(-1), axis=1)]
    return float((pred == labels[test]).mean())


class TestStructure:
    def test_counts_and_order(self, full_clean):
        stacks, masks, man = full_clean
        assert len(stacks) == len(masks) == 48
        assert len(man.records) == 576
        keys = [(s.well, s.site) for s in stacks]
        assert keys == sorted(keys)
        ids = [r.cell_id for r in man.records]
        assert ids == sorted(ids)
        for stack in stacks:
            assert stack.image.shape == (3, 344, 264, 16)
            assert stack.image.dtype == np.float32
            assert np.isfinite(stack.image).all()
            assert stack.image.min() >= 0

    def test_split_sizes_and_well_holdout(self, full_clean):
        _, _, man = full_clean
        per = {s: len(man.split_records(s)) for s in ("train", "val", "test")}
        assert per["test"] == 288
        assert per["train"] + per["val"] == 288
        assert per["val"] == round(0.25 * 288)
        test_wells = {r.well for r in man.split_records("test")}
        other_wells = {r.well for r in man.records if r.split != "test"}
        assert not test_wells & other_wells
        man.validate()

    def test_well_naming(self):
        assert well_name(1, 0) == "B02"
        assert well_name(6, 1) == "G03"
        with pytest.raises(ValidationError):
            well_name(0, 0)

    def test_masks_match_records(self, small_clean):
        stacks, masks, man = small_clean
        by_stack = {(s.well, s.site): m for s, m in zip(stacks, masks)}
        for rec in man.records:
            inst = by_stack[(rec.well, rec.site)].labels
            assert (inst == rec.instance).sum() > 200
        for mask in masks:
            ids = set(np.unique(mask.labels)) - {0}
            assert ids == set(range(1, 5))

    def test_control_label_is_lowest_dose(self):
        assert CONTROL_LABEL == 1

    def test_describe_matches_generate(self, small_clean):
        _, _, man = small_clean
        cfg = SynthConfig(seed=11, confound_strength=0.0, **SMALL)
        assert describe(cfg) == count_cells(man)
        text = format_describe(describe(cfg))
        assert "total cells: 48" in text
        assert "B02" in text

    def test_config_validation(self):
        with pytest.raises(ValidationError, match="3 channels"):
            SynthConfig(channels=4)
        with pytest.raises(ValidationError, match="confound_strength"):
            SynthConfig(confound_strength=1.5)
        with pytest.raises(ValidationError, match="doses"):
            SynthConfig(n_doses=1)
        with pytest.raises(ValidationError, match="volume"):
            SynthConfig(volume_shape=(64, 64))
        with pytest.raises(ValidationError, match="cells_per_site"):
            generate(SynthConfig(cells_per_site=400))
        with pytest.raises(ValidationError, match="margin"):
            generate(SynthConfig(margin_xy=170))
        with pytest.raises(ValidationError, match="placement_jitter"):
            SynthConfig(placement_jitter=-1.0)


class TestDeterminism:
    def test_same_seed_bitwise(self):
        a = generate(SynthConfig(seed=3, confound_strength=0.5, **SMALL))
        b = generate(SynthConfig(seed=3, confound_strength=0.5, **SMALL))
        for sa, sb in zip(a[0], b[0]):
            assert sa.image.tobytes() == sb.image.tobytes()
        for ma, mb in zip(a[1], b[1]):
            assert ma.labels.tobytes() == mb.labels.tobytes()
        assert ([r.to_dict() for r in a[2].records]
                == [r.to_dict() for r in b[2].records])

    def test_different_seed_differs(self):
        a = generate(SynthConfig(seed=3, **SMALL))
        b = generate(SynthConfig(seed=4, **SMALL))
        assert any(sa.image.tobytes() != sb.image.tobytes()
                   for sa, sb in zip(a[0], b[0]))


class TestConfounder:
    def test_gamma_touches_background_only(self, full_clean, full_confounded):
        for s0, s1, m in zip(full_clean[0], full_confounded[0], full_clean[1]):
            inside = m.labels > 0
            assert np.array_equal(s0.image[:, inside], s1.image[:, inside])
            assert np.abs(s1.image[:, ~inside] - s0.image[:, ~inside]).max() > 0.01

    def test_clean_background_carries_no_dose_signal(self, full_clean):
        feats, labels, splits = bg_gradient_features(*full_clean)
        acc = nearest_mean_accuracy(feats, labels, splits)
        assert acc < 0.30, f"clean background should be near chance, got {acc:.3f}"

    def test_clean_background_level_is_dose_free(self, full_clean):
        cells, kept, _ = prepare_cells(*full_clean, crop_xy=64, min_voxels=200)
        by_dose = {}
        for crop, rec in zip(cells, kept):
            out = crop.mask == 0
            lo = crop.volume[1].min()
            hi = crop.volume[1].max()
            resc = (crop.volume[1] - lo) / (hi - lo + 1e-8)
            by_dose.setdefault(rec.label, []).append(float(resc[out].mean()))
        means = [np.mean(v) for _, v in sorted(by_dose.items())]
        assert max(means) - min(means) < 0.01

    def test_confounded_background_classifies_dose(self, full_confounded):
        feats, labels, splits = bg_gradient_features(*full_confounded)
        acc = nearest_mean_accuracy(feats, labels, splits)
        assert acc > 0.50, f"planted shortcut should classify doses, got {acc:.3f}"

    def test_in_cell_dose_signal_present(self, full_clean):
        # nucleus channel mass concentrates as dose (nucleus size) grows
        cells, kept, _ = prepare_cells(*full_clean, crop_xy=64, min_voxels=200)
        frac = {}
        for crop, rec in zip(cells, kept):
            inside = crop.mask == 1
            nuc = crop.volume[0]
            lit = (nuc > 0.5 * nuc.max()) & inside
            frac.setdefault(rec.label, []).append(lit.sum() / inside.sum())
        means = [float(np.mean(v)) for _, v in sorted(frac.items())]
        assert means == sorted(means), f"nucleus fraction not monotone: {means}"
        assert means[-1] > means[0] * 1.8
