"""Classifier tests: shapes, training behavior, features, checkpoints."""

import csv

import numpy as np
import pytest

from gradcamo.engine import Tape
from gradcamo.errors import IOFailure, ValidationError
from gradcamo.model import (
    FEATURE_DIM,
    MiniCNN3D,
    TrainConfig,
    build_train_data,
    extract_features,
    load_model,
    predict,
    prepare_eval_inputs,
    save_model,
    train,
    write_history,
)
from gradcamo.volume import CellCrop, ChannelStats, ManifestRecord


def toy_crop(label, seed, channels=2, shape=(16, 16, 16)):
    """Linearly separable content: the bright half encodes the class."""
    rng = np.random.default_rng(seed)
    vol = rng.uniform(0.0, 0.2, size=(channels,) + shape).astype(np.float32)
    half = shape[0] // 2
    if label == 1:
        vol[0, :half] += 0.8
    else:
        vol[0, half:] += 0.8
    mask = np.zeros(shape, dtype=np.uint8)
    mask[4:12, 4:12, 4:12] = 1
    return CellCrop(volume=vol, mask=mask, cell_id=f"toy_{seed:03d}",
                    label=label, well="B02", site=1, center=(8, 8))


def toy_dataset(n_per_class=8, channels=2):
    crops, records = [], []
    i = 0
    for label in (1, 2):
        for j in range(n_per_class):
            split = "val" if j >= n_per_class - 2 else "train"
            crops.append(toy_crop(label, seed=i, channels=channels))
            records.append(ManifestRecord(
                cell_id=f"toy_{i:03d}", label=label, well="B02", site=1,
                split=split))
            i += 1
    return crops, records


class TestForward:
    def test_activation_and_logit_shapes(self):
        net = MiniCNN3D(n_classes=4, in_channels=3, input_shape=(32, 32, 16))
        x = np.zeros((3, 32, 32, 16), dtype=np.float32)
        with Tape() as tape:
            logits, act = net.forward_graph(tape, x)
            assert logits.shape == (4,)
            assert act.shape == (64, 2, 2, 1)

    def test_batched_shapes(self):
        net = MiniCNN3D(n_classes=3, in_channels=2, input_shape=(16, 16, 32))
        x = np.zeros((5, 2, 16, 16, 32), dtype=np.float32)
        with Tape() as tape:
            logits, act = net.forward_graph(tape, x)
            assert logits.shape == (5, 3)
            assert act.shape == (5, 64, 1, 1, 2)

    def test_indivisible_extent_names_the_fix(self):
        net = MiniCNN3D(n_classes=2, in_channels=1, input_shape=(16, 16, 16))
        with pytest.raises(ValidationError, match="divisible by 16.*resize"):
            with Tape() as tape:
                net.forward_graph(tape, np.zeros((1, 20, 16, 16), np.float32))

    def test_channel_mismatch_rejected(self):
        net = MiniCNN3D(n_classes=2, in_channels=3)
        with pytest.raises(ValidationError, match="channels"):
            with Tape() as tape:
                net.forward_graph(tape, np.zeros((2, 32, 32, 16), np.float32))

    def test_bad_constructor_args(self):
        with pytest.raises(ValidationError):
            MiniCNN3D(n_classes=1)
        with pytest.raises(ValidationError):
            MiniCNN3D(n_classes=2, input_shape=(15, 16, 16))

    def test_predict_tie_goes_to_lowest_class(self):
        net = MiniCNN3D(n_classes=3, in_channels=1, input_shape=(16, 16, 16))
        net.params["head_w"][:] = 0
        net.params["head_b"][:] = 0
        k, probs = predict(net, np.ones((1, 16, 16, 16), np.float32))
        assert k == 0
        assert probs == pytest.approx([1 / 3] * 3)

    def test_init_is_seeded(self):
        a = MiniCNN3D(n_classes=2, seed=7)
        b = MiniCNN3D(n_classes=2, seed=7)
        c = MiniCNN3D(n_classes=2, seed=8)
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name])
        assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)


@pytest.fixture(scope="module")
def toy():
    crops, records = toy_dataset()
    return build_train_data(crops, records, input_shape=(16, 16, 16))


class TestTraining:
    def test_separable_toy_reaches_perfect_val(self, toy):
        net = MiniCNN3D(n_classes=2, in_channels=2, input_shape=(16, 16, 16),
                        seed=0)
        history = train(net, toy, TrainConfig(epochs=12, lr=3e-3, batch_size=4,
                                              patience=12, seed=0))
        assert max(row["val_acc"] for row in history) == 1.0

    def test_training_is_deterministic(self, toy):
        runs = []
        for _ in range(2):
            net = MiniCNN3D(n_classes=2, in_channels=2,
                            input_shape=(16, 16, 16), seed=3)
            history = train(net, toy, TrainConfig(epochs=2, seed=3))
            runs.append((history, {k: v.tobytes() for k, v in net.params.items()}))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]

    def test_best_val_weights_are_kept(self, toy):
        net = MiniCNN3D(n_classes=2, in_channels=2, input_shape=(16, 16, 16),
                        seed=1)
        history = train(net, toy, TrainConfig(epochs=6, lr=3e-3, batch_size=4,
                                              patience=6, seed=1))
        best = max(row["val_acc"] for row in history)
        from gradcamo.model import _accuracy
        final = _accuracy(net, toy.val_crops, np.asarray(toy.val_labels),
                          toy.stats)
        assert final == pytest.approx(best)

    def test_early_stop_respects_patience(self, toy):
        net = MiniCNN3D(n_classes=2, in_channels=2, input_shape=(16, 16, 16),
                        seed=0)
        history = train(net, toy, TrainConfig(epochs=40, lr=3e-3, batch_size=4,
                                              patience=2, seed=0))
        assert len(history) < 40
        best_epoch = max(history, key=lambda r: r["val_acc"])["epoch"]
        assert history[-1]["epoch"] - best_epoch >= 2 or history[-1]["val_acc"] == 1.0

    def test_labels_validated(self, toy):
        net = MiniCNN3D(n_classes=2, in_channels=2, input_shape=(16, 16, 16))
        bad = TrainConfig(epochs=1)
        data = toy
        wrong = type(data)(
            train_crops=data.train_crops,
            train_labels=np.full(len(data.train_crops), 9),
            val_crops=data.val_crops, val_labels=data.val_labels,
            stats=data.stats)
        with pytest.raises(ValidationError, match="labels"):
            train(net, wrong, bad)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(lr=0)
        with pytest.raises(ValidationError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValidationError):
            TrainConfig(reg_weight=-0.5)
        with pytest.raises(ValidationError):
            TrainConfig(beta1=1.0)

    def test_regularizer_requires_masks(self, toy):
        net = MiniCNN3D(n_classes=2, in_channels=2, input_shape=(16, 16, 16))
        assert toy.train_masks is None
        with pytest.raises(ValidationError, match="mask"):
            train(net, toy, TrainConfig(epochs=1, reg_weight=0.5))

    def test_history_has_regularizer_column_only_when_active(self):
        crops, records = toy_dataset(n_per_class=4)
        data = build_train_data(crops, records, masks_for_reg=True,
                                input_shape=(16, 16, 16))
        net = MiniCNN3D(n_classes=2, in_channels=2, input_shape=(16, 16, 16))
        history = train(net, data, TrainConfig(epochs=1, reg_weight=0.3))
        assert "mean_gradcamo" in history[0]
        net2 = MiniCNN3D(n_classes=2, in_channels=2, input_shape=(16, 16, 16))
        plain = train(net2, data, TrainConfig(epochs=1))
        assert "mean_gradcamo" not in plain[0]


class TestData:
    def test_label_values_map_to_dense_indices(self):
        crops, records = toy_dataset(n_per_class=4)
        for rec in records:
            rec.label = 10 if rec.label == 1 else 40
        for crop in crops:
            crop.label = 10 if crop.label == 1 else 40
        data = build_train_data(crops, records, input_shape=(16, 16, 16))
        assert data.label_values == (10, 40)
        assert set(data.train_labels) == {0, 1}

    def test_missing_val_split_rejected(self):
        crops, records = toy_dataset(n_per_class=4)
        for rec in records:
            rec.split = "train"
        with pytest.raises(ValidationError, match="validation"):
            build_train_data(crops, records, input_shape=(16, 16, 16))

    def test_masks_for_reg_resized_to_input_shape(self):
        crops, records = toy_dataset(n_per_class=4)
        data = build_train_data(crops, records, masks_for_reg=True,
                                input_shape=(32, 32, 16))
        assert data.train_masks.shape == (len(data.train_crops), 32, 32, 16)
        assert data.train_masks.dtype == np.uint8
        assert set(np.unique(data.train_masks)) <= {0, 1}

    def test_stats_come_from_train_split_only(self):
        crops, records = toy_dataset(n_per_class=4)
        data = build_train_data(crops, records, input_shape=(16, 16, 16))
        cat = np.stack([c.volume for c in data.train_crops]).astype(np.float64)
        want_mean = cat.mean(axis=(0, 2, 3, 4))
        assert np.allclose(data.stats.mean, want_mean, atol=1e-7)

    def test_prepare_eval_inputs_shapes(self):
        crops, _ = toy_dataset(n_per_class=2)
        stats = ChannelStats(mean=[0.1, 0.1], std=[0.5, 0.5])
        inputs, masks = prepare_eval_inputs(crops, stats, (32, 32, 16))
        assert inputs.shape == (len(crops), 2, 32, 32, 16)
        assert inputs.dtype == np.float32
        assert masks.shape == (len(crops), 32, 32, 16)
        with pytest.raises(ValidationError, match="no crops"):
            prepare_eval_inputs([], stats, (32, 32, 16))


class TestFeatures:
    def test_features_equal_pooled_activation(self):
        crops, records = toy_dataset(n_per_class=3)
        data = build_train_data(crops, records, input_shape=(16, 16, 16))
        net = MiniCNN3D(n_classes=2, in_channels=2, input_shape=(16, 16, 16))
        fm = extract_features(net, data.train_crops,
                              [r for r in records if r.split == "train"],
                              data.stats)
        assert fm.values.shape == (len(data.train_crops), FEATURE_DIM)
        from gradcamo.model import _to_batch
        xb = _to_batch(data.train_crops, [0], data.stats, net.input_shape)
        with Tape() as tape:
            _, act = net.forward_graph(tape, xb)
            want = act.data.mean(axis=(2, 3, 4))[0]
        assert np.allclose(fm.values[0], want, atol=1e-6)

    def test_record_count_must_match(self):
        crops, records = toy_dataset(n_per_class=2)
        stats = ChannelStats(mean=[0.1, 0.1], std=[0.5, 0.5])
        net = MiniCNN3D(n_classes=2, in_channels=2, input_shape=(16, 16, 16))
        with pytest.raises(ValidationError, match="record"):
            extract_features(net, crops, records[:-1], stats)


class TestCheckpoint:
    def test_roundtrip_is_exact(self, tmp_path):
        net = MiniCNN3D(n_classes=3, in_channels=2, input_shape=(16, 16, 32),
                        seed=5)
        stats = ChannelStats(mean=[0.2, 0.3], std=[0.5, 0.4])
        save_model(net, stats, (1, 3, 5), tmp_path)
        loaded, lstats, labels = load_model(tmp_path)
        assert labels == (1, 3, 5)
        assert loaded.n_classes == 3
        assert loaded.input_shape == (16, 16, 32)
        for name in net.params:
            assert np.array_equal(loaded.params[name], net.params[name])
        assert np.allclose(lstats.mean, stats.mean)
        assert np.allclose(lstats.std, stats.std)

    def test_missing_checkpoint_is_io_failure(self, tmp_path):
        with pytest.raises(IOFailure):
            load_model(tmp_path / "nope")

    def test_corrupt_descriptor_rejected(self, tmp_path):
        net = MiniCNN3D(n_classes=2, in_channels=1)
        save_model(net, ChannelStats(mean=[0.1], std=[1.0]), (1, 2), tmp_path)
        desc = tmp_path / "model.json"
        desc.write_text("{not json")
        with pytest.raises(ValidationError, match="JSON"):
            load_model(tmp_path)

    def test_wrong_architecture_rejected(self, tmp_path):
        net = MiniCNN3D(n_classes=2, in_channels=1)
        save_model(net, ChannelStats(mean=[0.1], std=[1.0]), (1, 2), tmp_path)
        desc = tmp_path / "model.json"
        doc = desc.read_text().replace("minicnn3d", "resnet")
        desc.write_text(doc)
        with pytest.raises(ValidationError, match="architecture"):
            load_model(tmp_path)


class TestHistoryFile:
    def test_csv_roundtrip(self, tmp_path):
        rows = [
            {"epoch": 1, "train_acc": 0.5, "val_acc": 0.25, "loss": 1.25},
            {"epoch": 2, "train_acc": 0.75, "val_acc": 0.5, "loss": 0.5},
        ]
        path = tmp_path / "history.csv"
        write_history(path, rows)
        with open(path, newline="") as fh:
            got = list(csv.DictReader(fh))
        assert [r["epoch"] for r in got] == ["1", "2"]
        assert float(got[1]["val_acc"]) == 0.5
        assert "mean_gradcamo" not in got[0]
