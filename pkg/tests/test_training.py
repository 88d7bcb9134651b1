"""Training loop tests: loss oracles, optimizer algebra, determinism."""

import math

import numpy as np
import pytest

from bmace import chords
from bmace import features as ft
from bmace import gradcheck as gc
from bmace import model as md
from bmace import numerics as nm
from bmace import training as tr
from bmace.numerics import HIGH, STANDARD, Tape, Tensor

SKIP = chords.SKIP


def tiny_config(variant=md.MACE_V, n_classes=25, seed=0):
    return md.ModelConfig(variant=variant, n_classes=n_classes, d_model=8,
                          n_state=2, dt_rank=2, conv_k=2, expand=1, seed=seed)


class TestTrainConfig:
    def test_defaults_valid(self):
        cfg = tr.TrainConfig()
        assert cfg.learning_rate == 1e-3
        assert cfg.patience == 5
        assert cfg.clip_norm == 5.0

    def test_rejects_nonpositive_rate(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(learning_rate=0.0)

    def test_rejects_bad_betas(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(beta1=1.0)
        with pytest.raises(ValueError):
            tr.TrainConfig(beta2=0.0)

    def test_rejects_nonpositive_patience(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(patience=0)


class TestCrossEntropy:
    def test_uniform_logits_give_log_n_classes(self):
        logits = Tensor(np.zeros((7, 25)))
        targets = np.arange(7) % 25
        loss = tr.cross_entropy(logits, targets)
        assert abs(loss.data - math.log(25)) < 1e-12

    def test_confident_logits_give_near_zero(self):
        targets = np.array([3, 1, 0, 2])
        logits_arr = np.zeros((4, 4))
        logits_arr[np.arange(4), targets] = 30.0
        loss = tr.cross_entropy(Tensor(logits_arr), targets)
        assert loss.data < 1e-9

    def test_two_frame_value(self):
        # Row 0: softmax([0, ln 3]) puts 3/4 on class 1. Row 1 is uniform.
        logits = Tensor(np.array([[0.0, math.log(3.0)], [0.0, 0.0]]))
        loss = tr.cross_entropy(logits, np.array([1, 0]))
        expected = 0.5 * (-math.log(0.75) - math.log(0.5))
        assert abs(loss.data - expected) < 1e-12

    def test_all_skip_rejected(self):
        logits = Tensor(np.zeros((3, 4)))
        with pytest.raises(ValueError):
            tr.cross_entropy(logits, np.array([SKIP, SKIP, SKIP]))

    def test_out_of_range_target_rejected(self):
        logits = Tensor(np.zeros((2, 4)))
        with pytest.raises(ValueError):
            tr.cross_entropy(logits, np.array([0, 4]))

    def test_skip_frames_do_not_touch_the_loss(self):
        rng = np.random.default_rng(0)
        base = rng.standard_normal((4, 3))
        targets = np.array([0, SKIP, 2, SKIP])
        bumped = base.copy()
        bumped[1] += 0.37
        bumped[3] -= 1.25
        a = tr.cross_entropy(Tensor(base), targets)
        b = tr.cross_entropy(Tensor(bumped), targets)
        assert a.data == b.data

    def test_skip_frames_get_exactly_zero_gradient(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.standard_normal((4, 3)))
        targets = np.array([0, SKIP, 2, SKIP])
        with Tape() as tape:
            loss = tr.cross_entropy(logits, targets)
        (g,) = tape.gradients(loss, [logits])
        assert np.all(g.data[[1, 3]] == 0.0)
        assert np.any(g.data[[0, 2]] != 0.0)

    def test_explicit_mask_intersects_skip_mask(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.standard_normal((3, 4)))
        targets = np.array([1, SKIP, 2])
        only_last = tr.cross_entropy(logits, targets, mask=np.array([False, True, True]))
        direct = tr.cross_entropy(nm.slice_cols(logits, 0, 4), np.array([SKIP, SKIP, 2]))
        assert abs(only_last.data - direct.data) < 1e-15

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.standard_normal((5, 4)), dtype=HIGH)
        targets = np.array([0, 3, SKIP, 1, 2])

        def loss(ps):
            return tr.cross_entropy(ps[0], targets)

        assert gc.check_gradients(loss, [logits]) < gc.REL_TOLERANCE


class TestAdam:
    def test_zero_gradients_leave_params_bitwise_unchanged(self):
        named = {"w": np.array([1.0, -2.0, 3.5])}
        state = tr.adam_init(named)
        grads = {"w": np.zeros(3)}
        new, state = tr.adam_step(named, grads, state, tr.TrainConfig())
        assert np.array_equal(new["w"], named["w"])
        assert state.t == 1

    def test_first_step_moves_by_learning_rate_times_sign(self):
        cfg = tr.TrainConfig(learning_rate=1e-2)
        named = {"w": np.array([0.0, 0.0])}
        grads = {"w": np.array([0.5, -0.25])}
        new, _ = tr.adam_step(named, grads, tr.adam_init(named), cfg)
        # Bias correction makes m_hat = g and v_hat = g*g, so the update is
        # lr * g / (|g| + eps), within eps of lr * sign(g).
        assert np.allclose(new["w"], [-1e-2, 1e-2], atol=1e-9)

    def test_tensors_update_independently(self):
        named = {"a": np.array([1.0]), "b": np.array([2.0])}
        grads = {"a": np.array([0.3]), "b": np.array([0.0])}
        new, _ = tr.adam_step(named, grads, tr.adam_init(named), tr.TrainConfig())
        assert new["a"][0] != named["a"][0]
        assert new["b"][0] == named["b"][0]

    def test_shape_mismatch_rejected(self):
        named = {"w": np.zeros((2, 2))}
        grads = {"w": np.zeros(4)}
        with pytest.raises(nm.ShapeError):
            tr.adam_step(named, grads, tr.adam_init(named), tr.TrainConfig())

    def test_deterministic_across_runs(self):
        rng = np.random.default_rng(4)
        named = {"w": rng.standard_normal((3, 2))}
        grads = {"w": rng.standard_normal((3, 2))}

        def run():
            p, s = dict(named), tr.adam_init(named)
            for _ in range(5):
                p, s = tr.adam_step(p, grads, s, tr.TrainConfig())
            return p["w"]

        assert np.array_equal(run(), run())


class TestClipGradients:
    def test_small_gradients_pass_through(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([0.0, 4.0])}
        clipped, norm = tr.clip_gradients(grads, 5.0)
        assert norm == 5.0
        assert np.array_equal(clipped["a"], grads["a"])
        assert np.array_equal(clipped["b"], grads["b"])

    def test_large_gradients_scaled_to_max_norm(self):
        grads = {"a": np.array([6.0, 0.0]), "b": np.array([0.0, 8.0])}
        clipped, norm = tr.clip_gradients(grads, 5.0)
        assert norm == 10.0
        total = sum(float(np.sum(g ** 2)) for g in clipped.values())
        assert abs(math.sqrt(total) - 5.0) < 1e-12

    def test_zero_gradients_survive(self):
        grads = {"a": np.zeros(3)}
        clipped, norm = tr.clip_gradients(grads, 5.0)
        assert norm == 0.0
        assert np.array_equal(clipped["a"], np.zeros(3))


class TestSplitDataset:
    def test_ten_items_split_eight_one_one(self):
        train, val, test = tr.split_dataset(list(range(10)), seed=0)
        assert (len(train), len(val), len(test)) == (8, 1, 1)

    def test_partition_is_exact(self):
        items = [object() for _ in range(23)]
        train, val, test = tr.split_dataset(items, seed=5)
        seen = [id(x) for x in train + val + test]
        assert sorted(seen) == sorted(id(x) for x in items)
        assert len(set(seen)) == len(items)

    def test_same_seed_same_split(self):
        items = list(range(12))
        assert tr.split_dataset(items, seed=7) == tr.split_dataset(items, seed=7)

    def test_different_seed_usually_differs(self):
        items = list(range(40))
        a = tr.split_dataset(items, seed=0)
        b = tr.split_dataset(items, seed=1)
        assert a != b

    def test_too_few_items_rejected(self):
        with pytest.raises(ValueError):
            tr.split_dataset([1, 2], seed=0)


class TestClipSegments:
    def test_exact_window_clip_has_no_padding(self):
        example = tr.synth_clip_example(11, chords.MAJMIN_25, duration_s=10.0)
        stats = ft.compute_norm_stats([example.features])
        segments = tr.clip_segments(example, chords.MAJMIN_25, stats)
        assert len(segments) == 1
        feats, targets = segments[0]
        assert feats.shape == (108, 144)
        expected = chords.framewise_targets(example.annotation, 108, chords.MAJMIN_25)
        assert np.array_equal(targets, expected)
        assert not np.any(targets == SKIP) or np.array_equal(targets, expected)

    def test_short_clip_pads_targets_with_skip(self):
        example = tr.synth_clip_example(12, chords.MAJMIN_25, duration_s=3.0)
        stats = ft.compute_norm_stats([example.features])
        (feats, targets), = tr.clip_segments(example, chords.MAJMIN_25, stats)
        real = example.features.frames
        assert real < 108
        assert np.all(targets[real:] == SKIP)
        expected = chords.framewise_targets(example.annotation, real, chords.MAJMIN_25)
        assert np.array_equal(targets[:real], expected)

    def test_long_clip_windows_align_with_full_targets(self):
        example = tr.synth_clip_example(13, chords.MAJMIN_25, duration_s=15.0)
        stats = ft.compute_norm_stats([example.features])
        segments = tr.clip_segments(example, chords.MAJMIN_25, stats)
        frames = example.features.frames
        full = np.asarray(chords.framewise_targets(example.annotation, frames,
                                                   chords.MAJMIN_25))
        starts, window = ft.segment_starts(frames)
        assert len(segments) == len(starts)
        for (feats, targets), start in zip(segments, starts):
            take = min(window, frames - start)
            assert np.array_equal(targets[:take], full[start:start + take])

    def test_features_are_normalized_float32(self):
        example = tr.synth_clip_example(14, chords.MAJMIN_25, duration_s=4.0)
        stats = ft.compute_norm_stats([example.features])
        (feats, _), = tr.clip_segments(example, chords.MAJMIN_25, stats)
        assert feats.dtype == np.float32


class TestCorpus:
    def test_corpus_is_deterministic(self):
        a = tr.make_synthetic_corpus(2, chords.MAJMIN_25, seed=9, duration_s=2.0)
        b = tr.make_synthetic_corpus(2, chords.MAJMIN_25, seed=9, duration_s=2.0)
        for x, y in zip(a, b):
            assert x.name == y.name
            assert np.array_equal(x.features.values, y.features.values)
            assert x.annotation.intervals == y.annotation.intervals

    def test_clip_names_are_unique(self):
        corpus = tr.make_synthetic_corpus(3, chords.MAJMIN_25, seed=0, duration_s=2.0)
        names = [c.name for c in corpus]
        assert len(set(names)) == 3


class TestTrainLoop:
    def make_corpus(self):
        return tr.make_synthetic_corpus(5, chords.MAJMIN_25, seed=3, duration_s=2.0)

    def test_smoke_run_and_history(self):
        corpus = self.make_corpus()
        cfg = tiny_config()
        tcfg = tr.TrainConfig(max_epochs=3, batch_size=2, seed=0)
        result = tr.train(cfg, tcfg, corpus[:4], corpus[4:], chords.MAJMIN_25)
        assert 1 <= len(result.history) <= 3
        assert result.best_val_loss == min(h["val_loss"] for h in result.history)
        assert result.history[0]["epoch"] == 1
        for record in result.history:
            assert math.isfinite(record["train_loss"])
            assert 0.0 <= record["val_accuracy"] <= 1.0
        for _, tensor in result.params.named_tensors():
            assert np.all(np.isfinite(tensor.data))

    def test_two_runs_are_bit_identical(self):
        corpus = self.make_corpus()
        cfg = tiny_config()
        tcfg = tr.TrainConfig(max_epochs=2, batch_size=2, seed=1)

        def run():
            return tr.train(cfg, tcfg, corpus[:4], corpus[4:], chords.MAJMIN_25)

        a, b = run(), run()
        assert a.history == b.history
        for (name_a, ta), (name_b, tb) in zip(a.params.named_tensors(),
                                              b.params.named_tensors()):
            assert name_a == name_b
            assert np.array_equal(ta.data, tb.data)

    def test_empty_split_rejected(self):
        corpus = self.make_corpus()
        with pytest.raises(ValueError):
            tr.train(tiny_config(), tr.TrainConfig(), [], corpus[:1], chords.MAJMIN_25)


class TestOverfit:
    def test_loss_decreases_on_one_segment(self):
        rng = np.random.default_rng(6)
        feats = rng.standard_normal((20, 144)).astype(np.float32)
        targets = rng.integers(0, 3, size=20)
        cfg = tiny_config(n_classes=3)
        tcfg = tr.TrainConfig(learning_rate=1e-2)
        _, losses = tr.overfit_segment(cfg, feats, targets, steps=150, train_cfg=tcfg)
        assert losses[-1] < 0.5 * losses[0]
        assert losses[-1] < 0.5

    def test_stop_below_halts_early(self):
        rng = np.random.default_rng(7)
        feats = rng.standard_normal((10, 144)).astype(np.float32)
        targets = rng.integers(0, 3, size=10)
        cfg = tiny_config(n_classes=3)
        _, losses = tr.overfit_segment(cfg, feats, targets, steps=50, stop_below=100.0)
        assert len(losses) == 1

    def test_nan_features_raise_diverged(self):
        feats = np.full((8, 144), np.nan, dtype=np.float32)
        targets = np.zeros(8, dtype=np.int64)
        with pytest.raises(tr.TrainingDivergedError):
            tr.overfit_segment(tiny_config(n_classes=3), feats, targets, steps=3)


class TestPrediction:
    def test_predict_classes_covers_every_frame(self):
        example = tr.synth_clip_example(20, chords.MAJMIN_25, duration_s=15.0)
        stats = ft.compute_norm_stats([example.features])
        cfg = tiny_config()
        params = md.init_model(cfg, dtype=STANDARD)
        classes = tr.predict_classes(params, cfg, stats, example.features)
        assert classes.shape == (example.features.frames,)
        assert classes.min() >= 0
        assert classes.max() < 25

    def test_predict_annotation_spans_the_clip(self):
        example = tr.synth_clip_example(21, chords.MAJMIN_25, duration_s=4.0)
        stats = ft.compute_norm_stats([example.features])
        cfg = tiny_config()
        params = md.init_model(cfg, dtype=STANDARD)
        annotation = tr.predict_annotation(params, cfg, stats, example.features,
                                           chords.MAJMIN_25)
        frames = example.features.frames
        assert abs(annotation.duration - frames * 2048 / 22050) < 1e-9
