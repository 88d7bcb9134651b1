"""Desk-scale supervised training over synthetic chord audio.

The loop is deliberately plain: masked cross-entropy per segment, batch
gradients averaged in a fixed order, global-norm clipping, Adam with
bias correction, and early stopping on validation loss. Everything is
seeded, single-threaded over optimizer state, and bit-reproducible.

Normalization statistics come from the training split only; validation
and test features reuse them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import chords
from . import features as ft
from . import metrics as mt
from . import model as md
from . import numerics as nm
from .numerics import STANDARD, Tape, Tensor

SKIP = chords.SKIP


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; training cannot continue."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 5
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "adam_eps", "batch_size", "max_epochs",
                     "patience", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")


@dataclass(frozen=True)
class ClipExample:
    """One clip: log-amplitude features (unnormalized) plus its labels."""

    name: str
    features: ft.FeatureMatrix
    annotation: chords.Annotation


@dataclass(frozen=True)
class TrainResult:
    params: md.ModelParams
    stats: ft.NormStats
    history: tuple
    best_epoch: int
    best_val_loss: float


def cross_entropy(logits, targets, mask=None):
    """Mean negative log-likelihood over non-SKIP frames.

    ``mask`` (True = frame counts) defaults to ``targets != SKIP`` and is
    intersected with it when given, so SKIP frames never contribute.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise nm.ShapeError(
            f"targets must be ({logits.shape[0]},), got {targets.shape}")
    keep = targets != SKIP
    if mask is not None:
        keep = keep & np.asarray(mask, dtype=bool)
    if not keep.any():
        raise ValueError("every frame is masked out; nothing to train on")
    live = targets[keep]
    if live.min() < 0 or live.max() >= logits.shape[1]:
        raise ValueError("target class out of range")
    safe = np.where(keep, targets, 0)
    picked = nm.masked_gather_mean(nm.log_softmax_rows(logits), safe, keep)
    return nm.mul(picked, -1.0)


@dataclass(frozen=True)
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(named):
    zeros = lambda: {name: np.zeros_like(arr) for name, arr in named.items()}
    return AdamState(zeros(), zeros(), 0)


def adam_step(named, grads, state, cfg):
    """One bias-corrected Adam update; returns (new params, new state)."""
    t = state.t + 1
    new_params = {}
    new_m = {}
    new_v = {}
    for name, param in named.items():
        g = grads[name]
        if g.shape != param.shape:
            raise nm.ShapeError(
                f"gradient for {name} has shape {g.shape}, parameter is {param.shape}")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        new_params[name] = param - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, t)


def clip_gradients(grads, max_norm):
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: g * np.asarray(scale, dtype=g.dtype) for name, g in grads.items()}, norm


def split_dataset(items, seed):
    """Deterministic 80/10/10 split at the clip level."""
    n = len(items)
    if n < 3:
        raise ValueError(f"need at least 3 clips to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(n * 0.1))
    n_test = max(1, int(n * 0.1))
    n_train = n - n_val - n_test
    train = [items[i] for i in order[:n_train]]
    val = [items[i] for i in order[n_train:n_train + n_val]]
    test = [items[i] for i in order[n_train + n_val:]]
    return train, val, test


def synth_clip_example(seed, vocab, duration_s=10.0):
    """One synthetic clip: progression, audio, log-amplitude features."""
    progression = ft.make_random_progression(seed, duration_s, vocab)
    clip = ft.synth_chord_clip(progression, seed=seed + 1_000_003)
    feats = ft.log_amplitude(ft.cqt(clip))
    return ClipExample(f"clip{seed:06d}", feats, progression)


def make_synthetic_corpus(n_clips, vocab, seed, duration_s=10.0):
    return [synth_clip_example(seed + i, vocab, duration_s) for i in range(n_clips)]


def clip_segments(example, vocab, stats):
    """Normalized fixed-length windows with aligned targets.

    Frames a window gains by zero padding get SKIP targets, so they are
    invisible to the loss and the accuracy counters.
    """
    normalized = ft.znormalize(example.features, stats)
    frames = normalized.frames
    full = np.asarray(chords.framewise_targets(example.annotation, frames, vocab),
                      dtype=np.int64)
    starts, window = ft.segment_starts(frames)
    out = []
    for piece, start in zip(ft.segment(normalized), starts):
        targets = np.full(window, SKIP, dtype=np.int64)
        take = min(window, frames - start)
        targets[:take] = full[start:start + take]
        out.append((piece.values.astype(np.float32), targets))
    return out


def build_dataset(examples, vocab, stats):
    segments = []
    for example in examples:
        segments.extend(clip_segments(example, vocab, stats))
    return segments


def _params_from_arrays(named, order):
    return md.params_from_dict({name: Tensor(named[name], dtype=STANDARD) for name in order})


def _loss_and_grads(named, order, model_cfg, feats, targets):
    # The scan rejects non-finite time steps with its own invariant error,
    # so screen step inputs here and report the failure as what it is.
    if not np.all(np.isfinite(feats)):
        raise TrainingDivergedError("non-finite feature values reached a training step")
    for name in order:
        if not np.all(np.isfinite(named[name])):
            raise TrainingDivergedError(f"parameter {name} became non-finite")
    tensors = {name: Tensor(named[name], dtype=STANDARD) for name in order}
    params = md.params_from_dict(tensors)
    with Tape() as tape:
        x = Tensor(feats, dtype=STANDARD)
        logits = md.forward(params, model_cfg, x, scan_impl="assoc")
        loss = cross_entropy(logits, targets)
    grads = tape.gradients(loss, [tensors[name] for name in order])
    return float(loss.data), {name: g.data for name, g in zip(order, grads)}


def _evaluate_split(named, order, model_cfg, segments):
    """(mean loss, framewise accuracy) over a list of segments, no tape."""
    params = _params_from_arrays(named, order)
    loss_sum = 0.0
    loss_n = 0
    correct = 0
    counted = 0
    for feats, targets in segments:
        keep = targets != SKIP
        if not keep.any():
            continue
        x = Tensor(feats, dtype=STANDARD)
        logits = md.forward(params, model_cfg, x, scan_impl="assoc")
        loss_sum += float(cross_entropy(logits, targets).data)
        loss_n += 1
        pred = np.argmax(logits.data, axis=1)
        correct += int((pred[keep] == targets[keep]).sum())
        counted += int(keep.sum())
    if loss_n == 0:
        raise ValueError("no scorable segments in the split")
    return loss_sum / loss_n, correct / counted


def train(model_cfg, train_cfg, train_clips, val_clips, vocab):
    """Mini-batch Adam on masked cross-entropy with early stopping.

    Returns the parameters of the best validation epoch; the history
    carries one record per epoch run.
    """
    if not train_clips or not val_clips:
        raise ValueError("train and validation splits must both be non-empty")
    stats = ft.compute_norm_stats([c.features for c in train_clips])
    train_segments = build_dataset(train_clips, vocab, stats)
    val_segments = build_dataset(val_clips, vocab, stats)

    params0 = md.init_model(model_cfg, dtype=STANDARD)
    order = [name for name, _ in params0.named_tensors()]
    named = {name: np.array(tensor.data) for name, tensor in params0.named_tensors()}
    state = adam_init(named)
    rng = np.random.default_rng(train_cfg.seed)

    best = {name: arr.copy() for name, arr in named.items()}
    best_val = math.inf
    best_epoch = 0
    bad_epochs = 0
    history = []
    for epoch in range(1, train_cfg.max_epochs + 1):
        perm = rng.permutation(len(train_segments))
        loss_sum = 0.0
        loss_n = 0
        for lo in range(0, len(perm), train_cfg.batch_size):
            batch = perm[lo:lo + train_cfg.batch_size]
            acc = {name: np.zeros_like(arr) for name, arr in named.items()}
            contributing = 0
            for index in batch:
                feats, targets = train_segments[index]
                if not (targets != SKIP).any():
                    continue
                loss_value, grads = _loss_and_grads(named, order, model_cfg, feats, targets)
                if not math.isfinite(loss_value):
                    raise TrainingDivergedError(
                        f"non-finite training loss at epoch {epoch}")
                for name in order:
                    acc[name] += grads[name]
                contributing += 1
                loss_sum += loss_value
                loss_n += 1
            if contributing == 0:
                continue
            mean_grads = {name: acc[name] / contributing for name in order}
            clipped, _ = clip_gradients(mean_grads, train_cfg.clip_norm)
            named, state = adam_step(named, clipped, state, train_cfg)

        val_loss, val_accuracy = _evaluate_split(named, order, model_cfg, val_segments)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.append({
            "epoch": epoch,
            "train_loss": loss_sum / max(loss_n, 1),
            "val_loss": val_loss,
            "val_accuracy": val_accuracy,
        })
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best = {name: arr.copy() for name, arr in named.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_cfg.patience:
                break

    return TrainResult(_params_from_arrays(best, order), stats, tuple(history),
                       best_epoch, best_val)


def overfit_segment(model_cfg, feats, targets, steps=500, train_cfg=None,
                    stop_below=None):
    """Repeated full-batch steps on one segment; returns (params, losses).

    A learnability probe: a working model/optimizer pair drives the loss
    toward zero. Stops early once the loss drops under ``stop_below``.
    """
    cfg = train_cfg or TrainConfig()
    params0 = md.init_model(model_cfg, dtype=STANDARD)
    order = [name for name, _ in params0.named_tensors()]
    named = {name: np.array(tensor.data) for name, tensor in params0.named_tensors()}
    state = adam_init(named)
    losses = []
    for _ in range(steps):
        loss_value, grads = _loss_and_grads(named, order, model_cfg, feats, targets)
        if not math.isfinite(loss_value):
            raise TrainingDivergedError("non-finite loss during overfit probe")
        losses.append(loss_value)
        clipped, _ = clip_gradients(grads, cfg.clip_norm)
        named, state = adam_step(named, clipped, state, cfg)
        if stop_below is not None and loss_value < stop_below:
            break
    return _params_from_arrays(named, order), losses


def predict_classes(params, model_cfg, stats, feats, scan_impl="assoc"):
    """Framewise class ids for one clip's unnormalized log features.

    Windows are predicted independently; on overlap, later windows win.
    """
    normalized = ft.znormalize(feats, stats)
    frames = normalized.frames
    starts, window = ft.segment_starts(frames)
    out = np.zeros(frames, dtype=np.int64)
    for piece, start in zip(ft.segment(normalized), starts):
        x = Tensor(piece.values.astype(np.float32), dtype=STANDARD)
        pred = md.predict(params, model_cfg, x, scan_impl=scan_impl)
        take = min(window, frames - start)
        out[start:start + take] = pred[:take]
    return out


def predict_annotation(params, model_cfg, stats, feats, vocab, scan_impl="assoc"):
    classes = predict_classes(params, model_cfg, stats, feats, scan_impl=scan_impl)
    return mt.frames_to_annotation(classes, vocab)
