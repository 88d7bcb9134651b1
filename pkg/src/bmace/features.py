"""Audio ingestion and the feature pipeline feeding the chord models.

The chain is: WAV in, constant-Q magnitude spectrogram (144 bins, 24 per
octave from C1, hop 2048 at 22,050 Hz), log amplitude, global scalar
z-normalization with statistics pooled over the training set, and
10-second windows with 5-second overlap.

The module also synthesizes deterministic chord audio so the models can
be trained and scored at desk scale without any external corpus: each
chord is an additive stack of its pitch classes in octaves 3 and 4 with
four harmonics, cosine cross-fades at boundaries, and a -40 dB noise
floor.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import chords, tensorio

SAMPLE_RATE = 22050
HOP = 2048
N_BINS = 144
BINS_PER_OCTAVE = 24
FMIN = 32.7032
LOG_EPS = 1e-6
SEGMENT_SECONDS = 10.0
OVERLAP_SECONDS = 5.0

FADE_SECONDS = 0.010
# Noise sits 40 dB under the 0.5 synthesis peak: 0.5 * 10**(-40/20).
NOISE_STD = 0.005


class WavFormatError(ValueError):
    """Unreadable WAV container; ``offset`` is the offending byte."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedRateError(ValueError):
    """Sample rate other than the canonical 22,050 Hz."""


@dataclass(frozen=True)
class AudioClip:
    """Mono audio: float samples in [-1, 1] at a fixed rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeatureMatrix:
    """Frames-by-bins feature values plus the transform geometry."""

    values: np.ndarray
    hop: int = HOP
    fmin: float = FMIN
    bins_per_octave: int = BINS_PER_OCTAVE

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != N_BINS:
            raise ValueError(f"expected (frames, {N_BINS}) values, got {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("need at least one frame")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def frames(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class NormStats:
    """Scalar mean and variance pooled over every training cell."""

    mean: float
    variance: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.variance)):
            raise ValueError("statistics must be finite")
        if self.variance <= 0:
            raise ValueError(f"variance must be positive, got {self.variance}")

    def to_dict(self):
        return {"mean": self.mean, "variance": self.variance}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["mean"]), float(d["variance"]))


def read_wav(path):
    """Decode a RIFF/WAVE file (PCM16 or float32, mono or stereo).

    Stereo is averaged to mono. Rates other than 22,050 Hz are rejected;
    resampling is out of scope.
    """
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise WavFormatError("file too short for a RIFF header", 0)
    if data[0:4] != b"RIFF":
        raise WavFormatError(f"bad magic {data[0:4]!r}", 0)
    if data[8:12] != b"WAVE":
        raise WavFormatError(f"bad form type {data[8:12]!r}", 8)

    fmt = None
    raw = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError("truncated chunk", pos)
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError("fmt chunk too short", pos)
            fmt = struct.unpack_from("<HHIIHH", body, 0) + (pos,)
        elif chunk_id == b"data":
            raw = (body, pos)
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise WavFormatError("missing fmt chunk", len(data))
    if raw is None:
        raise WavFormatError("missing data chunk", len(data))
    audio_format, n_channels, rate, _, _, bits, fmt_pos = fmt
    body, _ = raw
    if n_channels < 1:
        raise WavFormatError("zero channels", fmt_pos)

    if audio_format == 1:
        if bits != 16:
            raise WavFormatError(f"unsupported PCM depth {bits}", fmt_pos)
        frame_bytes = 2 * n_channels
        usable = len(body) - len(body) % frame_bytes
        x = np.frombuffer(body[:usable], dtype="<i2").astype(np.float64) / 32767.0
    elif audio_format == 3:
        if bits != 32:
            raise WavFormatError(f"unsupported float depth {bits}", fmt_pos)
        frame_bytes = 4 * n_channels
        usable = len(body) - len(body) % frame_bytes
        x = np.frombuffer(body[:usable], dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(f"unsupported audio format {audio_format}", fmt_pos)

    if n_channels > 1:
        x = x.reshape(-1, n_channels).mean(axis=1)
    if rate != SAMPLE_RATE:
        raise UnsupportedRateError(f"sample rate {rate} unsupported, expected {SAMPLE_RATE}")
    return AudioClip(np.clip(x, -1.0, 1.0), int(rate))


def write_wav(path, clip):
    """Write a clip as mono PCM16."""
    q = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(q.tobytes())


def n_frames(n_samples):
    """Frame-count law: one frame per full hop, plus the frame at 0."""
    return n_samples // HOP + 1


_PLAN_CACHE = {}


def _cqt_plan(n_samples):
    """Per-bin complex kernels and the reflection pad for one clip length."""
    plan = _PLAN_CACHE.get(n_samples)
    if plan is not None:
        return plan
    q = 1.0 / (2.0 ** (1.0 / BINS_PER_OCTAVE) - 1.0)
    kernels = []
    for b in range(N_BINS):
        freq = FMIN * 2.0 ** (b / BINS_PER_OCTAVE)
        n_b = min(math.ceil(q * SAMPLE_RATE / freq), n_samples)
        window = np.hanning(n_b) if n_b > 1 else np.ones(1)
        phase = np.exp(-2j * np.pi * freq / SAMPLE_RATE * np.arange(n_b))
        kernels.append((window * phase / n_b, n_b))
    pad = max(n_b for _, n_b in kernels) // 2 + 1
    plan = (kernels, pad)
    if len(_PLAN_CACHE) < 64:
        _PLAN_CACHE[n_samples] = plan
    return plan


def cqt(clip):
    """Magnitude constant-Q transform, frames centered at t*hop.

    Bin b has center frequency fmin * 2**(b/24) and window length
    min(ceil(Q*sr/f_b), len) under a Hann window, normalized by the
    window length. The signal is reflection-padded so every frame
    center has a full window.
    """
    if clip.samples.size < 1:
        raise ValueError("cannot transform an empty clip")
    if clip.sample_rate != SAMPLE_RATE:
        raise UnsupportedRateError(f"sample rate {clip.sample_rate} unsupported, expected {SAMPLE_RATE}")
    x = clip.samples
    kernels, pad = _cqt_plan(x.size)
    padded = np.pad(x, pad, mode="reflect")
    frames = n_frames(x.size)
    centers = np.arange(frames) * HOP + pad
    out = np.empty((frames, N_BINS))
    for b, (kernel, n_b) in enumerate(kernels):
        starts = centers - n_b // 2
        windows = np.lib.stride_tricks.sliding_window_view(padded, n_b)[starts]
        out[:, b] = np.abs(windows @ kernel)
    return FeatureMatrix(out)


def log_amplitude(f, eps=LOG_EPS):
    """Elementwise ln(S + eps)."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if f.values.min() < 0:
        raise ValueError("log amplitude expects nonnegative magnitudes")
    return FeatureMatrix(np.log(f.values + eps), f.hop, f.fmin, f.bins_per_octave)


def compute_norm_stats(features):
    """Pool every cell of every matrix into one scalar mean/variance."""
    if not features:
        raise ValueError("need at least one feature matrix")
    pool = np.concatenate([f.values.ravel() for f in features])
    variance = float(pool.var())
    if variance <= 0:
        raise ValueError("pooled variance is zero; cannot normalize")
    return NormStats(float(pool.mean()), variance)


def znormalize(f, stats):
    """(F - mean) / sqrt(variance) with the pooled scalar statistics."""
    vals = (f.values - stats.mean) / math.sqrt(stats.variance)
    return FeatureMatrix(vals, f.hop, f.fmin, f.bins_per_octave)


def segment_starts(frames, clip_len_s=SEGMENT_SECONDS, overlap_s=OVERLAP_SECONDS):
    """Window start frames and the window length, in frames.

    Windows are emitted while start + window <= frames; a clip shorter
    than one window yields the single start 0 (callers zero-pad).
    """
    window = n_frames(int(clip_len_s * SAMPLE_RATE))
    overlap = n_frames(int(overlap_s * SAMPLE_RATE))
    stride = window - overlap
    if stride <= 0:
        raise ValueError("overlap must be shorter than the window")
    starts = list(range(0, frames - window + 1, stride))
    if not starts:
        starts = [0]
    return starts, window


def segment(f, clip_len_s=SEGMENT_SECONDS, overlap_s=OVERLAP_SECONDS):
    """Slice a feature matrix into fixed windows (zero-padding short clips)."""
    starts, window = segment_starts(f.frames, clip_len_s, overlap_s)
    out = []
    for start in starts:
        if start + window <= f.frames:
            vals = f.values[start:start + window]
        else:
            vals = np.zeros((window, f.values.shape[1]))
            vals[:f.frames - start] = f.values[start:]
        out.append(FeatureMatrix(vals, f.hop, f.fmin, f.bins_per_octave))
    return out


def synth_chord_clip(progression, sr=SAMPLE_RATE, seed=0):
    """Render a contiguous chord progression as deterministic audio.

    Each chord sums sines at its pitch classes in octaves 3 and 4 with
    four harmonics at amplitude 1/h and seeded random phases, shaped by
    10 ms cosine fades at interval boundaries. The mix is peak-normalized
    to 0.5 and white noise 40 dB down is added. No-chord intervals stay
    silent apart from the noise floor.
    """
    intervals = progression.intervals
    if not intervals:
        raise ValueError("empty progression")
    if abs(intervals[0][0]) > 1e-9:
        raise ValueError("progression must start at time 0")
    for (_, prev_end, _), (start, _, _) in zip(intervals, intervals[1:]):
        if abs(start - prev_end) > 1e-9:
            raise ValueError("progression intervals must be contiguous")

    rng = np.random.default_rng(seed)
    total = int(round(intervals[-1][1] * sr))
    fade = int(round(FADE_SECONDS * sr))
    signal = np.zeros(total)
    for start_s, end_s, label in intervals:
        if label.is_unknown:
            raise ValueError("cannot synthesize an unknown label")
        n0 = min(int(round(start_s * sr)), total)
        n1 = min(int(round(end_s * sr)), total)
        if n1 <= n0:
            continue
        pcs = sorted(label.pitch_classes())
        if not pcs:
            continue
        t = np.arange(n0, n1) / sr
        seg = np.zeros(n1 - n0)
        for pc in pcs:
            for octave in (3, 4):
                base = FMIN * 2.0 ** (octave - 1) * 2.0 ** (pc / 12.0)
                for harmonic in range(1, 5):
                    phase = rng.uniform(0.0, 2.0 * np.pi)
                    seg += np.sin(2.0 * np.pi * base * harmonic * t + phase) / harmonic
        envelope = np.ones(n1 - n0)
        if fade > 0:
            m = min(fade, n1 - n0)
            ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(m) / fade))
            envelope[:m] *= ramp
            envelope[-m:] *= ramp[::-1]
        signal[n0:n1] = seg * envelope

    peak = np.abs(signal).max()
    if peak > 0:
        signal *= 0.5 / peak
    signal += rng.normal(0.0, NOISE_STD, total)
    return AudioClip(signal, sr)


def make_random_progression(seed, duration_s=10.0, vocab=None, no_chord_prob=0.08,
                            min_chord_s=1.0, max_chord_s=2.5):
    """Seeded random chord progression covering [0, duration_s]."""
    vocab = vocab or chords.MAJMIN_25
    n_real = 24 if vocab.name == "majmin" else 168
    rng = np.random.default_rng(seed)
    out = []
    t = 0.0
    while t < duration_s - 1e-9:
        end = min(t + rng.uniform(min_chord_s, max_chord_s), duration_s)
        if rng.uniform() < no_chord_prob:
            label = chords.ChordLabel.no_chord()
        else:
            label = chords.parse_chord(chords.class_to_label(int(rng.integers(n_real)), vocab))
        out.append((t, end, label))
        t = end
    return chords.Annotation(tuple(out))


def save_features(path, features, meta=None):
    """Cache feature matrices in the shared tensor-blob container."""
    arrays = [(f"features/{i:05d}", f.values.astype(np.float32)) for i, f in enumerate(features)]
    record = dict(meta or {})
    record.update({"count": len(features), "hop": HOP, "fmin": FMIN,
                   "bins_per_octave": BINS_PER_OCTAVE})
    return tensorio.write_tensors(path, tensorio.FEATURES_FORMAT, record, arrays)


def load_features(path):
    """Read a feature cache back as (meta, list of FeatureMatrix)."""
    _, meta, arrays = tensorio.read_tensors(path, expect_format=tensorio.FEATURES_FORMAT)
    count = int(meta["count"])
    feats = [FeatureMatrix(np.asarray(arrays[f"features/{i:05d}"], dtype=np.float64))
             for i in range(count)]
    return meta, feats
