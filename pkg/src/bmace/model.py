"""Chord-estimation model variants built from selective-state-space blocks.

All three variants share the trunk: an input projection maps each CQT frame
(144 log-magnitude bins) to d_model features, exactly two Mamba blocks do the
sequence modelling, and a linear head emits per-frame class logits.

  mace-v  the two blocks run forward in time, stacked in sequence, each with
          a residual connection; the head reads d_model features.
  mace-h  the two blocks run forward in time, side by side on the same
          input, each with a residual; their outputs are concatenated, so
          the head reads 2*d_model features.
  bmace   like mace-h, but the second block runs backward in time, giving
          the head a view of both past and future context at every frame.

FLOP accounting convention: a multiply-accumulate costs 2, plain elementwise
ops cost 1, and exp/sigmoid/ln/sqrt cost 8 each. Time reversal and
concatenation are data movement (0). A = -exp(A_log) depends only on
parameters and is counted as parameter preprocessing (0), which keeps the
count exactly linear in sequence length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .mamba import (
    BACKWARD,
    FORWARD,
    MambaBlockParams,
    OpCounter,
    mamba_block,
)
from .numerics import (
    HIGH,
    STANDARD,
    ShapeError,
    Tensor,
    add,
    add_bias,
    concat_features,
    matmul,
)

MACE_V = "mace-v"
MACE_H = "mace-h"
BMACE = "bmace"
VARIANTS = (MACE_V, MACE_H, BMACE)

N_BINS = 144


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    n_classes: int
    d_model: int = 128
    n_state: int = 16
    dt_rank: int = 8
    conv_k: int = 4
    expand: int = 1
    n_bins: int = N_BINS
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.n_bins != N_BINS:
            raise ValueError(f"n_bins is fixed at {N_BINS}, got {self.n_bins}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be at least 2, got {self.n_classes}")
        for field in ("d_model", "n_state", "dt_rank", "conv_k", "expand"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive, got {getattr(self, field)}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def head_in(self) -> int:
        return self.d_model if self.variant == MACE_V else 2 * self.d_model

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "n_classes": self.n_classes,
            "d_model": self.d_model, "n_state": self.n_state,
            "dt_rank": self.dt_rank, "conv_k": self.conv_k,
            "expand": self.expand, "n_bins": self.n_bins, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in ("variant", "n_classes", "d_model", "n_state",
                                        "dt_rank", "conv_k", "expand", "n_bins", "seed")})


@dataclass
class ModelParams:
    fc_in: Tensor
    fc_bias: Tensor
    block_a: MambaBlockParams
    block_b: MambaBlockParams
    head: Tensor
    head_bias: Tensor

    def named_tensors(self):
        yield "fc_in", self.fc_in
        yield "fc_bias", self.fc_bias
        yield from self.block_a.named_tensors("block_a.")
        yield from self.block_b.named_tensors("block_b.")
        yield "head", self.head
        yield "head_bias", self.head_bias

    def n_params(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    def astype(self, dtype) -> "ModelParams":
        return self.map_arrays(lambda name, a: a.astype(dtype))

    def map_arrays(self, fn) -> "ModelParams":
        """Rebuild with fn(name, ndarray) applied to every tensor."""
        new = {name: Tensor(fn(name, t.data), dtype=None) for name, t in self.named_tensors()}
        return params_from_dict(new)

    def swap_blocks(self) -> "ModelParams":
        """Exchange the two blocks and the matching halves of the head rows."""
        d_head = self.head.shape[0]
        half = d_head // 2
        if 2 * half != d_head:
            raise ShapeError("swap_blocks needs a concatenated (two-block) head")
        swapped_head = np.concatenate([self.head.data[half:], self.head.data[:half]], axis=0)
        return ModelParams(fc_in=self.fc_in, fc_bias=self.fc_bias,
                           block_a=self.block_b, block_b=self.block_a,
                           head=Tensor(swapped_head, dtype=self.head.dtype),
                           head_bias=self.head_bias)


def params_from_dict(tensors: dict[str, Tensor]) -> ModelParams:
    def block(prefix: str) -> MambaBlockParams:
        fields = {}
        for key in ("in_proj", "conv_w", "conv_b", "x_proj", "dt_proj", "dt_bias",
                    "A_log", "D", "out_proj", "norm_gain"):
            fields[key] = tensors[prefix + key]
        for key in ("in_bias", "out_bias"):
            if prefix + key in tensors:
                fields[key] = tensors[prefix + key]
        return MambaBlockParams(**fields)

    return ModelParams(
        fc_in=tensors["fc_in"], fc_bias=tensors["fc_bias"],
        block_a=block("block_a."), block_b=block("block_b."),
        head=tensors["head"], head_bias=tensors["head_bias"],
    )


# --------------------------------------------------------------------------
# Initialization

def _init_block(rng: np.random.Generator, cfg: ModelConfig) -> MambaBlockParams:
    d, e, n, r, k = cfg.d_model, cfg.d_inner, cfg.n_state, cfg.dt_rank, cfg.conv_k

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape))

    in_proj = uniform((d, 2 * e), d)
    conv_w = uniform((e, k), k)
    conv_b = uniform((e,), k)
    x_proj = uniform((e, r + 2 * n), e)
    dt_proj = uniform((r, e), r)
    # Step sizes start log-uniform in [0.001, 0.1]; dt_bias is the softplus
    # preimage so softplus(dt_bias) lands exactly there.
    dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=e))
    dt_bias = Tensor(dt + np.log(-np.expm1(-dt)))
    a_log = Tensor(np.log(np.tile(np.arange(1.0, n + 1.0), (e, 1))))
    d_skip = Tensor(np.ones(e))
    out_proj = uniform((e, d), e)
    norm_gain = Tensor(np.ones(d))
    return MambaBlockParams(in_proj=in_proj, conv_w=conv_w, conv_b=conv_b,
                            x_proj=x_proj, dt_proj=dt_proj, dt_bias=dt_bias,
                            A_log=a_log, D=d_skip, out_proj=out_proj,
                            norm_gain=norm_gain)


def init_model(cfg: ModelConfig, dtype=STANDARD) -> ModelParams:
    """Seeded initialization; the same seed always gives bit-identical params.

    Weights and biases draw from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    Exceptions: A_log[c,j] = ln(j+1), dt_bias is the softplus preimage of a
    log-uniform step size in [0.001, 0.1], and D and norm gains start at one.
    Draw order: fc_in, fc_bias, block_a fields, block_b fields, head,
    head_bias. Draws happen in float64 and are then cast.
    """
    rng = np.random.default_rng(cfg.seed)

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape))

    params = ModelParams(
        fc_in=uniform((cfg.n_bins, cfg.d_model), cfg.n_bins),
        fc_bias=uniform((cfg.d_model,), cfg.n_bins),
        block_a=_init_block(rng, cfg),
        block_b=_init_block(rng, cfg),
        head=uniform((cfg.head_in, cfg.n_classes), cfg.head_in),
        head_bias=uniform((cfg.n_classes,), cfg.head_in),
    )
    return params if dtype == HIGH else params.astype(dtype)


# --------------------------------------------------------------------------
# Forward

def forward(params: ModelParams, cfg: ModelConfig, x: Tensor,
            scan_impl: str = "assoc", counter: OpCounter | None = None,
            force_forward: bool = False) -> Tensor:
    """Per-frame class logits for one (L, n_bins) feature segment.

    force_forward runs bmace's second block forward in time instead of
    backward (an ablation hook: it makes bmace coincide with mace-h).
    """
    if x.data.ndim != 2 or x.shape[1] != cfg.n_bins:
        raise ShapeError(f"input must be (L, {cfg.n_bins}), got {x.shape}")
    h0 = add_bias(matmul(x, params.fc_in), params.fc_bias)

    def run(block, src, direction):
        return add(src, mamba_block(src, block, direction=direction,
                                    scan_impl=scan_impl, counter=counter))

    if cfg.variant == MACE_V:
        h1 = run(params.block_a, h0, FORWARD)
        h2 = run(params.block_b, h1, FORWARD)
        feats = h2
    elif cfg.variant == MACE_H:
        feats = concat_features(run(params.block_a, h0, FORWARD),
                                run(params.block_b, h0, FORWARD))
    else:  # bmace
        second = FORWARD if force_forward else BACKWARD
        feats = concat_features(run(params.block_a, h0, FORWARD),
                                run(params.block_b, h0, second))
    return add_bias(matmul(feats, params.head), params.head_bias)


def predict(params: ModelParams, cfg: ModelConfig, x: Tensor,
            scan_impl: str = "assoc") -> np.ndarray:
    """Per-frame argmax class ids (ties resolve to the smaller id)."""
    logits = forward(params, cfg, x, scan_impl=scan_impl)
    return np.argmax(logits.data, axis=1)


# --------------------------------------------------------------------------
# Accounting

def count_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count; matches the materialized tensors exactly."""
    d, e, n, r, k = cfg.d_model, cfg.d_inner, cfg.n_state, cfg.dt_rank, cfg.conv_k
    block = (d * 2 * e      # in_proj
             + e * k + e    # conv_w, conv_b
             + e * (r + 2 * n)  # x_proj
             + r * e + e    # dt_proj, dt_bias
             + e * n        # A_log
             + e            # D
             + e * d        # out_proj
             + d)           # norm_gain
    trunk = cfg.n_bins * d + d
    head = cfg.head_in * cfg.n_classes + cfg.n_classes
    return trunk + 2 * block + head


def count_flops(cfg: ModelConfig, n_frames: int) -> int:
    """Analytic FLOPs of one forward pass over n_frames (see module docstring).

    Every stage costs a fixed amount per frame, so the total is exactly
    linear in n_frames.
    """
    d, e, n, r, k = cfg.d_model, cfg.d_inner, cfg.n_state, cfg.dt_rank, cfg.conv_k
    L = n_frames
    per_frame_block = (
        4 * d + 10            # rmsnorm: square d, sum d, mean+eps 2, sqrt 8, divide d, gain d
        + 2 * d * (2 * e)     # in_proj matmul
        + e * (2 * k + 1)     # depthwise conv MACs + bias
        + 9 * e               # silu on the state branch
        + 2 * e * (r + 2 * n)  # x_proj matmul
        + 2 * r * e + e       # dt_proj matmul + dt_bias
        + 17 * e              # softplus(delta): exp 8 + add 1 + ln 8
        + 9 * e * n           # Abar = exp(delta*A): mul 1 + exp 8
        + e + e * n           # Bbar*u: delta*u, then outer product with B
        + 2 * e * n           # state update h = Abar*h + Bbar*u
        + 2 * e * n + 2 * e   # output C.h + D*u
        + 10 * e              # gate: silu(z) 9 + elementwise product 1
        + 2 * e * d           # out_proj matmul
        + d                   # residual add
    )
    per_frame = (2 * cfg.n_bins * d + d            # fc_in + bias
                 + 2 * per_frame_block             # exactly two blocks
                 + 2 * cfg.head_in * cfg.n_classes + cfg.n_classes)  # head + bias
    return L * per_frame


# --------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path, cfg: ModelConfig, params: ModelParams,
                    extra_meta: dict | None = None) -> tuple:
    """Write params to <base>.json + <base>.bin in the bmace-ckpt-1 format."""
    meta = {"config": cfg.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    named = ((name, t.data) for name, t in params.named_tensors())
    return tensorio.write_tensors(path, tensorio.CHECKPOINT_FORMAT, meta, named)


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, dict]:
    """Read a bmace-ckpt-1 checkpoint; params come back in STANDARD precision."""
    _, meta, arrays = tensorio.read_tensors(path, expect_format=tensorio.CHECKPOINT_FORMAT)
    cfg = ModelConfig.from_dict(meta["config"])
    tensors = {name: Tensor(arr, dtype=STANDARD) for name, arr in arrays.items()}
    params = params_from_dict(tensors)
    if params.n_params() != count_params(cfg):
        raise tensorio.BlobFormatError(
            f"checkpoint holds {params.n_params()} parameters, "
            f"config implies {count_params(cfg)}")
    return cfg, params, meta
