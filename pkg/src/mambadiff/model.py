"""Noise-prediction backbone: gated selective-scan blocks over patch tokens.

The network is resolution-agnostic: no positional table, only scan order,
the causal convolution inside each block, and the optional boundary
(padding) tokens carry spatial structure. Conditioning is two extra
tokens (time, class) at the canonical sequence tail. Blocks cycle
through the enabled scan patterns; reversed patterns flip the entire
sequence, which places the conditioning tokens first so their content can
reach every spatial position despite the causal scan direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .geometry import GridSpec, NUM_CONDITIONING_TOKENS
from .ssm import SSMParams, init_ssm_params, run_selective_scan
from .tensor import (
    Tensor,
    ShapeError,
    add,
    concat,
    conv1d_dw_causal,
    conv2d_dw,
    gather,
    matmul,
    mul,
    parameter,
    reshape,
    rms_norm,
    scatter,
    silu,
    split,
    take_rows,
    tensor,
    transpose,
)

CONV1D_WIDTH = 4


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters and feature toggles."""

    depth: int = 4
    hidden: int = 64
    state_size: int = 16
    expand: int = 2
    dt_rank: int = 0  # 0 = ceil(hidden / 16)
    patch: int = 2
    in_channels: int = 3
    n_classes: int = 8
    multi_scan: bool = True
    long_skip: bool = True
    padding_tokens: bool = True
    local_feature_enh: bool = True
    scan_set: tuple[int, ...] = (1, 2, 3, 4)
    zoh_exact: bool = True
    ssm_impl: str = "fused"  # fused | sequential | parallel
    time_embed_mult: int = 4

    @property
    def d_inner(self) -> int:
        return self.expand * self.hidden

    @property
    def dt_rank_effective(self) -> int:
        return self.dt_rank if self.dt_rank > 0 else math.ceil(self.hidden / 16)

    @property
    def effective_scan_set(self) -> tuple[int, ...]:
        return self.scan_set if self.multi_scan else self.scan_set[:1]

    @property
    def null_class(self) -> int:
        return self.n_classes

    @property
    def skip_pairs(self) -> int:
        return self.depth // 2 if self.long_skip else 0


PRESETS = {
    # sized so a full training run fits a small-CPU budget
    "toy": ModelConfig(depth=4, hidden=64, state_size=4, expand=1, n_classes=8),
    "small": ModelConfig(depth=25, hidden=512, n_classes=1000),
    "large": ModelConfig(depth=49, hidden=1024, n_classes=1000),
    "huge": ModelConfig(depth=49, hidden=1536, n_classes=1000),
}


def preset(name: str, **overrides) -> ModelConfig:
    return replace(PRESETS[name], **overrides)


def sinusoidal_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos features of (possibly fractional) timesteps."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    feat = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        feat = np.concatenate([feat, np.zeros((t.size, 1))], axis=1)
    return feat


class MambaBlock:
    """Pre-norm gated block: conv1d + selective scan on the stream path."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype):
        h, d = cfg.hidden, cfg.d_inner
        self.cfg = cfg
        self.norm_gain = parameter(np.ones(h), dtype=dtype)
        self.in_proj = parameter(rng.standard_normal((h, 2 * d)) * h**-0.5, dtype=dtype)
        self.conv_w = parameter(rng.standard_normal((CONV1D_WIDTH, d)) * CONV1D_WIDTH**-0.5, dtype=dtype)
        self.conv_b = parameter(np.zeros(d), dtype=dtype)
        self.ssm = init_ssm_params(d, cfg.state_size, cfg.dt_rank_effective, rng, dtype)
        # zero init: the block is the identity map at initialization
        self.out_proj = parameter(np.zeros((d, h)), dtype=dtype)
        # recycled scan-state buffers; valid while at most one tape is in flight
        self._workspace: dict = {}

    def forward(self, seq: Tensor) -> Tensor:
        d = self.cfg.d_inner
        h = mul(rms_norm(seq), self.norm_gain)
        stream, gate = split(matmul(h, self.in_proj), [d, d], axis=2)
        stream = silu(conv1d_dw_causal(stream, self.conv_w, self.conv_b))
        y = run_selective_scan(
            stream, self.ssm, impl=self.cfg.ssm_impl, zoh_exact=self.cfg.zoh_exact, workspace=self._workspace
        )
        y = mul(y, silu(gate))
        return add(seq, matmul(y, self.out_proj))

    __call__ = forward

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.norm_gain": self.norm_gain,
            f"{prefix}.in_proj": self.in_proj,
            f"{prefix}.conv_w": self.conv_w,
            f"{prefix}.conv_b": self.conv_b,
            f"{prefix}.out_proj": self.out_proj,
        }
        out.update(self.ssm.named(f"{prefix}.ssm"))
        return out


class Denoiser:
    """Full noise-prediction model over (B, C, H, W) inputs."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=None):
        from .tensor import default_dtype

        dtype = dtype or default_dtype()
        rng = np.random.default_rng([seed, 0xD1F])
        self.cfg = cfg
        h = cfg.hidden
        in_dim = cfg.in_channels * cfg.patch * cfg.patch

        self.patch_embed_w = parameter(rng.standard_normal((in_dim, h)) * in_dim**-0.5, dtype=dtype)
        self.patch_embed_b = parameter(np.zeros(h), dtype=dtype)

        if cfg.local_feature_enh:
            # identity at init: center tap one, elsewhere zero
            w_in = np.zeros((h, 3, 3))
            w_in[:, 1, 1] = 1.0
            self.lfe_in_w = parameter(w_in, dtype=dtype)
            self.lfe_in_b = parameter(np.zeros(h), dtype=dtype)
            w_out = np.zeros((cfg.in_channels, 3, 3))
            w_out[:, 1, 1] = 1.0
            self.lfe_out_w = parameter(w_out, dtype=dtype)
            self.lfe_out_b = parameter(np.zeros(cfg.in_channels), dtype=dtype)

        mult = cfg.time_embed_mult
        self.time_w1 = parameter(rng.standard_normal((h, mult * h)) * h**-0.5, dtype=dtype)
        self.time_b1 = parameter(np.zeros(mult * h), dtype=dtype)
        self.time_w2 = parameter(rng.standard_normal((mult * h, h)) * (mult * h) ** -0.5, dtype=dtype)
        self.time_b2 = parameter(np.zeros(h), dtype=dtype)

        # one extra row for the null (unconditional) class
        self.class_table = parameter(rng.standard_normal((cfg.n_classes + 1, h)) * 0.02, dtype=dtype)

        if cfg.padding_tokens:
            self.row_eol = parameter(rng.standard_normal(h) * 0.02, dtype=dtype)
            self.col_eol = parameter(rng.standard_normal(h) * 0.02, dtype=dtype)
            self.corner = parameter(rng.standard_normal(h) * 0.02, dtype=dtype)

        self.blocks = [MambaBlock(cfg, rng, dtype) for _ in range(cfg.depth)]

        self.merge_w: list[Tensor] = []
        self.merge_b: list[Tensor] = []
        if cfg.long_skip:
            eye = np.concatenate([np.eye(h), np.zeros((h, h))], axis=0)
            for _ in range(cfg.skip_pairs):
                # identity on the residual half, zero on the skip half
                self.merge_w.append(parameter(eye.copy(), dtype=dtype))
                self.merge_b.append(parameter(np.zeros(h), dtype=dtype))

        self.final_gain = parameter(np.ones(h), dtype=dtype)
        self.head_w = parameter(rng.standard_normal((h, in_dim)) * 0.02, dtype=dtype)
        self.head_b = parameter(np.zeros(in_dim), dtype=dtype)
        self._perm_cache: dict[tuple, np.ndarray] = {}

    # -- parameters ----------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = {
            "patch_embed.w": self.patch_embed_w,
            "patch_embed.b": self.patch_embed_b,
            "time.w1": self.time_w1,
            "time.b1": self.time_b1,
            "time.w2": self.time_w2,
            "time.b2": self.time_b2,
            "class.table": self.class_table,
            "final_gain": self.final_gain,
            "head.w": self.head_w,
            "head.b": self.head_b,
        }
        if self.cfg.local_feature_enh:
            out.update(
                {
                    "lfe_in.w": self.lfe_in_w,
                    "lfe_in.b": self.lfe_in_b,
                    "lfe_out.w": self.lfe_out_w,
                    "lfe_out.b": self.lfe_out_b,
                }
            )
        if self.cfg.padding_tokens:
            out.update({"pad.row_eol": self.row_eol, "pad.col_eol": self.col_eol, "pad.corner": self.corner})
        for k, blk in enumerate(self.blocks):
            out.update(blk.named(f"blocks.{k}"))
        for j, (w, b) in enumerate(zip(self.merge_w, self.merge_b)):
            out[f"merges.{j}.w"] = w
            out[f"merges.{j}.b"] = b
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())

    # -- forward -------------------------------------------------------------

    def _full_perm(self, pattern: int, grid: GridSpec) -> np.ndarray:
        """Per-block permutation over the whole sequence, conditioning included.

        Forward patterns keep (time, class) at the tail; reversed patterns
        are exact reversals of the corresponding forward sequence, so the
        conditioning tokens lead and are visible to the causal scan.
        """
        padded = self.cfg.padding_tokens
        key = (pattern, grid.h_p, grid.w_p, padded)
        cached = self._perm_cache.get(key)
        if cached is not None:
            return cached
        sp = geometry.build_permutation(grid, pattern, padded)
        s = sp.size
        if pattern in (2, 4):
            perm = np.concatenate([np.array([s + 1, s], dtype=np.int64), sp])
        else:
            perm = np.concatenate([sp, np.array([s, s + 1], dtype=np.int64)])
        self._perm_cache[key] = perm
        return perm

    def conditioning_tokens(self, t: np.ndarray, labels: np.ndarray) -> Tensor:
        """(B, 2, hidden): time token then class token."""
        cfg = self.cfg
        labels = np.asarray(labels, dtype=np.int64)
        if labels.min() < 0 or labels.max() > cfg.null_class:
            raise ShapeError(f"labels out of range [0, {cfg.null_class}]")
        feat = tensor(sinusoidal_features(t, cfg.hidden).astype(self.patch_embed_w.dtype))
        tt = add(matmul(silu(add(matmul(feat, self.time_w1), self.time_b1)), self.time_w2), self.time_b2)
        ct = take_rows(self.class_table, labels)
        b = tt.shape[0]
        return concat([reshape(tt, (b, 1, cfg.hidden)), reshape(ct, (b, 1, cfg.hidden))], axis=1)

    def _lfe_grid(self, tokens: Tensor, grid: GridSpec, w: Tensor, b: Tensor) -> Tensor:
        bsz, _, dim = tokens.shape
        img = transpose(reshape(tokens, (bsz, grid.h_p, grid.w_p, dim)), (0, 3, 1, 2))
        img = add(conv2d_dw(img, w), reshape(b, (dim, 1, 1)))
        return reshape(transpose(img, (0, 2, 3, 1)), (bsz, grid.n_patches, dim))

    def forward(self, x: Tensor, t: np.ndarray, labels: np.ndarray) -> Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected input (B, {cfg.in_channels}, H, W), got {x.shape}")
        grid = GridSpec.for_image(x.shape[2], x.shape[3], cfg.patch, cfg.in_channels)

        tokens = add(matmul(geometry.patchify(x, cfg.patch), self.patch_embed_w), self.patch_embed_b)
        if cfg.local_feature_enh:
            tokens = self._lfe_grid(tokens, grid, self.lfe_in_w, self.lfe_in_b)
        if cfg.padding_tokens:
            spatial = geometry.add_padding_tokens(tokens, grid, self.row_eol, self.col_eol, self.corner)
        else:
            spatial = tokens
        seq = concat([spatial, self.conditioning_tokens(t, labels)], axis=1)

        half = cfg.skip_pairs
        skips: list[Tensor] = []
        merge_idx = 0
        for k, block in enumerate(self.blocks):
            if cfg.long_skip and k >= cfg.depth - half:
                skip = skips.pop()
                seq = add(matmul(concat([seq, skip], axis=2), self.merge_w[merge_idx]), self.merge_b[merge_idx])
                merge_idx += 1
            perm = self._full_perm(geometry.cycle_pattern(k, cfg.effective_scan_set), grid)
            seq = scatter(block(gather(seq, perm, axis=1)), perm, axis=1)
            if cfg.long_skip and k < half:
                skips.append(seq)

        seq = mul(rms_norm(seq), self.final_gain)
        spatial, _ = split(seq, [grid.spatial_len(cfg.padding_tokens), NUM_CONDITIONING_TOKENS], axis=1)
        if cfg.padding_tokens:
            spatial = geometry.strip_padding_tokens(spatial, grid)
        out = add(matmul(spatial, self.head_w), self.head_b)
        img = geometry.unpatchify(out, grid)
        if cfg.local_feature_enh:
            img = add(conv2d_dw(img, self.lfe_out_w), reshape(self.lfe_out_b, (cfg.in_channels, 1, 1)))
        return img

    __call__ = forward
