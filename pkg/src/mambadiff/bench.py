"""Throughput benchmark: one scan block vs a reference attention block.

Absolute times are hardware noise; the portable claim is the scaling
exponent, so the report fits least-squares slopes on log time vs log
sequence length. The attention reference is a minimal single-head
softmax block with an MLP sized so its parameter count matches the scan
block within 10%; it exists to exhibit the quadratic exponent, not to
train. Both run forward-only on identical inputs with no tape.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .model import MambaBlock, ModelConfig
from .tensor import Tensor, tensor


class AttentionBlock:
    """Single-head softmax attention + MLP, numpy forward only.

    Row-chunked softmax bounds memory at long lengths; the compute stays
    O(L^2 * hidden).
    """

    def __init__(self, hidden: int, mlp_dim: int, rng: np.random.Generator, chunk: int = 2048):
        s = hidden**-0.5
        self.wq = (rng.standard_normal((hidden, hidden)) * s).astype(np.float32)
        self.wk = (rng.standard_normal((hidden, hidden)) * s).astype(np.float32)
        self.wv = (rng.standard_normal((hidden, hidden)) * s).astype(np.float32)
        self.wo = (rng.standard_normal((hidden, hidden)) * s).astype(np.float32)
        self.w1 = (rng.standard_normal((hidden, mlp_dim)) * s).astype(np.float32)
        self.w2 = (rng.standard_normal((mlp_dim, hidden)) * mlp_dim**-0.5).astype(np.float32)
        self.chunk = chunk
        self.hidden = hidden

    def param_count(self) -> int:
        return sum(w.size for w in (self.wq, self.wk, self.wv, self.wo, self.w1, self.w2))

    def forward(self, x: np.ndarray) -> np.ndarray:
        q = x @ self.wq
        k = x @ self.wk
        v = x @ self.wv
        scale = np.float32(1.0 / np.sqrt(self.hidden))
        attn_out = np.empty_like(q)
        for s in range(0, x.shape[0], self.chunk):
            e = min(s + self.chunk, x.shape[0])
            scores = (q[s:e] @ k.T) * scale
            scores -= scores.max(axis=1, keepdims=True)
            np.exp(scores, out=scores)
            scores /= scores.sum(axis=1, keepdims=True)
            attn_out[s:e] = scores @ v
        h = x + attn_out @ self.wo
        m = h @ self.w1
        m = m * (0.5 * (np.tanh(0.5 * m) + 1.0))  # silu
        return h + m @ self.w2


def matched_attention_block(cfg: ModelConfig, rng: np.random.Generator) -> AttentionBlock:
    """Size the MLP so attention params land within 10% of the scan block."""
    target = _mamba_block_params(cfg)
    h = cfg.hidden
    mlp_dim = max(1, round((target - 4 * h * h) / (2 * h)))
    return AttentionBlock(h, mlp_dim, rng)


def _mamba_block_params(cfg: ModelConfig) -> int:
    rng = np.random.default_rng(0)
    blk = MambaBlock(cfg, rng, np.float32)
    return sum(p.size for p in blk.named("b").values())


@dataclass
class BenchRow:
    length: int
    block: str
    mean_ms: float
    std_ms: float


@dataclass
class BenchReport:
    rows: list[BenchRow]
    scan_slope: float
    attention_slope: float
    crossover: int | None
    scan_params: int
    attention_params: int

    def csv(self) -> str:
        lines = ["L,block,mean_ms,std_ms"]
        for r in self.rows:
            lines.append(f"{r.length},{r.block},{r.mean_ms:.6g},{r.std_ms:.6g}")
        return "\n".join(lines) + "\n"


def _time_fn(fn, reps: int, warmup: int) -> tuple[float, float]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    arr = np.asarray(times)
    return float(arr.mean()), float(arr.std())


def fit_loglog_slope(lengths, times_ms) -> float:
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.asarray(times_ms, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def run_bench(
    lengths: tuple[int, ...] = (256, 1024, 4096, 16384),
    hidden: int = 32,
    state_size: int = 8,
    expand: int = 2,
    reps: int = 20,
    warmup: int = 3,
    seed: int = 0,
) -> BenchReport:
    """Time one forward of each block over the length grid (no tape)."""
    cfg = ModelConfig(depth=1, hidden=hidden, state_size=state_size, expand=expand)
    rng = np.random.default_rng(seed)
    blk = MambaBlock(cfg, rng, np.float32)
    attn = matched_attention_block(cfg, rng)
    scan_params = _mamba_block_params(cfg)
    attn_params = attn.param_count()
    if abs(attn_params - scan_params) > 0.1 * scan_params:
        raise RuntimeError(f"attention block not parameter-matched: {attn_params} vs {scan_params}")

    rows: list[BenchRow] = []
    scan_means, attn_means = [], []
    for L in lengths:
        x = rng.standard_normal((L, hidden)).astype(np.float32)
        xt = tensor(x[None])  # (1, L, hidden)
        m, s = _time_fn(lambda: blk(xt), reps, warmup)
        rows.append(BenchRow(L, "scan", m, s))
        scan_means.append(m)
        m, s = _time_fn(lambda: attn.forward(x), reps, warmup)
        rows.append(BenchRow(L, "attention", m, s))
        attn_means.append(m)

    crossover = None
    for L, ms, ma in zip(lengths, scan_means, attn_means):
        if ms < ma:
            crossover = L
            break
    return BenchReport(
        rows=rows,
        scan_slope=fit_loglog_slope(lengths, scan_means),
        attention_slope=fit_loglog_slope(lengths, attn_means),
        crossover=crossover,
        scan_params=scan_params,
        attention_params=attn_params,
    )


def hidden_sweep_slope(hiddens: tuple[int, ...], length: int = 1024, reps: int = 10, warmup: int = 2, seed: int = 0):
    """log-log slope of block time vs hidden width (matmul cost check)."""
    rng = np.random.default_rng(seed)
    out = {}
    for kind in ("scan", "attention"):
        means = []
        for h in hiddens:
            cfg = ModelConfig(depth=1, hidden=h, state_size=8, expand=2)
            x = rng.standard_normal((length, h)).astype(np.float32)
            if kind == "scan":
                blk = MambaBlock(cfg, rng, np.float32)
                xt = tensor(x[None])
                fn = lambda: blk(xt)
            else:
                attn = matched_attention_block(cfg, rng)
                fn = lambda: attn.forward(x)
            m, _ = _time_fn(fn, reps, warmup)
            means.append(m)
        out[kind] = fit_loglog_slope(hiddens, means)
    return out
