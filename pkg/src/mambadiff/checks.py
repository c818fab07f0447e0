"""Invariant suites behind the ``check`` command.

Each suite re-runs the library's structural guarantees on freshly seeded
random instances and reports pass/fail with the seed that produced any
counterexample. These are quick smoke-level versions; the pytest suite
carries the exhaustive forms.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import geometry, ssm
from .diffusion import EMAState, NoiseSchedule, cfg_predict, tau_for_upscale
from .geometry import GridSpec
from .model import Denoiser, ModelConfig, preset
from .tensor import Tensor, gather, inverse_permutation, parameter, precision, record, scatter, tensor
from .gradcheck import finite_diff_check


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""
    seed: int | None = None


def _ssm_suite() -> list[CheckResult]:
    out = []
    rng = np.random.default_rng(2024)
    worst = 0.0
    bad_seed = None
    for case in range(200):
        seed = int(rng.integers(1 << 31))
        r = np.random.default_rng(seed)
        L = int(r.integers(1, 257))
        a = r.uniform(0, 1, (1, L, 2, 2)).astype(np.float32)
        b = r.standard_normal((1, L, 2, 2)).astype(np.float32)
        d = np.abs(ssm.scan_parallel_arrays(a, b) - ssm.scan_sequential_arrays(a, b)).max()
        if d > worst:
            worst, bad_seed = d, seed
    out.append(
        CheckResult("ssm", "parallel-vs-sequential (200 cases, f32)", worst < 1e-5, f"max diff {worst:.2e}", bad_seed)
    )

    with precision("f64"):
        a = tensor(np.array([[-1.0]]))
        bt = tensor(np.array([[[1.0]]]))
        dt = tensor(np.array([[[np.log(2.0)]]]))
        abar, bbar = ssm.zoh_discretize(a, bt, dt)
        ok = abs(abar.item() - 0.5) < 1e-9 and abs(bbar.item() - 0.5) < 1e-9
        out.append(CheckResult("ssm", "zoh closed form A=-1, dt=ln2", ok, f"abar={abar.item():.12f}"))

        z = np.concatenate([-np.logspace(-12, 1, 200), np.logspace(-12, 1, 200)])
        em = np.expm1(z)
        ratio = np.where(np.abs(z) < 1e-4, 1 + z / 2 + z * z / 6, em / np.where(np.abs(z) < 1e-4, 1, z))
        out.append(CheckResult("ssm", "zoh stable over |dt*A| in [1e-12, 10]", bool(np.all(np.isfinite(ratio)))))

    rng2 = np.random.default_rng(7)
    p = ssm.init_ssm_params(4, 3, 2, rng2, np.float64)
    with precision("f64"):
        x = parameter(rng2.standard_normal((1, 6, 4)))
        rep = finite_diff_check(
            lambda: ssm.run_selective_scan(x, p, impl="sequential").sum(),
            {**p.named("p"), "x": x},
            step=1e-6,
        )
    out.append(CheckResult("ssm", "sequential-scan gradient vs finite diff", rep.max_rel_error < 1e-5, f"{rep.max_rel_error:.2e}"))
    return out


def _tensor_suite() -> list[CheckResult]:
    out = []
    rng = np.random.default_rng(11)
    with precision("f64"):
        from .tensor import exp, silu, softplus, rms_norm, squared_error

        x = parameter(rng.uniform(-1, 1, (3, 4)))
        rep = finite_diff_check(lambda: silu(rms_norm(softplus(exp(x)))).sum(), {"x": x}, step=1e-6)
        out.append(CheckResult("tensor", "op-chain gradient vs finite diff", rep.max_rel_error < 1e-6, f"{rep.max_rel_error:.2e}"))

        y = rms_norm(tensor(rng.standard_normal((5, 16))))
        rms = np.sqrt((y.data**2).mean(axis=-1))
        out.append(CheckResult("tensor", "rms normalization unit scale", bool(np.allclose(rms, 1.0, atol=1e-5))))

    perm = rng.permutation(12)
    xt = tensor(rng.standard_normal((2, 12, 3)).astype(np.float32))
    rt = scatter(gather(xt, perm, 1), perm, 1)
    out.append(CheckResult("tensor", "scatter(gather(x)) == x", bool(np.array_equal(rt.data, xt.data))))
    return out


def _geometry_suite() -> list[CheckResult]:
    out = []
    ok = True
    for hp in range(1, 17):
        for pattern in geometry.ALL_PATTERNS:
            grid = GridSpec(hp, hp, 2, 3)
            p = geometry.build_permutation(grid, pattern)
            if not np.array_equal(np.sort(p), np.arange(p.size)):
                ok = False
    out.append(CheckResult("geometry", "all patterns are bijections (grids to 16x16)", ok))

    grid = GridSpec(4, 6, 2, 3)
    p1 = geometry.build_permutation(grid, 1)
    p3 = geometry.build_permutation(grid, 3)
    cols = grid.w_p + 1
    adj = all(p1[r * cols + grid.w_p] == r * cols + grid.w_p for r in range(grid.h_p))
    # under pattern 1, the token after each row's last patch is that row's EOL cell
    row_ok = all(int(p1[r * cols + grid.w_p - 1]) + 1 == int(p1[r * cols + grid.w_p]) for r in range(grid.h_p))
    col_ok = True
    rows_aug = grid.h_p + 1
    for c in range(grid.w_p):
        base = c * rows_aug
        col_ok &= int(p3[base + grid.h_p]) == grid.h_p * cols + c
    out.append(CheckResult("geometry", "EOL adjacency for patterns 1 and 3", bool(adj and row_ok and col_ok)))

    rng = np.random.default_rng(5)
    x = tensor(rng.standard_normal((2, 3, 16, 16)).astype(np.float32))
    rt = geometry.unpatchify(geometry.patchify(x, 2), GridSpec(8, 8, 2, 3))
    out.append(CheckResult("geometry", "patchify round-trip exact", bool(np.array_equal(rt.data, x.data))))
    return out


def _model_suite() -> list[CheckResult]:
    out = []
    cfg = replace(preset("toy"), depth=2)
    m = Denoiser(cfg, seed=0)
    rng = np.random.default_rng(1)
    x16 = tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float32))
    x32 = tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
    t = np.array([10])
    lab = np.array([0])
    o16 = m(x16, t, lab)
    o32 = m(x32, t, lab)
    out.append(
        CheckResult(
            "model",
            "resolution transfer 16 -> 32 (same weights)",
            o16.shape == x16.shape and o32.shape == x32.shape and bool(np.all(np.isfinite(o32.data))),
        )
    )

    blk = m.blocks[0]
    seq = tensor(rng.standard_normal((1, 10, cfg.hidden)).astype(np.float32))
    base = blk(seq).data.copy()
    pert = seq.data.copy()
    pert[0, 7] += 1.0
    after = blk(tensor(pert)).data
    out.append(CheckResult("model", "block causality (later token cannot affect earlier)", bool(np.array_equal(base[0, :7], after[0, :7]))))
    return out


def _diffusion_suite() -> list[CheckResult]:
    out = []
    sched = NoiseSchedule()
    ok = bool(np.all(np.diff(sched.alpha_bars) < 0) and np.all(np.diff(sched.snr(np.arange(sched.timesteps))) < 0))
    out.append(CheckResult("diffusion", "schedule and SNR strictly decreasing", ok))

    ok = all(tau_for_upscale(sched, t, 1) == t for t in range(0, sched.timesteps, 97))
    out.append(CheckResult("diffusion", "tau(t, m=1) == t", ok))

    ema = EMAState({"w": parameter(np.zeros(4, dtype=np.float64))}, rate=0.9999)
    p = {"w": parameter(np.ones(4, dtype=np.float64))}
    d0 = ema.distance(p)
    ema.update(p)
    d1 = ema.distance(p)
    out.append(CheckResult("diffusion", "EMA contraction at exactly the rate", abs(d1 / d0 - 0.9999) < 1e-12, f"ratio {d1/d0:.12f}"))
    return out


def _data_suite() -> list[CheckResult]:
    from .data import ToyDatasetSpec, generate_toy_batch, min_template_distance, ppm_bytes

    out = []
    spec = ToyDatasetSpec()
    bound = 0.5 * spec.resolution * np.sqrt(3.0) * 2.0
    d = min_template_distance(spec)
    out.append(CheckResult("data", "toy templates pairwise separated", d > bound, f"min dist {d:.1f} vs bound {bound:.1f}"))

    a = generate_toy_batch(spec, 9, 4, 8)
    b = generate_toy_batch(spec, 9, 4, 8)
    out.append(CheckResult("data", "toy batches deterministic in (seed, index)", bool(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]))))

    payload = ppm_bytes(np.zeros((3, 32, 32), dtype=np.float32))
    out.append(CheckResult("data", "ppm header and midpoint for 32x32", payload[:13] == b"P6\n32 32\n255\n" and payload[13] == 128))
    return out


SUITES: dict[str, Callable[[], list[CheckResult]]] = {
    "tensor": _tensor_suite,
    "ssm": _ssm_suite,
    "geometry": _geometry_suite,
    "model": _model_suite,
    "diffusion": _diffusion_suite,
    "data": _data_suite,
}


def run_suites(names: list[str] | None = None) -> tuple[list[CheckResult], int]:
    """Run the requested suites (all by default); returns (results, exit_code)."""
    picked = names or list(SUITES)
    results: list[CheckResult] = []
    for name in picked:
        if name not in SUITES:
            raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
        start = time.perf_counter()
        rs = SUITES[name]()
        elapsed = time.perf_counter() - start
        for r in rs:
            mark = "PASS" if r.passed else "FAIL"
            extra = f"  [{r.detail}]" if r.detail else ""
            seed = f"  seed={r.seed}" if (not r.passed and r.seed is not None) else ""
            print(f"[{mark}] {r.suite}: {r.name}{extra}{seed}")
        print(f"  suite {name!r} finished in {elapsed:.2f}s")
        results.extend(rs)
    failed = [r for r in results if not r.passed]
    return results, (1 if failed else 0)
