"""Discrete variance-preserving diffusion: schedule, loss, samplers, guidance.

The schedule is the standard discrete VP chain with a linear beta ramp.
All schedule arithmetic runs in float64 and is cast at the model
boundary. Samplers operate in log-SNR time via monotone interpolation of
the discrete schedule, so solver steps may land on fractional timesteps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Denoiser
from .tensor import Tensor, record, squared_error, tensor


class NoiseSchedule:
    """Discrete VP schedule: beta_t linear from 1e-4 to 0.02 over T steps.

    alpha_bar is strictly decreasing, so SNR(t) = alpha_bar/(1-alpha_bar)
    is a bijection over the discrete steps.
    """

    def __init__(self, timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if timesteps < 2:
            raise ValueError("schedule needs at least 2 steps")
        self.timesteps = timesteps
        self.betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self._log_ab = np.log(self.alpha_bars)
        self._t_grid = np.arange(timesteps, dtype=np.float64)

    def snr(self, t) -> np.ndarray:
        ab = self.alpha_bar(t)
        return ab / (1.0 - ab)

    def alpha_bar(self, t) -> np.ndarray:
        """alpha_bar at (possibly fractional) t, log-linear between grid points."""
        t = np.asarray(t, dtype=np.float64)
        return np.exp(np.interp(t, self._t_grid, self._log_ab))

    def signal_coef(self, t) -> np.ndarray:
        return np.sqrt(self.alpha_bar(t))

    def noise_coef(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar(t))

    def log_snr_half(self, t) -> np.ndarray:
        """lambda(t) = log(signal/noise); strictly decreasing in t."""
        ab = self.alpha_bar(t)
        return 0.5 * (np.log(ab) - np.log1p(-ab))

    def t_of_log_snr_half(self, lam) -> np.ndarray:
        lam_grid = self.log_snr_half(self._t_grid)
        # lam_grid decreases with t; np.interp needs increasing x
        return np.interp(lam, lam_grid[::-1], self._t_grid[::-1])


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Forward perturbation: x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.timesteps):
        raise ValueError(f"t out of range [0, {schedule.timesteps})")
    c_sig = schedule.signal_coef(t).reshape(-1, *([1] * (x0.ndim - 1)))
    c_noise = schedule.noise_coef(t).reshape(-1, *([1] * (x0.ndim - 1)))
    return (c_sig * x0 + c_noise * eps).astype(x0.dtype)


def training_loss(
    model,
    schedule: NoiseSchedule,
    x0: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    label_dropout: float = 0.1,
) -> Tensor:
    """Noise-prediction MSE with uniform timesteps and CFG label dropout.

    Draw order from ``rng`` is fixed (t, eps, dropout) so a seeded
    generator reproduces the loss bit for bit.
    """
    n = x0.shape[0]
    t = rng.integers(0, schedule.timesteps, size=n)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    labels = np.asarray(labels, dtype=np.int64).copy()
    if label_dropout > 0:
        drop = rng.random(n) < label_dropout
        labels[drop] = model.cfg.null_class
    x_t = q_sample(schedule, x0, t, eps)
    pred = model(tensor(x_t), t, labels)
    return squared_error(pred, tensor(eps))


def cfg_predict(model, x_t: Tensor, t: np.ndarray, labels: np.ndarray, scale: float) -> Tensor:
    """Classifier-free guidance: eps_null + scale * (eps_cond - eps_null).

    scale 0 returns the unconditional branch exactly (the conditional
    forward is skipped); scale 1 returns the conditional branch exactly.
    """
    null = np.full(len(labels), model.cfg.null_class, dtype=np.int64)
    if scale == 0.0:
        return model(x_t, t, null)
    if scale == 1.0:
        return model(x_t, t, labels)
    eps_c = model(x_t, t, labels)
    eps_n = model(x_t, t, null)
    from .tensor import add, mul, sub

    dtype = eps_c.dtype
    return add(eps_n, mul(sub(eps_c, eps_n), tensor(np.asarray(scale, dtype=dtype))))


# ---------------------------------------------------------------------------
# Samplers; predictors are plain functions eps(x: ndarray, t: scalar) -> ndarray
# ---------------------------------------------------------------------------


def ddpm_step(
    schedule: NoiseSchedule, x: np.ndarray, t: int, eps_hat: np.ndarray, noise: np.ndarray | None
) -> np.ndarray:
    """One ancestral step t -> t-1 (posterior mean plus sigma_t * noise)."""
    if t <= 0:
        raise ValueError("ddpm_step: t must be positive (a step must decrease t)")
    beta = schedule.betas[t]
    alpha = schedule.alphas[t]
    ab_t = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t - 1]
    mean = (x - beta / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(alpha)
    if noise is None:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + math.sqrt(var) * noise


def dpm_solver_step(
    schedule: NoiseSchedule, eps_fn, x: np.ndarray, t: float, t_next: float, order: int = 2
) -> np.ndarray:
    """Exponential-integrator update from t to t_next < t in log-SNR time.

    Order 1 is the deterministic DDIM update; order 2 uses the log-SNR
    midpoint. ``t == t_next`` is a no-op.
    """
    if t_next > t:
        raise ValueError(f"dpm_solver_step: t_next={t_next} must not exceed t={t}")
    if t_next == t:
        return x
    lam_t = float(schedule.log_snr_half(t))
    lam_s = float(schedule.log_snr_half(t_next))
    h = lam_s - lam_t
    a_t, a_s = float(schedule.signal_coef(t)), float(schedule.signal_coef(t_next))
    s_s = float(schedule.noise_coef(t_next))
    if order == 1:
        return (a_s / a_t) * x - s_s * math.expm1(h) * eps_fn(x, t)
    if order == 2:
        t_mid = float(schedule.t_of_log_snr_half(lam_t + 0.5 * h))
        a_m = float(schedule.signal_coef(t_mid))
        s_m = float(schedule.noise_coef(t_mid))
        u = (a_m / a_t) * x - s_m * math.expm1(0.5 * h) * eps_fn(x, t)
        return (a_s / a_t) * x - s_s * math.expm1(h) * eps_fn(u, t_mid)
    raise ValueError(f"unsupported solver order {order}")


def sample_loop(
    schedule: NoiseSchedule,
    eps_fn,
    shape: tuple[int, ...],
    steps: int,
    rng: np.random.Generator,
    order: int = 2,
    dtype=np.float32,
) -> np.ndarray:
    """Draw x_T ~ N(0, I) and integrate to t=0, then decode to an x0 estimate."""
    x = rng.standard_normal(shape).astype(dtype)
    grid = np.linspace(schedule.timesteps - 1, 0.0, steps + 1)
    for i in range(steps):
        x = dpm_solver_step(schedule, eps_fn, x, float(grid[i]), float(grid[i + 1]), order=order)
    a0 = float(schedule.signal_coef(0.0))
    s0 = float(schedule.noise_coef(0.0))
    return ((x - s0 * eps_fn(x, 0.0)) / a0).astype(dtype)


def ddpm_sample_loop(
    schedule: NoiseSchedule, eps_fn, shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float32
) -> np.ndarray:
    """Full-length ancestral chain (z = 0 on the final step)."""
    x = rng.standard_normal(shape).astype(dtype)
    for t in range(schedule.timesteps - 1, 0, -1):
        noise = rng.standard_normal(shape).astype(dtype) if t > 1 else None
        x = ddpm_step(schedule, x, t, eps_fn(x, float(t)), noise)
    return x.astype(dtype)


# ---------------------------------------------------------------------------
# Training-free upsample guidance
# ---------------------------------------------------------------------------


def average_pool(x: np.ndarray, m: int) -> np.ndarray:
    """Mean over m x m cells of (..., H, W); H and W must divide by m."""
    if x.shape[-1] % m or x.shape[-2] % m:
        raise ValueError(f"average_pool: spatial dims {x.shape[-2:]} not divisible by {m}")
    h, w = x.shape[-2] // m, x.shape[-1] // m
    return x.reshape(*x.shape[:-2], h, m, w, m).mean(axis=(-3, -1))


def nearest_upsample(x: np.ndarray, m: int) -> np.ndarray:
    """Repeat each pixel of (..., H, W) into an m x m cell."""
    return np.repeat(np.repeat(x, m, axis=-2), m, axis=-1)


def tau_for_upscale(schedule: NoiseSchedule, t: float, m: int) -> int:
    """Discrete step whose SNR is closest (in log space) to m^2 * SNR(t).

    Clamped to 0 when even the cleanest step cannot reach the target SNR.
    """
    target = m * m * float(schedule.snr(t))
    log_snr = np.log(schedule.snr(schedule._t_grid))
    return int(np.argmin(np.abs(log_snr - math.log(target))))


@dataclass
class UpsampleGuidance:
    """Correction that steers high-resolution sampling with the model's own
    low-resolution prediction at the SNR-matched earlier step tau.

    Outside the active window (the earliest ``window`` fraction of solver
    steps) the base prediction passes through untouched. ``power_mode``
    'snr' rescales the pooled input by sqrt(alpha_bar_t / alpha_bar_tau)
    so its signal magnitude matches the tau marginal; 'none' disables the
    rescale (config-overridable diagnostic).
    """

    schedule: NoiseSchedule
    scale: int = 2
    weight: float = 1.0
    window: float = 0.3
    power_mode: str = "snr"

    def power(self, t: float, tau: float) -> float:
        if self.power_mode == "none":
            return 1.0
        return float(self.schedule.alpha_bar(t) / self.schedule.alpha_bar(tau))

    def guided_eps(self, eps_fn, x: np.ndarray, t: float) -> np.ndarray:
        """Apply the correction: eps + w * U[(1/m) eps(D[x]/sqrt(P), tau) - D[eps]]."""
        m = self.scale
        if x.shape[-1] % m or x.shape[-2] % m:
            raise ValueError(f"upsample guidance: shape {x.shape} not divisible by scale {m}")
        base = eps_fn(x, t)
        if self.weight == 0.0 or m == 1:
            return base
        tau = tau_for_upscale(self.schedule, t, m)
        p_t = self.power(t, tau)
        low = eps_fn((average_pool(x, m) / math.sqrt(p_t)).astype(x.dtype), float(tau))
        correction = nearest_upsample(low / m - average_pool(base, m), m)
        return (base + self.weight * correction).astype(x.dtype)

    def active_steps(self, steps: int) -> int:
        return math.ceil(self.window * steps)


def guided_sample_loop(
    schedule: NoiseSchedule,
    eps_fn,
    guidance: UpsampleGuidance,
    shape: tuple[int, ...],
    steps: int,
    rng: np.random.Generator,
    order: int = 2,
    dtype=np.float32,
) -> np.ndarray:
    """Sampling with upsample guidance on the earliest solver steps only.

    Both model evaluations of a guided order-2 step use the corrected
    predictor; after the active window the plain predictor takes over.
    """
    active = guidance.active_steps(steps)
    guided = lambda x, t: guidance.guided_eps(eps_fn, x, t)
    x = rng.standard_normal(shape).astype(dtype)
    grid = np.linspace(schedule.timesteps - 1, 0.0, steps + 1)
    for i in range(steps):
        fn = guided if i < active else eps_fn
        x = dpm_solver_step(schedule, fn, x, float(grid[i]), float(grid[i + 1]), order=order)
    a0 = float(schedule.signal_coef(0.0))
    s0 = float(schedule.noise_coef(0.0))
    return ((x - s0 * eps_fn(x, 0.0)) / a0).astype(dtype)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------


class EMAState:
    """Exponential moving average of parameters at a fixed rate (0.9999).

    shadow <- rate * shadow + (1 - rate) * params, so with constant
    params the distance contracts by exactly ``rate`` per update.
    """

    def __init__(self, params: dict[str, Tensor], rate: float = 0.9999):
        self.rate = rate
        self.shadow = {k: p.data.copy() for k, p in params.items()}

    def update(self, params: dict[str, Tensor]) -> None:
        r = self.rate
        for k, p in params.items():
            s = self.shadow[k]
            s *= r
            s += (1.0 - r) * p.data

    def distance(self, params: dict[str, Tensor]) -> float:
        total = 0.0
        for k, p in params.items():
            d = self.shadow[k] - p.data
            total += float(np.sum(d.astype(np.float64) ** 2))
        return math.sqrt(total)

    def copy_to(self, params: dict[str, Tensor]) -> None:
        for k, p in params.items():
            p.data = self.shadow[k].astype(p.dtype).copy()
