"""Run configuration: ``key = value`` text files plus CLI overrides.

Unknown keys are errors so typos cannot silently fall back to defaults.
The effective configuration is written next to every artifact and parses
back to the identical run.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from typing import Any

from .model import ModelConfig
from .diffusion import NoiseSchedule


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected boolean, got {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace(" ", "").split(",") if p)


@dataclass
class RunConfig:
    # model
    channels: int = 3
    patch: int = 2
    hidden: int = 64
    depth: int = 4
    state_size: int = 4
    expand: int = 1
    dt_rank: int = 0
    classes: int = 8
    multi_scan: bool = True
    long_skip: bool = True
    padding_tokens: bool = True
    local_feature_enh: bool = True
    scan_set: tuple[int, ...] = (1, 2, 3, 4)
    zoh_exact: bool = True
    ssm_impl: str = "fused"
    # schedule
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # optimizer
    lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    ema_rate: float = 0.9999
    # training
    train_steps: int = 2000
    batch_size: int = 64
    resolution: int = 16
    seed: int = 0
    start_step: int = 0
    log_every: int = 50
    checkpoint_every: int = 1000
    label_dropout: float = 0.1
    # data
    dataset: str = "toy"
    data_path: str = ""
    jitter: float = 0.1
    # sampling
    sample_steps: int = 50
    cfg_scale: float = 1.0
    samples_per_class: int = 8
    solver_order: int = 2
    # upsample guidance
    ug_scale: int = 2
    ug_weight: float = 1.0
    ug_window: float = 0.3
    ug_power: str = "snr"
    # bench
    bench_lengths: tuple[int, ...] = (256, 1024, 4096, 16384)
    bench_hidden: int = 32
    bench_state: int = 8
    bench_expand: int = 2
    bench_reps: int = 20
    bench_warmup: int = 3

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            depth=self.depth,
            hidden=self.hidden,
            state_size=self.state_size,
            expand=self.expand,
            dt_rank=self.dt_rank,
            patch=self.patch,
            in_channels=self.channels,
            n_classes=self.classes,
            multi_scan=self.multi_scan,
            long_skip=self.long_skip,
            padding_tokens=self.padding_tokens,
            local_feature_enh=self.local_feature_enh,
            scan_set=self.scan_set,
            zoh_exact=self.zoh_exact,
            ssm_impl=self.ssm_impl,
        )

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.timesteps, self.beta_start, self.beta_end)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TUPLE_KEYS = {"scan_set", "bench_lengths"}


def _parse_value(key: str, raw: str) -> Any:
    f = _FIELDS[key]
    if key in _TUPLE_KEYS:
        return _parse_ints(raw)
    if f.type in ("bool", bool):
        return _parse_bool(raw)
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    return raw.strip()


def parse_config_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = _parse_value(key, raw)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from None
    return out


def load_config(path: str | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then file values, then CLI overrides."""
    values: dict[str, Any] = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            values.update(parse_config_text(f.read()))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in _FIELDS:
            raise ConfigError(f"unknown override {k!r}")
        values[k] = v
    return RunConfig(**values)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for name in sorted(_FIELDS):
        v = getattr(cfg, name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"


def write_effective_config(cfg: RunConfig, out_dir: str, name: str = "config.effective.cfg") -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_config(cfg))
    return path
