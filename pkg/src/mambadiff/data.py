"""Datasets and artifact emission: toy classes, CIFAR-10 binaries, PPM, CSV.

The toy dataset is a deterministic stand-in for real data: eight
procedural class templates (broad sign patterns crossed with per-channel
sign flips) plus a per-image scalar brightness jitter. Everything is a
pure function of (seed, batch index).
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ToyDatasetSpec:
    n_classes: int = 8
    resolution: int = 16
    channels: int = 3
    jitter: float = 0.1
    amplitude: float = 0.9


def _spatial_patterns(r: int) -> list[np.ndarray]:
    yy, xx = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
    period = max(r // 2, 2)
    half = period // 2
    return [
        np.where((yy % period) < half, 1.0, -1.0),
        np.where((xx % period) < half, 1.0, -1.0),
        np.where(((yy % period) < half) ^ ((xx % period) < half), -1.0, 1.0),
        np.where(((xx + yy) % period) < half, 1.0, -1.0),
    ]


def class_templates(spec: ToyDatasetSpec) -> np.ndarray:
    """(K, C, R, R) templates in [-1, 1], pairwise well-separated."""
    base = _spatial_patterns(spec.resolution)
    channel_signs = [np.array([1.0, 1.0, 1.0]), np.array([1.0, -1.0, -1.0])]
    out = np.empty((spec.n_classes, spec.channels, spec.resolution, spec.resolution), dtype=np.float64)
    for k in range(spec.n_classes):
        s = base[k % len(base)]
        w = channel_signs[(k // len(base)) % len(channel_signs)][: spec.channels]
        out[k] = spec.amplitude * w[:, None, None] * s[None]
    return out


def min_template_distance(spec: ToyDatasetSpec) -> float:
    t = class_templates(spec).reshape(spec.n_classes, -1)
    dists = [
        float(np.linalg.norm(t[i] - t[j]))
        for i in range(spec.n_classes)
        for j in range(i + 1, spec.n_classes)
    ]
    return min(dists)


def generate_toy_batch(
    spec: ToyDatasetSpec, seed: int, batch_index: int, batch_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic batch: (images (B,C,R,R) float32 in [-1,1], labels (B,))."""
    rng = np.random.default_rng([seed, batch_index])
    templates = class_templates(spec)
    labels = rng.integers(0, spec.n_classes, size=batch_size)
    jitter = spec.jitter * rng.uniform(-1.0, 1.0, size=batch_size)
    images = templates[labels] + jitter[:, None, None, None]
    return np.clip(images, -1.0, 1.0).astype(np.float32), labels


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches
# ---------------------------------------------------------------------------

_CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar10(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Read one binary batch file: records of 1 label byte + 3072 pixel bytes.

    Returns images scaled to [-1, 1] in (N, 3, 32, 32) CHW order.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % _CIFAR_RECORD:
        expected = (raw.size // _CIFAR_RECORD + 1) * _CIFAR_RECORD
        raise ValueError(
            f"{path}: size {raw.size} is not a multiple of {_CIFAR_RECORD} bytes "
            f"(nearest whole-record size {expected})"
        )
    rec = raw.reshape(-1, _CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32)
    return images / 127.5 - 1.0, labels


def encode_cifar10(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`load_cifar10` for round-trip checks."""
    pix = np.round((images + 1.0) * 127.5).clip(0, 255).astype(np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([labels.astype(np.uint8)[:, None], pix], axis=1)
    return rec.tobytes()


# ---------------------------------------------------------------------------
# Image and metrics emission
# ---------------------------------------------------------------------------


def _atomic_write(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def ppm_bytes(image: np.ndarray) -> bytes:
    """Binary PPM (P6, 8-bit) of a (3, H, W) image in [-1, 1].

    Values clamp first, then map by round-half-up: v -> floor((v+1)*127.5 + 0.5),
    so 0 maps to 128 and the endpoints hit 0 and 255 exactly.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"ppm needs (3, H, W), got {image.shape}")
    v = np.clip(image.astype(np.float64), -1.0, 1.0)
    pix = np.floor((v + 1.0) * 127.5 + 0.5).clip(0, 255).astype(np.uint8)
    h, w = image.shape[1:]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + pix.transpose(1, 2, 0).tobytes()


def write_image_ppm(image: np.ndarray, path: str) -> None:
    _atomic_write(path, ppm_bytes(image))


class MetricsWriter:
    """CSV with header ``step,loss,grad_norm,ema_dist``, one row per logged step."""

    HEADER = "step,loss,grad_norm,ema_dist"

    def __init__(self):
        self.rows: list[str] = []

    def log(self, step: int, loss: float, grad_norm: float, ema_dist: float) -> None:
        self.rows.append(f"{step},{loss:.8g},{grad_norm:.8g},{ema_dist:.8g}")

    def dump(self, path: str) -> None:
        _atomic_write(path, ("\n".join([self.HEADER] + self.rows) + "\n").encode("ascii"))
