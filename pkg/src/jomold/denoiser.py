"""Modality-specific label denoising.

* :func:`estimate_noise_ratios` turns an estimator's video-level predictions
  into per-category noise ratios by thresholding mean-normalized confidences.
* :func:`jomold_step` removes a positive label from one modality when its loss
  there is among the highest *and* its loss in the other modality is among the
  lowest, with per-category counts set by the ratios.
* :func:`inmold_step` and :func:`single_modality_step` are the ablation
  baselines; :func:`warmup_factor` ramps ratios in during early training.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DimensionError, FormatError, NumericError

DEFAULT_THETA_AUDIO = 0.6
DEFAULT_THETA_VISUAL = 1.8
DEFAULT_WARMUP_EPOCHS = 0.9


@dataclass
class NoiseRatios:
    audio: np.ndarray
    visual: np.ndarray

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.visual = np.asarray(self.visual, dtype=np.float64)
        if self.audio.shape != self.visual.shape or self.audio.ndim != 1:
            raise DimensionError(
                f"ratio vectors must be 1-D and equal length, got {self.audio.shape}, {self.visual.shape}"
            )
        for r in (self.audio, self.visual):
            if np.any((r < 0) | (r > 1)) or not np.all(np.isfinite(r)):
                raise ValueError("noise ratios must lie in [0, 1]")

    @classmethod
    def constant(cls, value: float, num_categories: int) -> "NoiseRatios":
        return cls(np.full(num_categories, value), np.full(num_categories, value))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("category,r_audio,r_visual\n")
        for c, (a, v) in enumerate(zip(self.audio, self.visual)):
            buf.write(f"{c},{a:.6f},{v:.6f}\n")
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "NoiseRatios":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["category", "r_audio", "r_visual"]:
                raise FormatError(f"{path}: unexpected ratio CSV header {header}")
            audio, visual = [], []
            for lineno, row in enumerate(reader, start=2):
                try:
                    c, a, v = int(row[0]), float(row[1]), float(row[2])
                except (ValueError, IndexError) as exc:
                    raise FormatError(f"{path}:{lineno}: bad row {row}") from exc
                if c != len(audio):
                    raise FormatError(f"{path}:{lineno}: categories must be 0..C-1 in order")
                audio.append(a)
                visual.append(v)
        try:
            return cls(np.array(audio), np.array(visual))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc


@dataclass
class DenoiseResult:
    y_audio: np.ndarray
    y_visual: np.ndarray
    removed: set = field(default_factory=set)  # {(row, category, "audio"|"visual")}


def estimate_noise_ratios(
    pred_audio,
    pred_visual,
    labels,
    theta_audio: float = DEFAULT_THETA_AUDIO,
    theta_visual: float = DEFAULT_THETA_VISUAL,
    mean_over: str = "all",
) -> NoiseRatios:
    """Fraction of positive labels whose normalized confidence is below theta.

    Predictions of category ``c`` are divided by their mean over all videos
    (``mean_over="all"``) or over the videos labeled ``c`` only
    (``mean_over="positives"``).  Categories without positives get 0.
    """
    pa = np.asarray(pred_audio, dtype=np.float64)
    pv = np.asarray(pred_visual, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not (pa.shape == pv.shape == y.shape) or pa.ndim != 2:
        raise DimensionError(f"shapes {pa.shape}, {pv.shape}, {y.shape} must match as (N, C)")
    if pa.shape[0] == 0:
        raise ValueError("cannot estimate noise ratios from zero videos")
    if theta_audio <= 0 or theta_visual <= 0:
        raise ValueError("thresholds must be positive")
    n_pos = y.sum(axis=0)
    out = []
    for p, theta in ((pa, theta_audio), (pv, theta_visual)):
        if mean_over == "all":
            mean = p.mean(axis=0)
        elif mean_over == "positives":
            mean = (p * y).sum(axis=0) / np.maximum(n_pos, 1)
        else:
            raise ValueError(f"mean_over must be 'all' or 'positives', got {mean_over!r}")
        bad = (mean <= 0) & (n_pos > 0)
        if np.any(bad):
            raise NumericError(f"zero mean prediction for categories {np.flatnonzero(bad).tolist()}")
        safe = np.where(mean > 0, mean, 1.0)
        below = (p / safe < theta) * y
        out.append(np.where(n_pos > 0, below.sum(axis=0) / np.maximum(n_pos, 1), 0.0))
    return NoiseRatios(out[0], out[1])


def select_indices(losses, k: int, descending: bool = False) -> list[int]:
    """Indices of the ``k`` smallest (or largest) losses, ties to lower index."""
    if k < 0:
        raise ValueError("k must be non-negative")
    arr = np.asarray(losses, dtype=np.float64)
    key = -arr if descending else arr
    return np.argsort(key, kind="stable")[:k].tolist()


def warmup_factor(progress_epochs: float, warmup_epochs: float) -> float:
    if progress_epochs < 0 or warmup_epochs < 0:
        raise ValueError("progress and warm-up length must be non-negative")
    if warmup_epochs == 0:
        return 1.0
    return min(1.0, progress_epochs / warmup_epochs)


def removal_counts(ratios: np.ndarray, labels: np.ndarray, warm_factor: float) -> np.ndarray:
    """Per-category removal budget ``int(warm * r[c] * positives[c])``."""
    n_pos = np.asarray(labels).sum(axis=0)
    return np.trunc(warm_factor * np.asarray(ratios) * n_pos).astype(np.int64)


def _check(loss_a, loss_v, y, ratios, warm_factor):
    la = np.asarray(loss_a, dtype=np.float64)
    lv = np.asarray(loss_v, dtype=np.float64)
    yy = np.asarray(y).astype(np.int8)
    if not (la.shape == lv.shape == yy.shape) or yy.ndim != 2:
        raise DimensionError(f"loss/label shapes {la.shape}, {lv.shape}, {yy.shape} must match as (B, C)")
    if ratios.audio.shape[0] != yy.shape[1]:
        raise DimensionError(f"{ratios.audio.shape[0]} ratios for {yy.shape[1]} categories")
    if not 0.0 <= warm_factor <= 1.0:
        raise ValueError(f"warm_factor must lie in [0, 1], got {warm_factor}")
    return la, lv, yy


def _refine(loss_a, loss_v, y, ratios, warm_factor, joint, do_audio, do_visual):
    la, lv, yy = _check(loss_a, loss_v, y, ratios, warm_factor)
    m_a = removal_counts(ratios.audio, yy, warm_factor)
    m_v = removal_counts(ratios.visual, yy, warm_factor)
    ya, yv = kernels.refine_labels(la, lv, yy, m_a, m_v, joint, do_audio, do_visual)
    ya = np.asarray(ya, dtype=np.int8)
    yv = np.asarray(yv, dtype=np.int8)
    removed = {(int(i), int(c), "audio") for i, c in zip(*np.nonzero(yy - ya))}
    removed |= {(int(i), int(c), "visual") for i, c in zip(*np.nonzero(yy - yv))}
    return DenoiseResult(ya, yv, removed)


def jomold_step(loss_a, loss_v, y, ratios: NoiseRatios, warm_factor: float = 1.0) -> DenoiseResult:
    """Joint-modal removal; ``y`` itself is never modified."""
    return _refine(loss_a, loss_v, y, ratios, warm_factor, True, True, True)


def inmold_step(loss_a, loss_v, y, ratios: NoiseRatios, warm_factor: float = 1.0) -> DenoiseResult:
    """Intra-modal removal: highest own-modality losses, no cross check."""
    return _refine(loss_a, loss_v, y, ratios, warm_factor, False, True, True)


def single_modality_step(
    loss_a, loss_v, y, ratios: NoiseRatios, warm_factor: float = 1.0, modality: str = "audio"
) -> DenoiseResult:
    """Joint-modal removal applied to one modality only."""
    if modality not in ("audio", "visual"):
        raise ValueError(f"modality must be 'audio' or 'visual', got {modality!r}")
    return _refine(loss_a, loss_v, y, ratios, warm_factor, True,
                   modality == "audio", modality == "visual")
