"""Estimator and parser training loops, noise-ratio estimation, evaluation.

The pipeline has two separate trainings.  The estimator is trained without
cross-modal attention on the original labels, and its video-level predictions
on the training set give the noise ratios.  The parser is then trained with
the full model; in every iteration a cross-modal-free forward pass produces
per-modality losses, the selected denoising step refines the modality labels,
and the three-term loss against ``(Y_audio, Y_visual, Y)`` is optimized.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import denoiser as dn
from . import model as mdl
from . import tensorcore as tc
from .config import ExperimentConfig, parse_mode
from .errors import ConfigError, NumericError
from .metrics import ParsingReport, denoise_prf, parsing_report
from .synthgen import Dataset

log = logging.getLogger(__name__)

# seed-split streams used by a training run
_INIT_STREAM, _SHUFFLE_STREAM = 0, 1


@dataclass
class TrainResult:
    params: mdl.ModelParams
    config: mdl.ModelConfig
    epoch_losses: list[float] = field(default_factory=list)
    removed_per_epoch: list[int] = field(default_factory=list)
    # (video_id, category, modality) removed during the final epoch
    removed_final: set = field(default_factory=set)
    # number of epochs in which each triple was removed
    removal_epochs: Counter = field(default_factory=Counter)


def model_config_for(ds: Dataset, cfg: ExperimentConfig, skip_cross_modal=False) -> mdl.ModelConfig:
    d, t, c = ds.dims
    return mdl.ModelConfig(d, t, c, skip_cross_modal=skip_cross_modal,
                           positive_only=cfg.positive_only, threshold=cfg.threshold)


def _denoise_fn(mode: str):
    kind, _ = parse_mode(mode)
    if kind in ("jomold", "constant_ratio"):
        return dn.jomold_step
    if kind == "inmold":
        return dn.inmold_step
    if kind == "audio_only":
        return lambda *a: dn.single_modality_step(*a, modality="audio")
    if kind == "visual_only":
        return lambda *a: dn.single_modality_step(*a, modality="visual")
    return None


def resolve_ratios(mode: str, ratios: dn.NoiseRatios | None, num_categories: int):
    kind, rho = parse_mode(mode)
    if kind == "none":
        return None
    if kind == "constant_ratio":
        return dn.NoiseRatios.constant(rho, num_categories)
    if ratios is None:
        raise ConfigError(f"mode {mode!r} needs estimated noise ratios", key="mode")
    return ratios


def train(
    train_set: Dataset,
    cfg: ExperimentConfig,
    seed: int,
    mode: str = "none",
    ratios: dn.NoiseRatios | None = None,
    skip_cross_modal: bool = False,
    warm_fn: Callable[[float], float] | None = None,
) -> TrainResult:
    """Train a model on ``train_set``.

    ``skip_cross_modal`` drops cross-modal attention from the trained model
    (the estimator configuration).  ``warm_fn`` maps progress in epochs to the
    warm-up factor; the default is the linear ramp over
    ``cfg.denoise.warmup_epochs``.
    """
    mcfg = model_config_for(train_set, cfg, skip_cross_modal)
    ratios = resolve_ratios(mode, ratios, mcfg.num_categories)
    step_fn = _denoise_fn(mode)
    if warm_fn is None:
        warm_fn = lambda progress: dn.warmup_factor(progress, cfg.denoise.warmup_epochs)  # noqa: E731
    denoise_skip = cfg.denoise.skip_cross_modal_in_denoise or skip_cross_modal

    init_rng, shuffle_rng = tc.spawn_rngs(seed, 2)
    params = mdl.ModelParams.init(mcfg, init_rng)
    opt = mdl.Adam(params)
    result = TrainResult(params, mcfg)

    n = len(train_set)
    bs = cfg.optim.batch_size
    iters = -(-n // bs)
    labels = train_set.labels.astype(np.int8)
    for epoch in range(cfg.optim.epochs):
        lr = cfg.optim.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        total, removed_count = 0.0, 0
        final_epoch = epoch == cfg.optim.epochs - 1
        for it in range(iters):
            idx = order[it * bs:(it + 1) * bs]
            fa = train_set.audio[idx].astype(np.float64)
            fv = train_set.visual[idx].astype(np.float64)
            y = labels[idx]
            ya = yv = y
            if step_fn is not None:
                warm = warm_fn(epoch + it / iters)
                probe = mdl.forward(params, fa, fv, skip_cross_modal=denoise_skip)
                la = tc.bce_elementwise(probe.pooled_audio, y, mcfg.positive_only)
                lv = tc.bce_elementwise(probe.pooled_visual, y, mcfg.positive_only)
                res = step_fn(la, lv, y, ratios, warm)
                ya, yv = res.y_audio, res.y_visual
                removed_count += len(res.removed)
                ids = train_set.video_ids[idx]
                triples = {(int(ids[i]), c, m) for i, c, m in res.removed}
                result.removal_epochs.update(triples)
                if final_epoch:
                    result.removed_final |= triples
            losses, grads = mdl.loss_and_grads(params, fa, fv, ya, yv, y,
                                               skip_cross_modal, mcfg.positive_only)
            if not np.isfinite(losses.total):
                raise NumericError(f"non-finite training loss at epoch {epoch}, iteration {it}")
            opt.step(params, grads, lr)
            total += losses.total * len(idx)
        result.epoch_losses.append(total / n)
        result.removed_per_epoch.append(removed_count)
        log.debug("epoch %d lr %.2e loss %.4f removed %d", epoch, lr, total / n, removed_count)
    return result


def pooled_predictions(params: mdl.ModelParams, ds: Dataset, skip_cross_modal: bool,
                       chunk: int = 512):
    """Video-level audio and visual probabilities for every video of ``ds``."""
    pa, pv = [], []
    for s in range(0, len(ds), chunk):
        out = mdl.forward(params, ds.audio[s:s + chunk].astype(np.float64),
                          ds.visual[s:s + chunk].astype(np.float64), skip_cross_modal)
        pa.append(out.pooled_audio)
        pv.append(out.pooled_visual)
    return np.concatenate(pa), np.concatenate(pv)


@dataclass
class EstimatorResult:
    ratios: dn.NoiseRatios
    train: TrainResult
    cross_modal: bool


def train_estimator(train_set: Dataset, cfg: ExperimentConfig, seed: int,
                    cross_modal: bool | None = None) -> EstimatorResult:
    """Train the noise estimator and estimate per-category noise ratios.

    By default the estimator has no cross-modal attention; ``cross_modal=True``
    is the ablation that keeps it.
    """
    if cross_modal is None:
        cross_modal = cfg.denoise.estimator_cross_modal
    res = train(train_set, cfg, seed, mode="none", skip_cross_modal=not cross_modal)
    pa, pv = pooled_predictions(res.params, train_set, skip_cross_modal=not cross_modal)
    ratios = dn.estimate_noise_ratios(pa, pv, train_set.labels, cfg.denoise.theta_audio,
                                      cfg.denoise.theta_visual, cfg.denoise.mean_over)
    return EstimatorResult(ratios, res, cross_modal)


def evaluate(params: mdl.ModelParams, ds: Dataset, threshold: float = 0.5,
             removed: set | None = None, train_set: Dataset | None = None) -> ParsingReport:
    """Parsing report of the full model on ``ds``.

    With ``removed`` (a removal log) and ``train_set`` (the data it refers
    to), denoising precision/recall/F1 against injected noise is included.
    """
    pred_a, pred_v = [], []
    for s in range(0, len(ds), 512):
        a, v = mdl.predict_segments(params, ds.audio[s:s + 512].astype(np.float64),
                                    ds.visual[s:s + 512].astype(np.float64), threshold)
        pred_a.append(a)
        pred_v.append(v)
    report = parsing_report(np.concatenate(pred_a), np.concatenate(pred_v),
                            ds.seg_audio, ds.seg_visual)
    if removed is not None and train_set is not None:
        report.denoise = denoise_prf(removed, train_set.noise_ground_truth())
    return report
