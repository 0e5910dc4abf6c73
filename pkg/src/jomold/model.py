"""Attention-based audio-visual parsing network with an analytic backward pass.

Feature enhancement uses parameter-free scaled dot-product attention (divisor
equal to the feature dimension).  A classifier shared by both modalities maps
enhanced segment features to per-category probabilities; two more linear
heads produce temporal attention logits (softmax over segments) and modality
attention logits (softmax over the audio/visual pair).  Pooled audio, visual
and video probabilities are convex combinations of segment probabilities.

All functions accept a single video ``(T, D)`` or a batch ``(B, T, D)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, DimensionError, FormatError, NumericError

BLOCKS = (
    "classifier_w",
    "classifier_b",
    "temporal_w",
    "temporal_b",
    "modality_w",
    "modality_b",
)
CHECKPOINT_MAGIC = b"JMCK1"


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    num_segments: int
    num_categories: int
    skip_cross_modal: bool = False
    positive_only: bool = False
    threshold: float = 0.5

    def __post_init__(self):
        for name in ("feature_dim", "num_segments", "num_categories"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass
class ModelParams:
    classifier_w: np.ndarray
    classifier_b: np.ndarray
    temporal_w: np.ndarray
    temporal_b: np.ndarray
    modality_w: np.ndarray
    modality_b: np.ndarray

    @staticmethod
    def shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, c = config.feature_dim, config.num_categories
        return {
            "classifier_w": (d, c),
            "classifier_b": (c,),
            "temporal_w": (d, c),
            "temporal_b": (c,),
            "modality_w": (d, c),
            "modality_b": (c,),
        }

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        blocks = {}
        std = 1.0 / np.sqrt(config.feature_dim)
        for name, shape in cls.shapes(config).items():
            if name.endswith("_w"):
                blocks[name] = rng.normal(0.0, std, size=shape)
            else:
                blocks[name] = np.zeros(shape)
        return cls(**blocks)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls(**{k: np.zeros(s) for k, s in cls.shapes(config).items()})

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCKS}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.blocks().items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in BLOCKS])

    @classmethod
    def from_flat(cls, config: ModelConfig, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        shapes = cls.shapes(config)
        expected = sum(int(np.prod(s)) for s in shapes.values())
        if vec.shape != (expected,):
            raise DimensionError(f"flat vector has shape {vec.shape}, expected ({expected},)")
        out, pos = {}, 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            out[name] = vec[pos:pos + n].reshape(shape).copy()
            pos += n
        return cls(**out)


@dataclass
class ForwardOutput:
    seg_audio: np.ndarray  # (..., T, C)
    seg_visual: np.ndarray
    temporal_audio: np.ndarray  # (..., T, C), sums to 1 over T
    temporal_visual: np.ndarray
    modality_weights: np.ndarray  # (..., T, 2, C), sums to 1 over the pair
    pooled_audio: np.ndarray  # (..., C)
    pooled_visual: np.ndarray
    pooled_video: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


@dataclass
class BatchLosses:
    audio: np.ndarray  # (B, C) elementwise BCE
    visual: np.ndarray
    video: np.ndarray
    total: float


def _check_features(fa: np.ndarray, fv: np.ndarray) -> None:
    if fa.shape != fv.shape or fa.ndim not in (2, 3):
        raise DimensionError(
            f"audio features {fa.shape} and visual features {fv.shape} must share "
            "a (T, D) or (B, T, D) shape"
        )


def _enhance(fa, fv, skip_cross_modal):
    d = fa.shape[-1]
    sa_a, w_aa = tc.attention(fa, fa, fa, d)
    sa_v, w_vv = tc.attention(fv, fv, fv, d)
    ha = fa + sa_a
    hv = fv + sa_v
    cache = {"w_aa": w_aa, "w_vv": w_vv}
    if not skip_cross_modal:
        ca_a, w_av = tc.attention(fa, fv, fv, d)
        ca_v, w_va = tc.attention(fv, fa, fa, d)
        ha = ha + ca_a
        hv = hv + ca_v
        cache.update(w_av=w_av, w_va=w_va)
    return ha, hv, cache


def enhance_features(fa, fv, skip_cross_modal: bool = False):
    """Residual self-attention (plus cross-modal attention unless skipped)."""
    fa = np.asarray(fa, dtype=np.float64)
    fv = np.asarray(fv, dtype=np.float64)
    _check_features(fa, fv)
    ha, hv, _ = _enhance(fa, fv, skip_cross_modal)
    return ha, hv


def attentive_pool(seg_a, seg_v, w_a, w_v, w_av):
    """Pool segment probabilities into audio, visual and video probabilities.

    The video-level weights ``w_av[t, m] * w_m[t]`` are renormalized over
    (t, m) so the video probability is a convex combination of segment
    probabilities.  Returns ``(p_a, p_v, p, den)``.
    """
    p_a = np.sum(w_a * seg_a, axis=-2)
    p_v = np.sum(w_v * seg_v, axis=-2)
    m0 = w_av[..., 0, :] * w_a
    m1 = w_av[..., 1, :] * w_v
    den = np.sum(m0 + m1, axis=-2)
    p = np.sum(m0 * seg_a + m1 * seg_v, axis=-2) / den
    return p_a, p_v, p, den


def forward(params: ModelParams, fa, fv, skip_cross_modal: bool = False) -> ForwardOutput:
    fa = np.asarray(fa, dtype=np.float64)
    fv = np.asarray(fv, dtype=np.float64)
    _check_features(fa, fv)
    if fa.shape[-1] != params.classifier_w.shape[0]:
        raise DimensionError(
            f"feature dim {fa.shape[-1]} != model dim {params.classifier_w.shape[0]}"
        )
    ha, hv, cache = _enhance(fa, fv, skip_cross_modal)

    seg_a = tc.sigmoid(ha @ params.classifier_w + params.classifier_b)
    seg_v = tc.sigmoid(hv @ params.classifier_w + params.classifier_b)
    w_a = tc.softmax(ha @ params.temporal_w + params.temporal_b, axis=-2)
    w_v = tc.softmax(hv @ params.temporal_w + params.temporal_b, axis=-2)
    u = np.stack(
        [ha @ params.modality_w + params.modality_b,
         hv @ params.modality_w + params.modality_b],
        axis=-2,
    )
    w_av = tc.softmax(u, axis=-2)
    p_a, p_v, p, den = attentive_pool(seg_a, seg_v, w_a, w_v, w_av)

    cache.update(fa=fa, fv=fv, ha=ha, hv=hv, den=den, skip=skip_cross_modal)
    return ForwardOutput(seg_a, seg_v, w_a, w_v, w_av, p_a, p_v, p, cache)


def forward_video(params: ModelParams, fa, fv, skip_cross_modal: bool = False) -> ForwardOutput:
    """Single-video forward pass; ``fa`` and ``fv`` are ``(T, D)``."""
    fa = np.asarray(fa, dtype=np.float64)
    if fa.ndim != 2:
        raise DimensionError(f"expected (T, D) features, got {fa.shape}")
    return forward(params, fa, fv, skip_cross_modal)


def _labels(y, shape, name):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != shape:
        raise DimensionError(f"{name} has shape {y.shape}, expected {shape}")
    return y


def batch_losses(
    params: ModelParams,
    fa,
    fv,
    y_audio,
    y_visual,
    y_video,
    skip_cross_modal: bool = False,
    positive_only: bool = False,
    out: ForwardOutput | None = None,
) -> BatchLosses:
    """Elementwise BCE of pooled audio/visual/video probabilities.

    ``total`` is the batch mean of the category-summed three terms.
    """
    if out is None:
        out = forward(params, fa, fv, skip_cross_modal)
    shape = out.pooled_audio.shape
    la = tc.bce_elementwise(out.pooled_audio, _labels(y_audio, shape, "audio labels"), positive_only)
    lv = tc.bce_elementwise(out.pooled_visual, _labels(y_visual, shape, "visual labels"), positive_only)
    ls = tc.bce_elementwise(out.pooled_video, _labels(y_video, shape, "video labels"), positive_only)
    b = shape[0] if len(shape) == 2 else 1
    total = float((la.sum() + lv.sum() + ls.sum()) / b)
    return BatchLosses(la, lv, ls, total)


def _sum_lead(x):
    return x.reshape(-1, x.shape[-1]).sum(axis=0)


def _outer(h, g):
    # sum over all leading axes of h^T g
    return h.reshape(-1, h.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def loss_and_grads(
    params: ModelParams,
    fa,
    fv,
    y_audio,
    y_visual,
    y_video,
    skip_cross_modal: bool = False,
    positive_only: bool = False,
    feature_grads: bool = False,
):
    """Total loss with its gradient w.r.t. every parameter block.

    With ``feature_grads`` the gradients w.r.t. the audio and visual input
    features are returned as well (they flow through the attention blocks).
    """
    out = forward(params, fa, fv, skip_cross_modal)
    losses = batch_losses(params, fa, fv, y_audio, y_visual, y_video,
                          positive_only=positive_only, out=out)
    shape = out.pooled_audio.shape
    b = shape[0] if len(shape) == 2 else 1
    ya = np.asarray(y_audio, dtype=np.float64)
    yv = np.asarray(y_visual, dtype=np.float64)
    y = np.asarray(y_video, dtype=np.float64)

    g_pa = tc.bce_grad(out.pooled_audio, ya, positive_only) / b
    g_pv = tc.bce_grad(out.pooled_visual, yv, positive_only) / b
    g_p = tc.bce_grad(out.pooled_video, y, positive_only) / b

    seg_a, seg_v = out.seg_audio, out.seg_visual
    w_a, w_v = out.temporal_audio, out.temporal_visual
    wav0 = out.modality_weights[..., 0, :]
    wav1 = out.modality_weights[..., 1, :]
    den = out.cache["den"]

    g_num = (g_p / den)[..., None, :]
    g_den = (-g_p * out.pooled_video / den)[..., None, :]
    g_pa_t = g_pa[..., None, :]
    g_pv_t = g_pv[..., None, :]

    g_seg_a = g_pa_t * w_a + g_num * wav0 * w_a
    g_seg_v = g_pv_t * w_v + g_num * wav1 * w_v
    g_wa = g_pa_t * seg_a + g_num * wav0 * seg_a + g_den * wav0
    g_wv = g_pv_t * seg_v + g_num * wav1 * seg_v + g_den * wav1
    g_wav = np.stack([g_num * w_a * seg_a + g_den * w_a,
                      g_num * w_v * seg_v + g_den * w_v], axis=-2)

    g_sa = g_seg_a * seg_a * (1.0 - seg_a)
    g_sv = g_seg_v * seg_v * (1.0 - seg_v)
    g_za = tc.softmax_backward(w_a, g_wa, axis=-2)
    g_zv = tc.softmax_backward(w_v, g_wv, axis=-2)
    g_u = tc.softmax_backward(out.modality_weights, g_wav, axis=-2)
    g_ua, g_uv = g_u[..., 0, :], g_u[..., 1, :]

    ha, hv = out.cache["ha"], out.cache["hv"]
    grads = {
        "classifier_w": _outer(ha, g_sa) + _outer(hv, g_sv),
        "classifier_b": _sum_lead(g_sa) + _sum_lead(g_sv),
        "temporal_w": _outer(ha, g_za) + _outer(hv, g_zv),
        "temporal_b": _sum_lead(g_za) + _sum_lead(g_zv),
        "modality_w": _outer(ha, g_ua) + _outer(hv, g_uv),
        "modality_b": _sum_lead(g_ua) + _sum_lead(g_uv),
    }
    if not feature_grads:
        return losses, grads

    g_ha = (g_sa @ params.classifier_w.T + g_za @ params.temporal_w.T
            + g_ua @ params.modality_w.T)
    g_hv = (g_sv @ params.classifier_w.T + g_zv @ params.temporal_w.T
            + g_uv @ params.modality_w.T)
    return losses, grads, _enhance_backward(out.cache, g_ha, g_hv)


def _enhance_backward(cache, g_ha, g_hv):
    fa, fv = cache["fa"], cache["fv"]
    d = fa.shape[-1]
    gq, gk, gv = tc.attention_backward(fa, fa, fa, cache["w_aa"], d, g_ha)
    g_fa = g_ha + gq + gk + gv
    gq, gk, gv = tc.attention_backward(fv, fv, fv, cache["w_vv"], d, g_hv)
    g_fv = g_hv + gq + gk + gv
    if not cache["skip"]:
        gq, gk, gv = tc.attention_backward(fa, fv, fv, cache["w_av"], d, g_ha)
        g_fa = g_fa + gq
        g_fv = g_fv + gk + gv
        gq, gk, gv = tc.attention_backward(fv, fa, fa, cache["w_va"], d, g_hv)
        g_fv = g_fv + gq
        g_fa = g_fa + gk + gv
    return g_fa, g_fv


class Adam:
    """Adam with bias correction; the learning rate is supplied per step."""

    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.blocks().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.blocks().items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> ModelParams:
        for name in BLOCKS:
            if not np.all(np.isfinite(grads[name])):
                raise NumericError(f"non-finite gradient in parameter block {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in BLOCKS:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = getattr(params, name)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def backward_and_step(
    params: ModelParams,
    fa,
    fv,
    y_audio,
    y_visual,
    y_video,
    optimizer: Adam,
    lr: float,
    skip_cross_modal: bool = False,
    positive_only: bool = False,
):
    """One optimizer step on a batch; returns ``(params, losses)``."""
    losses, grads = loss_and_grads(params, fa, fv, y_audio, y_visual, y_video,
                                   skip_cross_modal, positive_only)
    optimizer.step(params, grads, lr)
    return params, losses


def predict_segments(params: ModelParams, fa, fv, threshold: float = 0.5):
    """Binary audio and visual segment predictions from the full model."""
    out = forward(params, fa, fv, skip_cross_modal=False)
    return out.seg_audio >= threshold, out.seg_visual >= threshold


def save_checkpoint(path, config: ModelConfig, params: ModelParams) -> None:
    """Write ``JMCK1`` checkpoint.

    Layout (little endian): magic, ``u32`` D, T, C, ``u32`` block count,
    ``u32`` size of every block in :data:`BLOCKS` order, then the blocks as
    ``f64``.
    """
    blocks = [np.ascontiguousarray(getattr(params, n), dtype="<f8") for n in BLOCKS]
    header = struct.pack("<III", config.feature_dim, config.num_segments, config.num_categories)
    header += struct.pack("<I", len(blocks))
    header += struct.pack(f"<{len(blocks)}I", *[b.size for b in blocks])
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header)
        for b in blocks:
            fh.write(b.tobytes())


def load_checkpoint(path) -> tuple[tuple[int, int, int], dict[str, np.ndarray]]:
    """Read a checkpoint; returns ``((D, T, C), blocks)``."""
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:5]!r}")
    try:
        d, t, c, n = struct.unpack_from("<IIII", raw, 5)
        if n != len(BLOCKS):
            raise FormatError(f"{path}: expected {len(BLOCKS)} blocks, found {n}")
        sizes = struct.unpack_from(f"<{n}I", raw, 21)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    try:
        shapes = ModelParams.shapes(ModelConfig(d, t, c))
    except ConfigError as exc:
        raise FormatError(f"{path}: invalid dimensions in header ({exc})") from exc
    pos = 21 + 4 * n
    blocks = {}
    for name, size in zip(BLOCKS, sizes):
        if size != int(np.prod(shapes[name])):
            raise FormatError(f"{path}: block {name} has {size} values, inconsistent with D={d}, C={c}")
        chunk = raw[pos:pos + 8 * size]
        if len(chunk) != 8 * size:
            raise FormatError(f"{path}: truncated block {name}")
        blocks[name] = np.frombuffer(chunk, dtype="<f8").reshape(shapes[name]).astype(np.float64)
        pos += 8 * size
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return (d, t, c), blocks


def load_params(path, config: ModelConfig) -> ModelParams:
    """Load a checkpoint and verify it matches ``config``."""
    dims, blocks = load_checkpoint(path)
    want = (config.feature_dim, config.num_segments, config.num_categories)
    if dims != want:
        raise DimensionError(f"checkpoint dims (D, T, C)={dims} do not match dataset {want}")
    return ModelParams(**blocks)
