"""Synthetic weakly-labeled audio-visual parsing data with known label noise.

Every category owns a unit-norm audio prototype and a unit-norm visual
prototype.  A video holds a few events; each event is present in both
tracks, in the audio track only, or in the visual track only, and occupies
a contiguous interval in every track it is present in.  A segment feature is
the sum of the prototypes of the events active there plus Gaussian noise.

The video-level label is the union of the two tracks, so an audio-only event
is a *visual* noisy label and a visual-only event is an *audio* noisy label.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

from .errors import ConfigError, FormatError
from .tensorcore import make_rng, spawn_rngs

DATASET_MAGIC = b"AVPD1"
MODALITIES = ("audio", "visual")

Rates = Union[float, Sequence[float]]


@dataclass(frozen=True)
class GeneratorConfig:
    num_videos: int = 2000
    num_segments: int = 10
    feature_dim: int = 32
    num_categories: int = 10
    # per-category probability mass of each presence pattern; their sum is
    # the category's relative frequency
    p_both: Rates = 0.13
    p_audio_only: Rates = 0.05
    p_visual_only: Rates = 0.02
    events_per_video: tuple[int, int] = (1, 3)
    # interval length ranges for audio-visual events and for events present in
    # a single modality
    event_length: tuple[int, int] = (2, 10)
    single_event_length: tuple[int, int] = (2, 10)
    noise_sigma: float = 0.5
    seed: int = 0

    def rates(self) -> np.ndarray:
        """``(C, 3)`` array of (both, audio only, visual only) masses."""
        cols = []
        for name in ("p_both", "p_audio_only", "p_visual_only"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.ndim == 0:
                v = np.full(self.num_categories, float(v))
            if v.shape != (self.num_categories,):
                raise ConfigError(f"{name} needs 1 or {self.num_categories} values, got {v.shape}", key=name)
            cols.append(v)
        return np.stack(cols, axis=1)

    def validate(self) -> None:
        for name in ("num_videos", "num_segments", "feature_dim", "num_categories"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1", key=name)
        r = self.rates()
        if np.any(r < 0):
            raise ConfigError("presence probabilities must be non-negative")
        over = np.flatnonzero(r.sum(axis=1) > 1 + 1e-12)
        if over.size:
            raise ConfigError(f"presence probabilities sum above 1 for categories {over.tolist()}")
        if r.sum() <= 0:
            raise ConfigError("at least one category needs positive presence mass")
        lo, hi = self.events_per_video
        if not 1 <= lo <= hi:
            raise ConfigError(f"events_per_video must satisfy 1 <= lo <= hi, got {self.events_per_video}",
                              key="events_per_video")
        for name in ("event_length", "single_event_length"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi <= self.num_segments:
                raise ConfigError(f"{name} must satisfy 1 <= lo <= hi <= T, got {(lo, hi)}", key=name)
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative", key="noise_sigma")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, (tuple, np.ndarray)):
                d[k] = list(np.asarray(v).tolist())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}", key=sorted(unknown)[0])
        d = dict(d)
        for k in ("events_per_video", "event_length", "single_event_length"):
            if k in d:
                d[k] = tuple(int(x) for x in d[k])
        for k in ("p_both", "p_audio_only", "p_visual_only"):
            if k in d and isinstance(d[k], list):
                d[k] = tuple(float(x) for x in d[k])
        return cls(**d)


@dataclass(frozen=True)
class SyntheticVideo:
    audio_features: np.ndarray  # (T, D)
    visual_features: np.ndarray
    video_label: np.ndarray  # (C,)
    gt_audio_label: np.ndarray
    gt_visual_label: np.ndarray
    gt_audio_segments: np.ndarray  # (T, C)
    gt_visual_segments: np.ndarray


@dataclass(frozen=True)
class NoiseGroundTruth:
    """Noisy (video_id, category) pairs per modality."""

    audio: frozenset
    visual: frozenset

    def is_empty(self) -> bool:
        return not self.audio and not self.visual


@dataclass
class Dataset:
    audio: np.ndarray  # (N, T, D) float32
    visual: np.ndarray
    labels: np.ndarray  # (N, C) uint8
    gt_audio: np.ndarray  # (N, C) uint8
    gt_visual: np.ndarray
    seg_audio: np.ndarray  # (N, T, C) uint8
    seg_visual: np.ndarray
    video_ids: np.ndarray  # (N,) int64, stable across splits
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        """``(D, T, C)``."""
        return self.audio.shape[2], self.audio.shape[1], self.labels.shape[1]

    def video(self, i: int) -> SyntheticVideo:
        return SyntheticVideo(self.audio[i], self.visual[i], self.labels[i], self.gt_audio[i],
                              self.gt_visual[i], self.seg_audio[i], self.seg_visual[i])

    def videos(self) -> Iterator[SyntheticVideo]:
        for i in range(len(self)):
            yield self.video(i)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.audio[idx], self.visual[idx], self.labels[idx], self.gt_audio[idx],
                       self.gt_visual[idx], self.seg_audio[idx], self.seg_visual[idx],
                       self.video_ids[idx], dict(self.meta))

    def noise_ground_truth(self) -> NoiseGroundTruth:
        audio = self.labels.astype(bool) & ~self.gt_audio.astype(bool)
        visual = self.labels.astype(bool) & ~self.gt_visual.astype(bool)
        ids = self.video_ids
        return NoiseGroundTruth(
            frozenset((int(ids[i]), int(c)) for i, c in zip(*np.nonzero(audio))),
            frozenset((int(ids[i]), int(c)) for i, c in zip(*np.nonzero(visual))),
        )

    def true_noise_ratios(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-category fraction of positive labels that are audio / visual noise."""
        y = self.labels.astype(bool)
        n_pos = y.sum(axis=0)
        denom = np.maximum(n_pos, 1)
        ra = (y & ~self.gt_audio.astype(bool)).sum(axis=0) / denom
        rv = (y & ~self.gt_visual.astype(bool)).sum(axis=0) / denom
        return np.where(n_pos > 0, ra, 0.0), np.where(n_pos > 0, rv, 0.0)


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def category_prototypes(config: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """The ``(C, D)`` audio and visual prototypes used for ``config.seed``."""
    rng = spawn_rngs(config.seed, 1)[0]
    proto_a = _unit_rows(rng, config.num_categories, config.feature_dim)
    proto_v = _unit_rows(rng, config.num_categories, config.feature_dim)
    return proto_a, proto_v


def generate_dataset(config: GeneratorConfig) -> Dataset:
    config.validate()
    n, t_count, d, c_count = (config.num_videos, config.num_segments,
                              config.feature_dim, config.num_categories)
    rates = config.rates()
    mass = rates.sum(axis=1)
    cat_p = mass / mass.sum()
    pattern_p = np.where(mass[:, None] > 0, rates / np.where(mass > 0, mass, 1.0)[:, None], 0.0)
    n_active = int(np.count_nonzero(mass))
    lo_k, hi_k = config.events_per_video
    lengths = (config.event_length, config.single_event_length)

    # child 0 draws the prototypes, child i + 1 draws video i
    rngs = spawn_rngs(config.seed, n + 1)
    proto_a, proto_v = category_prototypes(config)

    audio = np.zeros((n, t_count, d))
    visual = np.zeros((n, t_count, d))
    seg_a = np.zeros((n, t_count, c_count), dtype=np.uint8)
    seg_v = np.zeros((n, t_count, c_count), dtype=np.uint8)

    for i in range(n):
        rng = rngs[i + 1]
        k = min(int(rng.integers(lo_k, hi_k + 1)), n_active)
        cats = rng.choice(c_count, size=k, replace=False, p=cat_p)
        for c in cats:
            pattern = int(rng.choice(3, p=pattern_p[c]))
            present = (pattern in (0, 1), pattern in (0, 2))
            lo_len, hi_len = lengths[pattern != 0]
            for m, seg in enumerate((seg_a, seg_v)):
                if not present[m]:
                    continue
                length = int(rng.integers(lo_len, hi_len + 1))
                start = int(rng.integers(0, t_count - length + 1))
                seg[i, start:start + length, c] = 1
        audio[i] = seg_a[i] @ proto_a + config.noise_sigma * rng.standard_normal((t_count, d))
        visual[i] = seg_v[i] @ proto_v + config.noise_sigma * rng.standard_normal((t_count, d))

    gt_a = seg_a.max(axis=1)
    gt_v = seg_v.max(axis=1)
    meta = {"seed": config.seed, "generator": config.to_dict()}
    return Dataset(
        audio.astype(np.float32),
        visual.astype(np.float32),
        (gt_a | gt_v).astype(np.uint8),
        gt_a,
        gt_v,
        seg_a,
        seg_v,
        np.arange(n, dtype=np.int64),
        meta,
    )


def split_dataset(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``round(fraction * N)`` videos train."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ConfigError(f"split of {n} videos at {train_fraction} leaves an empty side")
    perm = make_rng(seed).permutation(n)
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


# --- AVPD1 file format -------------------------------------------------------
#
#   magic "AVPD1"
#   u32 header length, header as UTF-8 JSON (N, T, D, C, seed, generator, video_ids)
#   f32 audio features (N*T*D), f32 visual features (N*T*D)
#   u8 labels (N*C), u8 gt audio labels, u8 gt visual labels,
#   u8 gt audio segments (N*T*C), u8 gt visual segments
#   u32 noise pair count, then per pair: u32 video_id, u16 category, u8 modality
#
# Everything little endian.

_PAIR = struct.Struct("<IHB")


def _noise_pairs(ds: Dataset) -> list[tuple[int, int, int]]:
    gt = ds.noise_ground_truth()
    pairs = [(v, c, 0) for v, c in gt.audio] + [(v, c, 1) for v, c in gt.visual]
    return sorted(pairs)


def dataset_bytes(ds: Dataset) -> bytes:
    n = len(ds)
    d, t, c = ds.dims
    header = {
        "N": n, "T": t, "D": d, "C": c,
        "seed": ds.meta.get("seed"),
        "generator": ds.meta.get("generator"),
        "video_ids": [int(x) for x in ds.video_ids],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [DATASET_MAGIC, struct.pack("<I", len(hbytes)), hbytes]
    parts.append(np.ascontiguousarray(ds.audio, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(ds.visual, dtype="<f4").tobytes())
    for arr in (ds.labels, ds.gt_audio, ds.gt_visual, ds.seg_audio, ds.seg_visual):
        parts.append(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())
    pairs = _noise_pairs(ds)
    parts.append(struct.pack("<I", len(pairs)))
    parts.extend(_PAIR.pack(*p) for p in pairs)
    return b"".join(parts)


def write_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:5] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad dataset magic {raw[:5]!r}")
    try:
        (hlen,) = struct.unpack_from("<I", raw, 5)
        header = json.loads(raw[9:9 + hlen].decode("utf-8"))
        n, t, d, c = (int(header[k]) for k in ("N", "T", "D", "C"))
        ids = np.asarray(header["video_ids"], dtype=np.int64)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    if ids.shape != (n,):
        raise FormatError(f"{path}: header lists {ids.size} video ids for N={n}")
    pos = 9 + hlen

    def take(count, dtype, shape):
        nonlocal pos
        size = count * np.dtype(dtype).itemsize
        chunk = raw[pos:pos + size]
        if len(chunk) != size:
            raise FormatError(f"{path}: file truncated at byte {pos}")
        pos += size
        return np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()

    audio = take(n * t * d, "<f4", (n, t, d))
    visual = take(n * t * d, "<f4", (n, t, d))
    labels = take(n * c, np.uint8, (n, c))
    gt_a = take(n * c, np.uint8, (n, c))
    gt_v = take(n * c, np.uint8, (n, c))
    seg_a = take(n * t * c, np.uint8, (n, t, c))
    seg_v = take(n * t * c, np.uint8, (n, t, c))
    (n_pairs,) = struct.unpack_from("<I", take(4, np.uint8, (4,)).tobytes())
    pairs = [_PAIR.unpack(take(_PAIR.size, np.uint8, (_PAIR.size,)).tobytes()) for _ in range(n_pairs)]
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")

    ds = Dataset(audio, visual, labels, gt_a, gt_v, seg_a, seg_v, ids,
                 {"seed": header.get("seed"), "generator": header.get("generator")})
    if np.any(labels != (gt_a | gt_v)):
        raise FormatError(f"{path}: video labels are not the union of the modality labels")
    if np.any(gt_a != seg_a.max(axis=1)) or np.any(gt_v != seg_v.max(axis=1)):
        raise FormatError(f"{path}: modality labels disagree with segment labels")
    if sorted(pairs) != _noise_pairs(ds):
        raise FormatError(f"{path}: noise pair list inconsistent with labels")
    return ds
