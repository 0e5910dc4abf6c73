"""Audio-visual parsing metrics and denoising quality.

Predictions and ground truth are binary ``(V, T, C)`` arrays.  Scores are
macro averages over videos of per-video F1; a video with no positives in
either prediction or ground truth scores 1.0 for that event type.  Event-level
scores match maximal positive runs one-to-one at IoU >= 0.5.

Segment indices in the event-list API are 1-based and inclusive.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionError

EVENT_IOU_THRESHOLD = 0.5
TYPES = ("audio", "visual", "av", "type_at_av", "event_at_av")


def _as_videos(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DimensionError(f"expected (V, T, C) or (T, C) binary array, got {x.shape}")
    return x != 0


def _pair(pred, gt):
    p, g = _as_videos(pred), _as_videos(gt)
    if p.shape != g.shape:
        raise DimensionError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return p, g


def f1_from_counts(tp, fp, fn) -> np.ndarray:
    """Per-video F1 ``2TP / (2TP + FP + FN)``; 1.0 where all counts are zero."""
    tp, fp, fn = (np.asarray(x, dtype=np.float64) for x in (tp, fp, fn))
    den = 2 * tp + fp + fn
    return np.where(den > 0, 2 * tp / np.where(den > 0, den, 1.0), 1.0)


def segment_counts(pred, gt):
    p, g = _pair(pred, gt)
    tp = np.sum(p & g, axis=(1, 2))
    fp = np.sum(p & ~g, axis=(1, 2))
    fn = np.sum(~p & g, axis=(1, 2))
    return tp, fp, fn


def segment_f1(pred, gt) -> float:
    return float(np.mean(f1_from_counts(*segment_counts(pred, gt))))


def extract_events(binary) -> list[tuple[int, int, int]]:
    """Maximal runs of positives per category as ``(category, start, end)``."""
    x = np.asarray(binary)
    if x.ndim != 2:
        raise DimensionError(f"expected a (T, C) array, got {x.shape}")
    _, cats, starts, ends = kernels.runs_numpy(x[None])
    return [(int(c), int(s) + 1, int(e) + 1) for c, s, e in zip(cats, starts, ends)]


def rasterize_events(events, num_segments: int, num_categories: int) -> np.ndarray:
    out = np.zeros((num_segments, num_categories), dtype=np.uint8)
    for c, s, e in events:
        out[s - 1:e, c] = 1
    return out


def interval_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    return inter / ((a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter)


def match_events(pred_events, gt_events, iou_threshold: float = EVENT_IOU_THRESHOLD) -> int:
    """Number of one-to-one matches between two event lists of one video.

    Pairs must share the category and reach ``iou_threshold``; they are taken
    greedily in order of descending IoU.
    """
    cands = []
    for i, (pc, ps, pe) in enumerate(pred_events):
        for j, (gc, gs, ge) in enumerate(gt_events):
            if pc == gc:
                iou = interval_iou((ps, pe), (gs, ge))
                if iou >= iou_threshold:
                    cands.append((-iou, i, j))
    cands.sort()
    used_p, used_g, tp = set(), set(), 0
    for _, i, j in cands:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            tp += 1
    return tp


def event_counts(pred, gt, iou_threshold: float = EVENT_IOU_THRESHOLD):
    p, g = _pair(pred, gt)
    tp, n_pred, n_gt = kernels.event_match_counts(p, g, iou_threshold)
    return tp, n_pred - tp, n_gt - tp


def event_f1(pred, gt, iou_threshold: float = EVENT_IOU_THRESHOLD) -> float:
    return float(np.mean(f1_from_counts(*event_counts(pred, gt, iou_threshold))))


@dataclass
class LevelScores:
    audio: float
    visual: float
    av: float
    type_at_av: float
    event_at_av: float

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in TYPES}


def aggregate_report(audio: float, visual: float, av: float, pooled_counts) -> LevelScores:
    """Combine per-type scores.

    ``pooled_counts`` holds per-video ``(tp, fp, fn)`` summed over the audio
    and visual events; Event@AV is the macro F1 of those pooled counts.
    """
    return LevelScores(
        audio,
        visual,
        av,
        (audio + visual + av) / 3.0,
        float(np.mean(f1_from_counts(*pooled_counts))),
    )


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float


def denoise_prf(removed, gt_noise) -> dict[str, PRF]:
    """Set precision/recall/F1 of removed labels against injected noise.

    ``removed`` holds ``(video_id, category, modality)`` triples; ``gt_noise``
    is a :class:`~jomold.synthgen.NoiseGroundTruth`.
    """
    out = {}
    for modality in ("audio", "visual"):
        pred = {(v, c) for v, c, m in removed if m == modality}
        truth = set(getattr(gt_noise, modality))
        tp = len(pred & truth)
        precision = tp / len(pred) if pred else (0.0 if truth else 1.0)
        recall = tp / len(truth) if truth else (0.0 if pred else 1.0)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        out[modality] = PRF(precision, recall, f1)
    return out


@dataclass
class ParsingReport:
    segment: LevelScores
    event: LevelScores
    denoise: dict[str, PRF] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        rows = []
        for level in ("segment", "event"):
            for k, v in getattr(self, level).as_dict().items():
                rows.append((f"{level}_{k}", v))
        for modality, prf in self.denoise.items():
            rows += [
                (f"denoise_{modality}_precision", prf.precision),
                (f"denoise_{modality}_recall", prf.recall),
                (f"denoise_{modality}_f1", prf.f1),
            ]
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.rows():
            w.writerow([k, f"{v:.6f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'':<10}" + "".join(f"{h:>12}" for h in ("A", "V", "AV", "Type@AV", "Event@AV"))]
        for level in ("segment", "event"):
            s = getattr(self, level)
            lines.append(f"{level:<10}" + "".join(f"{100 * v:>12.2f}" for v in s.as_dict().values()))
        for modality, prf in self.denoise.items():
            lines.append(
                f"denoise {modality}: P={prf.precision:.3f} R={prf.recall:.3f} F1={prf.f1:.3f}"
            )
        return "\n".join(lines) + "\n"


def parsing_report(pred_audio, pred_visual, gt_audio, gt_visual,
                   iou_threshold: float = EVENT_IOU_THRESHOLD) -> ParsingReport:
    pa, ga = _pair(pred_audio, gt_audio)
    pv, gv = _pair(pred_visual, gt_visual)
    pav, gav = pa & pv, ga & gv

    seg = [segment_counts(p, g) for p, g in ((pa, ga), (pv, gv), (pav, gav))]
    evt = [event_counts(p, g, iou_threshold) for p, g in ((pa, ga), (pv, gv), (pav, gav))]

    def level(counts):
        scores = [float(np.mean(f1_from_counts(*c))) for c in counts]
        pooled = tuple(counts[0][k] + counts[1][k] for k in range(3))
        return aggregate_report(*scores, pooled)

    return ParsingReport(level(seg), level(evt))
