"""Loop-heavy kernels with a numba path and a vectorized numpy path.

``refine_labels`` does per-category loss-ranked label removal for a batch;
``event_match_counts`` does run extraction and one-to-one IoU matching for
every (video, category).  The public names bind to the numba versions unless
numba is missing or ``JOMOLD_DISABLE_NUMBA`` is set; both implementations are
always importable under ``*_loop`` / ``*_numpy`` names for comparison.
"""

import numpy as np

from ._accel import HAVE_NUMBA, njit


def refine_labels_loop(loss_a, loss_v, y, m_a, m_v, joint, do_audio, do_visual):
    """Remove positives per category by loss ranking.

    For category ``c`` the candidates are the positive rows of ``y[:, c]``.
    Audio removal takes the ``m_a[c]`` highest audio losses; in joint mode it
    keeps only those also among the ``m_a[c]`` lowest visual losses.  Visual
    removal is symmetric.  Ties go to the lower row index.
    """
    b, c_count = y.shape
    ya = y.copy()
    yv = y.copy()
    for c in range(c_count):
        n_pos = 0
        for i in range(b):
            if y[i, c] != 0:
                n_pos += 1
        if n_pos == 0:
            continue
        idx = np.empty(n_pos, dtype=np.int64)
        k = 0
        for i in range(b):
            if y[i, c] != 0:
                idx[k] = i
                k += 1
        la = np.empty(n_pos)
        lv = np.empty(n_pos)
        for j in range(n_pos):
            la[j] = loss_a[idx[j], c]
            lv[j] = loss_v[idx[j], c]
        asc_a = np.argsort(la, kind="mergesort")
        asc_v = np.argsort(lv, kind="mergesort")
        desc_a = np.argsort(-la, kind="mergesort")
        desc_v = np.argsort(-lv, kind="mergesort")
        for modality in range(2):
            if modality == 0:
                if not do_audio:
                    continue
                m = min(m_a[c], n_pos)
                high, low, target = desc_a, asc_v, ya
            else:
                if not do_visual:
                    continue
                m = min(m_v[c], n_pos)
                high, low, target = desc_v, asc_a, yv
            if m <= 0:
                continue
            in_low = np.zeros(n_pos, dtype=np.bool_)
            for j in range(m):
                in_low[low[j]] = True
            for j in range(m):
                pos = high[j]
                if (not joint) or in_low[pos]:
                    target[idx[pos], c] = 0
    return ya, yv


def refine_labels_numpy(loss_a, loss_v, y, m_a, m_v, joint, do_audio, do_visual):
    ya = y.copy()
    yv = y.copy()
    for c in range(y.shape[1]):
        idx = np.flatnonzero(y[:, c])
        if idx.size == 0:
            continue
        la = loss_a[idx, c]
        lv = loss_v[idx, c]
        for own, other, m, target, enabled in (
            (la, lv, m_a[c], ya, do_audio),
            (lv, la, m_v[c], yv, do_visual),
        ):
            m = min(int(m), idx.size)
            if not enabled or m <= 0:
                continue
            high = np.argsort(-own, kind="stable")[:m]
            if joint:
                low = np.argsort(other, kind="stable")[:m]
                high = high[np.isin(high, low)]
            target[idx[high], c] = 0
    return ya, yv


def event_match_counts_loop(pred, gt, iou_threshold):
    """Per-video ``(tp, n_pred_events, n_gt_events)`` for ``(V, T, C)`` inputs.

    Events are maximal runs of positives within a category.  Matching is
    greedy by descending IoU (ties: lower pred run, then lower gt run),
    one-to-one, and only for pairs with IoU >= ``iou_threshold``.
    """
    n_vid, t_count, c_count = pred.shape
    tp = np.zeros(n_vid, dtype=np.int64)
    n_pred = np.zeros(n_vid, dtype=np.int64)
    n_gt = np.zeros(n_vid, dtype=np.int64)
    ps = np.empty(t_count, dtype=np.int64)
    pe = np.empty(t_count, dtype=np.int64)
    gs = np.empty(t_count, dtype=np.int64)
    ge = np.empty(t_count, dtype=np.int64)
    for v in range(n_vid):
        for c in range(c_count):
            np_runs = 0
            prev = False
            for t in range(t_count):
                cur = pred[v, t, c] != 0
                if cur and not prev:
                    ps[np_runs] = t
                if prev and not cur:
                    pe[np_runs] = t - 1
                    np_runs += 1
                prev = cur
            if prev:
                pe[np_runs] = t_count - 1
                np_runs += 1
            ng_runs = 0
            prev = False
            for t in range(t_count):
                cur = gt[v, t, c] != 0
                if cur and not prev:
                    gs[ng_runs] = t
                if prev and not cur:
                    ge[ng_runs] = t - 1
                    ng_runs += 1
                prev = cur
            if prev:
                ge[ng_runs] = t_count - 1
                ng_runs += 1
            n_pred[v] += np_runs
            n_gt[v] += ng_runs
            if np_runs == 0 or ng_runs == 0:
                continue
            iou = np.zeros((np_runs, ng_runs))
            for i in range(np_runs):
                for j in range(ng_runs):
                    inter = min(pe[i], ge[j]) - max(ps[i], gs[j]) + 1
                    if inter > 0:
                        union = (pe[i] - ps[i] + 1) + (ge[j] - gs[j] + 1) - inter
                        iou[i, j] = inter / union
            used_p = np.zeros(np_runs, dtype=np.bool_)
            used_g = np.zeros(ng_runs, dtype=np.bool_)
            while True:
                best = -1.0
                bi = -1
                bj = -1
                for i in range(np_runs):
                    if used_p[i]:
                        continue
                    for j in range(ng_runs):
                        if used_g[j]:
                            continue
                        if iou[i, j] >= iou_threshold and iou[i, j] > best:
                            best = iou[i, j]
                            bi = i
                            bj = j
                if bi < 0:
                    break
                used_p[bi] = True
                used_g[bj] = True
                tp[v] += 1
    return tp, n_pred, n_gt


def runs_numpy(x):
    """Maximal positive runs of a ``(V, T, C)`` array.

    Returns ``(video, category, start, end)`` arrays, 0-based and inclusive,
    ordered by video, category, start.
    """
    x = np.asarray(x) != 0
    n_vid, t_count, c_count = x.shape
    padded = np.zeros((n_vid, t_count + 2, c_count), dtype=np.int8)
    padded[:, 1:-1, :] = x
    d = np.diff(padded, axis=1)
    # transpose so nonzero() enumerates in (video, category, time) order
    sv, sc, st = np.nonzero(np.transpose(d == 1, (0, 2, 1)))
    _, _, et = np.nonzero(np.transpose(d == -1, (0, 2, 1)))
    return sv, sc, st, et - 1


def event_match_counts_numpy(pred, gt, iou_threshold):
    n_vid, _, c_count = pred.shape
    pv, pc, pst, pen = runs_numpy(pred)
    gv, gc, gst, gen = runs_numpy(gt)
    n_pred = np.bincount(pv, minlength=n_vid).astype(np.int64)
    n_gt = np.bincount(gv, minlength=n_vid).astype(np.int64)
    tp = np.zeros(n_vid, dtype=np.int64)
    if pv.size == 0 or gv.size == 0:
        return tp, n_pred, n_gt

    # candidate (pred run, gt run) pairs sharing video and category
    pkey = pv * c_count + pc
    gkey = gv * c_count + gc
    lo = np.searchsorted(gkey, pkey, side="left")
    hi = np.searchsorted(gkey, pkey, side="right")
    counts = hi - lo
    pi = np.repeat(np.arange(pkey.size), counts)
    offsets = np.arange(pi.size) - np.repeat(np.cumsum(counts) - counts, counts)
    gi = np.repeat(lo, counts) + offsets
    inter = np.minimum(pen[pi], gen[gi]) - np.maximum(pst[pi], gst[gi]) + 1
    inter = np.maximum(inter, 0)
    union = (pen[pi] - pst[pi] + 1) + (gen[gi] - gst[gi] + 1) - inter
    iou = inter / union
    ok = iou >= iou_threshold
    if iou_threshold >= 0.5:
        # runs in one category are disjoint and non-adjacent, so at IoU >= 0.5
        # every run has at most one partner: qualifying pairs are the matching
        np.add.at(tp, pv[pi[ok]], 1)
        return tp, n_pred, n_gt
    pi, gi, iou = pi[ok], gi[ok], iou[ok]
    order = np.lexsort((gi, pi, -iou))
    used_p = np.zeros(pkey.size, dtype=bool)
    used_g = np.zeros(gkey.size, dtype=bool)
    for k in order:
        if not used_p[pi[k]] and not used_g[gi[k]]:
            used_p[pi[k]] = used_g[gi[k]] = True
            tp[pv[pi[k]]] += 1
    return tp, n_pred, n_gt


if HAVE_NUMBA:
    _refine_jit = njit(refine_labels_loop)
    _match_jit = njit(event_match_counts_loop)

    def refine_labels(loss_a, loss_v, y, m_a, m_v, joint, do_audio, do_visual):
        return _refine_jit(
            np.ascontiguousarray(loss_a, dtype=np.float64),
            np.ascontiguousarray(loss_v, dtype=np.float64),
            np.ascontiguousarray(y, dtype=np.int8),
            np.ascontiguousarray(m_a, dtype=np.int64),
            np.ascontiguousarray(m_v, dtype=np.int64),
            bool(joint), bool(do_audio), bool(do_visual),
        )

    def event_match_counts(pred, gt, iou_threshold):
        return _match_jit(
            np.ascontiguousarray(pred, dtype=np.int8),
            np.ascontiguousarray(gt, dtype=np.int8),
            float(iou_threshold),
        )
else:
    def refine_labels(loss_a, loss_v, y, m_a, m_v, joint, do_audio, do_visual):
        return refine_labels_numpy(
            np.asarray(loss_a, dtype=np.float64), np.asarray(loss_v, dtype=np.float64),
            np.asarray(y, dtype=np.int8), np.asarray(m_a, dtype=np.int64),
            np.asarray(m_v, dtype=np.int64), joint, do_audio, do_visual,
        )

    def event_match_counts(pred, gt, iou_threshold):
        return event_match_counts_numpy(
            np.asarray(pred, dtype=np.int8), np.asarray(gt, dtype=np.int8), float(iou_threshold)
        )
