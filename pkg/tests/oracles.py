"""Independent reference implementations used as test oracles.

Everything here is written from the mathematical definitions with plain
loops and shares no code with the package. Do not edit these to make a
failing test pass; fix the package instead.
"""

from __future__ import annotations

import math

import numpy as np


# gradients


def central_difference(f, x: np.ndarray, index, step: float = 1e-3) -> float:
    """d f / d x[index] by central differences; ``x`` is perturbed in place and restored."""
    old = x[index]
    x[index] = old + step
    up = f()
    x[index] = old - step
    down = f()
    x[index] = old
    return (up - down) / (2 * step)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


# convolution and pooling


def conv2d_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 cross-correlation, one output element at a time."""
    n, c_in, h, wd = x.shape
    c_out = w.shape[0]
    out = np.zeros((n, c_out, h, wd))
    for i in range(n):
        for o in range(c_out):
            for r in range(h):
                for c in range(wd):
                    acc = b[o]
                    for k in range(c_in):
                        for dr in range(3):
                            for dc in range(3):
                                rr, cc = r + dr - 1, c + dc - 1
                                if 0 <= rr < h and 0 <= cc < wd:
                                    acc += w[o, k, dr, dc] * x[i, k, rr, cc]
                    out[i, o, r, c] = acc
    return out


def maxpool_loops(x: np.ndarray, grad_out: np.ndarray):
    """Forward max and the routed gradient; ties go to the first cell in row-major order."""
    n, ch, h, w = x.shape
    out = np.zeros((n, ch, h // 2, w // 2))
    grad_in = np.zeros_like(x, dtype=float)
    for i in range(n):
        for k in range(ch):
            for r in range(h // 2):
                for c in range(w // 2):
                    best, where = -math.inf, None
                    for dr in range(2):
                        for dc in range(2):
                            v = x[i, k, 2 * r + dr, 2 * c + dc]
                            if v > best:
                                best, where = v, (2 * r + dr, 2 * c + dc)
                    out[i, k, r, c] = best
                    grad_in[i, k, where[0], where[1]] += grad_out[i, k, r, c]
    return out, grad_in


# losses


def bce_loop(y: np.ndarray, p: np.ndarray, clip: float = 1e-7) -> float:
    total = 0.0
    flat_y, flat_p = y.ravel(), p.ravel()
    for t, q in zip(flat_y, flat_p):
        q = min(max(float(q), clip), 1 - clip)
        total += -(t * math.log(q) + (1 - t) * math.log(1 - q))
    return total / flat_y.size


def jaccard_pooled_loop(y: np.ndarray, p: np.ndarray, eps: float = 1e-7) -> float:
    inter = union = 0.0
    for t, q in zip(y.ravel(), p.ravel()):
        inter += t * q
        union += t + q - t * q
    return inter / (union + eps)


def jaccard_pixel_loop(y: np.ndarray, p: np.ndarray, eps: float = 1e-7) -> float:
    total = 0.0
    for t, q in zip(y.ravel(), p.ravel()):
        total += t * q / (t + q - t * q + eps)
    return total / y.size


# optimizer


def nadam_scalar(grads, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, decay=0.004, w0=0.0) -> list[float]:
    """Scalar Nadam with the 0.96-based momentum schedule; returns w after every step."""
    w, m, v, prod = w0, 0.0, 0.0, 1.0
    out = []
    for step, g in enumerate(grads, start=1):
        mu = beta1 * (1 - 0.5 * 0.96 ** (step * decay))
        mu_next = beta1 * (1 - 0.5 * 0.96 ** ((step + 1) * decay))
        prod *= mu
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        g_hat = g / (1 - prod)
        m_hat = m / (1 - prod * mu_next)
        v_hat = v / (1 - beta2**step)
        w -= lr * ((1 - mu) * g_hat + mu_next * m_hat) / (math.sqrt(v_hat) + eps)
        out.append(w)
    return out


# metrics


def counts_loop(gt: np.ndarray, pred: np.ndarray):
    tp = fp = fn = tn = 0
    for r in range(gt.shape[0]):
        for c in range(gt.shape[1]):
            g, p = bool(gt[r, c]), bool(pred[r, c])
            tp += g and p
            fp += (not g) and p
            fn += g and not p
            tn += (not g) and not p
    return tp, fp, fn, tn


def iou_loop(gt, pred) -> float:
    tp, fp, fn, _ = counts_loop(gt, pred)
    return 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)


def accuracy_loop(gt, pred) -> float:
    tp, _, _, tn = counts_loop(gt, pred)
    return (tp + tn) / gt.size


def _near(mask: np.ndarray, r: int, c: int, rho: int) -> bool:
    h, w = mask.shape
    for rr in range(max(0, r - rho), min(h, r + rho + 1)):
        for cc in range(max(0, c - rho), min(w, c + rho + 1)):
            if mask[rr, cc]:
                return True
    return False


def relaxed_counts_loop(gt: np.ndarray, pred: np.ndarray, rho: int):
    """(pred hits, |pred|, gt hits, |gt|): a hit is a positive within Chebyshev distance rho of a counterpart."""
    p_hits = p_total = r_hits = r_total = 0
    for r in range(gt.shape[0]):
        for c in range(gt.shape[1]):
            if pred[r, c]:
                p_total += 1
                p_hits += _near(gt, r, c, rho)
            if gt[r, c]:
                r_total += 1
                r_hits += _near(pred, r, c, rho)
    return p_hits, p_total, r_hits, r_total


def relaxed_loop(gt: np.ndarray, pred: np.ndarray, rho: int):
    """Relaxed (precision, recall) with the empty-mask conventions P = 1, R = 1."""
    p_hits, p_total, r_hits, r_total = relaxed_counts_loop(gt, pred, rho)
    precision = 1.0 if p_total == 0 else p_hits / p_total
    recall = 1.0 if r_total == 0 else r_hits / r_total
    return precision, recall


def _crossing(prec: list, rec: list) -> float:
    diffs = [p - r for p, r in zip(prec, rec)]
    for i, d in enumerate(diffs):
        if d == 0:
            return prec[i]
        if i > 0 and (diffs[i - 1] < 0) != (d < 0):
            a = diffs[i - 1] / (diffs[i - 1] - d)
            return prec[i - 1] + a * (prec[i] - prec[i - 1])
    best = min(range(len(diffs)), key=lambda i: abs(diffs[i]))
    return (prec[best] + rec[best]) / 2


def breakeven_bruteforce(gt: np.ndarray, scores: np.ndarray, rho: int) -> float:
    """Sweep every unique score as a threshold (pred = score >= tau) in increasing order.

    Returns the interpolated crossing of precision and recall at the first
    sign change of (precision - recall); with no sign change, the mean of
    precision and recall where they are closest (first such threshold).
    """
    return breakeven_pooled_bruteforce([gt], [scores], rho)


def breakeven_pooled_bruteforce(gts: list, score_maps: list, rho: int) -> float:
    """As above with hits and totals summed over several images at shared thresholds."""
    taus = sorted(set(float(v) for s in score_maps for v in s.ravel()))
    prec, rec = [], []
    for tau in taus:
        ph = pn = rh = rn = 0
        for gt, s in zip(gts, score_maps):
            a, b, c, d = relaxed_counts_loop(gt, s >= tau, rho)
            ph, pn, rh, rn = ph + a, pn + b, rh + c, rn + d
        prec.append(1.0 if pn == 0 else ph / pn)
        rec.append(1.0 if rn == 0 else rh / rn)
    return _crossing(prec, rec)


# pipeline


def reflect_index(i: int, n: int) -> int:
    """Reflection without repeating the edge sample (period 2n - 2)."""
    if n == 1:
        return 0
    period = 2 * n - 2
    i %= period
    return i if i < n else period - i


def mirror_pad_loop(image: np.ndarray, margin: int) -> np.ndarray:
    h, w = image.shape[:2]
    out = np.empty((h + 2 * margin, w + 2 * margin) + image.shape[2:], dtype=image.dtype)
    for r in range(out.shape[0]):
        for c in range(out.shape[1]):
            out[r, c] = image[reflect_index(r - margin, h), reflect_index(c - margin, w)]
    return out


def grid_steps(size: int, patch: int, margin: int) -> int:
    stride = patch - 2 * margin
    return -(-size // stride)


def breakeven_by_windows(gt: np.ndarray, scores: np.ndarray, rho: int) -> float:
    """Same sweep as ``breakeven_bruteforce`` with each pixel's window inspected once.

    A predicted pixel is a hit iff some gt pixel lies in its window, which does
    not depend on tau; a gt pixel is recovered iff the largest score in its
    window reaches tau. Counting at every tau is then a sorted-list lookup.
    """
    import bisect

    h, w = gt.shape
    near_scores, window_max, all_scores = [], [], []
    for r in range(h):
        for c in range(w):
            s = float(scores[r, c])
            all_scores.append(s)
            if _near(gt, r, c, rho):
                near_scores.append(s)
            if gt[r, c]:
                best = -math.inf
                for rr in range(max(0, r - rho), min(h, r + rho + 1)):
                    for cc in range(max(0, c - rho), min(w, c + rho + 1)):
                        best = max(best, float(scores[rr, cc]))
                window_max.append(best)
    for values in (near_scores, window_max, all_scores):
        values.sort()

    def at_least(values, tau):
        return len(values) - bisect.bisect_left(values, tau)

    prec, rec = [], []
    for tau in sorted(set(all_scores)):
        p_total = at_least(all_scores, tau)
        prec.append(1.0 if p_total == 0 else at_least(near_scores, tau) / p_total)
        rec.append(1.0 if not window_max else at_least(window_max, tau) / len(window_max))
    return _crossing(prec, rec)
