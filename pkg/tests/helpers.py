"""Independent oracles and fixture builders shared by the test modules.

Everything here is deliberately naive (loops, enumeration, direct formula
evaluation) so it stays independent of the library's optimized paths.
"""

import math

import numpy as np

from embedseg import EmbeddingMap, LabelMap, Sample
from embedseg.sampling import SampleSet


def make_labels(instance_id, semantic=None, valid=None):
    inst = np.asarray(instance_id, dtype=np.int64)
    if semantic is None:
        semantic = np.zeros_like(inst)
    if valid is None:
        valid = np.ones(inst.shape, dtype=bool)
    return LabelMap(instance_id=inst, semantic_class=semantic, valid=valid)


def make_sample_set(embeddings, ids):
    embeddings = np.asarray(embeddings, dtype=np.float64)
    samples = [Sample(0, (0, k), int(i), embeddings[k].copy())
               for k, i in enumerate(ids)]
    return SampleSet(samples)


def naive_pair_loss(embs, ids, i, j, tau):
    """Eq.-style direct evaluation with plain exponentials."""
    def sim(a, b):
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    den = 0.0
    for k in range(len(ids)):
        if ids[k] != ids[i]:
            den += math.exp(sim(embs[i], embs[k]) / tau)
    return -math.log(math.exp(sim(embs[i], embs[j]) / tau) / den)


def naive_contrastive(embs, ids, tau):
    """Sum over all ordered positive pairs divided by the sample count."""
    n = len(ids)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j and ids[i] == ids[j]:
                total += naive_pair_loss(embs, ids, i, j, tau)
    return total / n


def brute_boundary_band(labels, band):
    """Quadratic-time distance-to-boundary band mask."""
    ids = labels.instance_id
    h, w = ids.shape
    boundary = []
    for r in range(h):
        for c in range(w):
            if r in (0, h - 1) or c in (0, w - 1):
                boundary.append((r, c))
                continue
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                if ids[r + dr, c + dc] != ids[r, c]:
                    boundary.append((r, c))
                    break
    out = np.zeros((h, w), dtype=bool)
    b2 = band * band
    for r in range(h):
        for c in range(w):
            for br, bc in boundary:
                if (r - br) ** 2 + (c - bc) ** 2 <= b2:
                    out[r, c] = True
                    break
    return out & labels.valid


def brute_allocation(available, total):
    """The even-allocation rule, written independently as a plain loop."""
    final = {}
    pool = sorted(available)
    budget = total
    while pool and budget > 0:
        base = budget // len(pool)
        rem = budget % len(pool)
        quota = {}
        for rank, iid in enumerate(pool):
            quota[iid] = base + (1 if rank < rem else 0)
        capped = [iid for iid in pool if available[iid] < quota[iid]]
        if not capped:
            for iid in pool:
                final[iid] = quota[iid]
            budget = 0
            break
        for iid in capped:
            final[iid] = available[iid]
            budget -= available[iid]
        pool = [iid for iid in pool if iid not in capped]
    return final, budget


def adjusted_rand_index(a, b):
    """Chance-corrected partition agreement, from the contingency table."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ua.size, ub.size), dtype=np.int64)
    for x, y in zip(ia, ib):
        table[x, y] += 1

    def comb2(x):
        return x * (x - 1) // 2

    sum_ij = sum(comb2(int(v)) for v in table.ravel())
    sum_a = sum(comb2(int(v)) for v in table.sum(axis=1))
    sum_b = sum(comb2(int(v)) for v in table.sum(axis=0))
    n = comb2(a.size)
    expected = sum_a * sum_b / n
    maximum = (sum_a + sum_b) / 2.0
    if maximum == expected:
        return 1.0
    return (sum_ij - expected) / (maximum - expected)


def ap_from_flags_naive(flags, n_gt):
    if n_gt == 0 or not flags:
        return 0.0
    tp = 0
    points = []
    for k, flag in enumerate(flags):
        tp += flag
        points.append((tp / n_gt, tp / (k + 1)))
    ap = 0.0
    prev_recall = 0.0
    for recall, _ in points:
        if recall == prev_recall:
            continue
        best = max(p for r, p in points if r >= recall)
        ap += (recall - prev_recall) * best
        prev_recall = recall
    return ap


def optimal_ap_exhaustive(pred_masks, gt_masks, threshold):
    """Max AP over every injective prediction-to-GT matching with IoU >= t.

    Predictions must already sit in descending-confidence order. Exponential
    search, only usable for the <=4 x 4 oracle scenes.
    """
    def iou(a, b):
        union = np.logical_or(a, b).sum()
        return (np.logical_and(a, b).sum() / union) if union else 0.0

    candidates = [[g for g, gm in enumerate(gt_masks) if iou(pm, gm) >= threshold]
                  for pm in pred_masks]
    best = 0.0
    n = len(pred_masks)

    def recurse(k, used, flags):
        nonlocal best
        if k == n:
            best = max(best, ap_from_flags_naive(flags, len(gt_masks)))
            return
        recurse(k + 1, used, flags + [0])
        for g in candidates[k]:
            if g not in used:
                recurse(k + 1, used | {g}, flags + [1])

    recurse(0, frozenset(), [])
    return best


def planted_mode_field(rng, height, width, n_modes, channels, spread):
    """Unit embeddings around near-orthogonal planted modes.

    Returns (EmbeddingMap, planted assignment). `spread` bounds the scaled
    cosine distance of each pixel to its mode center.
    """
    basis = np.linalg.qr(rng.standard_normal((channels, channels)))[0]
    modes = basis[:, :n_modes].T
    assign = rng.integers(0, n_modes, size=(height, width))
    field = np.zeros((height, width, channels))
    # scaled distance d corresponds to angle 2*asin(sqrt(d))
    max_angle = 2.0 * math.asin(math.sqrt(spread))
    for r in range(height):
        for c in range(width):
            center = modes[assign[r, c]]
            noise = rng.standard_normal(channels)
            noise -= (noise @ center) * center
            nn = np.linalg.norm(noise)
            if nn > 0:
                angle = rng.uniform(0.0, 0.9 * max_angle)
                v = math.cos(angle) * center + math.sin(angle) * (noise / nn)
            else:
                v = center
            field[r, c] = v
    return EmbeddingMap(field), assign
