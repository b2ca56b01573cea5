"""Temperature-scaled contrastive loss over a sample union, with gradients.

For a sample union U with instance ids, a positive pair (i, j) scores

    l_ij = -log( exp(sim(e_i, e_j)/tau) / sum_{k: id(k) != id(i)} exp(sim(e_i, e_k)/tau) )

with cosine similarity sim. The aggregate is the sum over all ordered
positive pairs divided by |U| (the total sample count, taken literally).
A norm regularizer (mean L2 norm over all pixels) is added with weight
reg_weight. Gradients are analytic, chained through the normalization.

Note the denominator excludes every same-id sample, including the positive
itself, so l_ij can be negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEmbeddingError, NoNegativesError
from .fields import EmbeddingMap, FrameGroup
from .sampling import SampleSet


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    reg_weight: float = 0.01

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValueError("temperature must be > 0")
        if self.reg_weight < 0.0:
            raise ValueError("reg_weight must be >= 0")


@dataclass(eq=False)
class LossResult:
    contrastive: float
    regularizer: float
    total: float
    grad_samples: np.ndarray          # (n, c): d contrastive / d sample embedding
    grad_field: list[np.ndarray]      # per frame (h, w, c): d (reg_weight * regularizer) / d E


def _unit_rows(matrix):
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("degenerate embedding: zero-norm sample")
    return matrix / norms[:, None], norms


def cosine_sim(x, y) -> float:
    """sim(x, y) = x.y / (|x| |y|), in [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding: zero-norm vector")
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def pair_loss(i: int, j: int, sset: SampleSet, cfg: LossConfig) -> float:
    """Loss of the ordered positive pair (i, j) against all negatives of i."""
    ids = sset.id_array()
    if i == j:
        raise ValueError("pair indices must differ")
    if ids[i] != ids[j]:
        raise ValueError("pair must share an instance id")
    neg = ids != ids[i]
    if not neg.any():
        raise NoNegativesError(f"no negative samples for instance {int(ids[i])}")
    unit, _ = _unit_rows(sset.embedding_matrix())
    sims = unit @ unit[i]
    z = sims / cfg.temperature
    zn = z[neg]
    m = zn.max()
    log_den = m + np.log(np.exp(zn - m).sum())
    return float(log_den - z[j])


def _contrastive_core(matrix, ids, tau, need_grad):
    n = ids.size
    if np.unique(ids).size < 2:
        raise ValueError("need at least 2 distinct instance ids")
    unit, norms = _unit_rows(matrix)
    z = (unit @ unit.T) / tau
    same = ids[:, None] == ids[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    z_neg = np.where(same, -np.inf, z)
    row_max = z_neg.max(axis=1)
    log_den = row_max + np.log(np.exp(z_neg - row_max[:, None]).sum(axis=1))
    n_pos = pos.sum(axis=1).astype(np.float64)
    value = float((n_pos * log_den - (z * pos).sum(axis=1)).sum() / n)
    if not need_grad:
        return value, None
    # dL/dZ: softmax rows weighted by the anchor's positive count on negatives,
    # -1/n on ordered positive pairs, zero on the diagonal.
    w = np.exp(z_neg - log_den[:, None]) * (n_pos[:, None] / n)
    w[pos] = -1.0 / n
    g_unit = (w + w.T) @ unit / tau
    radial = (unit * g_unit).sum(axis=1, keepdims=True)
    grad = (g_unit - radial * unit) / norms[:, None]
    return value, grad


def contrastive_loss(sset: SampleSet, cfg: LossConfig) -> float:
    """Mean-style aggregate of all ordered positive-pair losses, divided by |U|."""
    value, _ = _contrastive_core(sset.embedding_matrix(), sset.id_array(),
                                 cfg.temperature, need_grad=False)
    return value


def reg_loss(emb: EmbeddingMap) -> float:
    """Mean over pixels of the embedding L2 norm."""
    norms = np.linalg.norm(emb.data, axis=2)
    return float(norms.mean())


def total_loss_and_grad(group: FrameGroup, sset: SampleSet, cfg: LossConfig) -> LossResult:
    """Total loss over the group plus gradients.

    grad_samples holds d contrastive / d e for every sample; a pixel's full
    gradient is its grad_field entry plus the sum of grad_samples rows drawn
    at that pixel (pixels never sampled get only the regularizer term).
    The regularizer pools the norm mean over all pixels of all frames.
    """
    value, grad_samples = _contrastive_core(sset.embedding_matrix(), sset.id_array(),
                                            cfg.temperature, need_grad=True)
    total_pixels = sum(f.embedding.height * f.embedding.width for f in group.frames)
    norm_sum = 0.0
    grad_field = []
    for frame in group.frames:
        data = frame.embedding.data
        norms = np.linalg.norm(data, axis=2)
        norm_sum += float(norms.sum())
        if cfg.reg_weight == 0.0:
            grad_field.append(np.zeros_like(data))
        else:
            safe = np.where(norms > 0.0, norms, 1.0)
            grad_field.append((cfg.reg_weight / total_pixels) * data / safe[..., None])
    regularizer = norm_sum / total_pixels
    return LossResult(
        contrastive=value,
        regularizer=regularizer,
        total=value + cfg.reg_weight * regularizer,
        grad_samples=grad_samples,
        grad_field=grad_field,
    )
