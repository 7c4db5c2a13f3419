"""Block embeddings and position-focused attention.

Every function accepts leading batch dimensions: a visual feature of shape
(..., D) goes with block embeddings of shape (..., L, iota) and overlap
weights of shape (..., L).
"""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import DimensionError, NumericError


def position_logits(v, blocks, bilinear):
    """beta_j = tanh(v^T M b_j) for each of the L selected blocks."""
    if v.shape[-1] != bilinear.shape[0] or blocks.shape[-1] != bilinear.shape[1]:
        raise DimensionError(
            f"bilinear form {bilinear.shape} does not fit visual {v.shape} / blocks {blocks.shape}"
        )
    vm = nx.matmul(nx.reshape(v, v.shape[:-1] + (1, v.shape[-1])), bilinear)  # (..., 1, iota)
    scores = nx.matmul(blocks, nx.swapaxes(vm, -1, -2))  # (..., L, 1)
    return nx.tanh(nx.reshape(scores, scores.shape[:-1]))


def position_weights(beta, a):
    """Softmax over the blocks, scaled by the overlap weights, renormalised.

    Zero-overlap (padding) blocks come out with weight exactly 0.
    """
    a = nx.as_tensor(a, like=beta)
    if beta.shape != a.shape:
        raise DimensionError(f"logits {beta.shape} and overlaps {a.shape} differ")
    if np.any(a.data < 0):
        raise DimensionError("overlap weights must be nonnegative")
    if np.any(a.data.sum(axis=-1) == 0):
        raise NumericError("degenerate region: overlap weights sum to zero")
    raw = nx.mul(nx.softmax(beta, axis=-1), a)
    total = nx.sum(raw, axis=-1, keepdims=True)
    return nx.div(raw, nx.broadcast_to(total, raw.shape))


def _weighted_blocks(blocks, w):
    w = nx.as_tensor(w, like=blocks)
    if blocks.shape[:-1] != w.shape:
        raise DimensionError(f"blocks {blocks.shape} and weights {w.shape} differ")
    row = nx.reshape(w, w.shape[:-1] + (1, w.shape[-1]))
    out = nx.matmul(row, blocks)  # (..., 1, iota)
    return nx.reshape(out, out.shape[:-2] + (out.shape[-1],))


def position_feature(blocks, gamma):
    """Attention-weighted sum of the block embeddings."""
    return _weighted_blocks(blocks, gamma)


def baseline_position_feature(blocks, a):
    """Overlap-weighted sum of the block embeddings, with no attention."""
    return _weighted_blocks(blocks, a)


def augment_and_project(v, pe, weight, bias):
    """Concatenate visual and position features, then apply the projection layer.

    Returns ``(v_p, v_e)``; ``pe`` may be None when the position path is disabled.
    """
    vp = v if pe is None else nx.concat([v, pe], axis=-1)
    if vp.shape[-1] != weight.shape[1]:
        raise DimensionError(f"projection expects {weight.shape[1]} inputs, got {vp.shape[-1]}")
    ve = nx.matmul(nx.reshape(vp, (-1, vp.shape[-1])), nx.transpose(weight))
    ve = nx.add(ve, nx.broadcast_to(bias, ve.shape))
    return vp, nx.reshape(ve, vp.shape[:-1] + (weight.shape[0],))
