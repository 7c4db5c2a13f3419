"""Stacked cross attention between regions and words, and image-sentence relevance.

Two directions are supported:

``t-i``
    each word attends over the image regions; the score averages, over the
    words, the cosine between a word and its attended visual vector.
``i-t``
    each region attends over the words; the score averages, over the
    regions, the cosine between a region and its attended text vector.

Raw region/word cosines are clamped at zero and L2-normalised along the
attended axis before the temperature-scaled softmax.  ``norm="query"``
normalises along the other axis instead.
"""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError

DIRECTIONS = ("t-i", "i-t")
_ALIASES = {"t-i": "t-i", "t2i": "t-i", "i-t": "i-t", "i2t": "i-t"}
_MASKED = -1e4


def canonical_direction(direction):
    try:
        return _ALIASES[direction]
    except KeyError:
        raise ConfigError(f"unknown attention direction {direction!r}") from None


def _check(lam, norm):
    if not lam > 0:
        raise ConfigError(f"attention temperature must be positive, got {lam}")
    if norm not in ("attended", "query"):
        raise ConfigError(f"unknown similarity normalisation {norm!r}")


def _attention(sims, lam, direction, norm, region_mask):
    """sims (..., n, T) -> alpha (..., n, T)."""
    attend_axis = -2 if direction == "t-i" else -1
    other_axis = -1 if direction == "t-i" else -2
    clamped = nx.relu(sims)
    clamped = nx.l2_normalize(clamped, axis=attend_axis if norm == "attended" else other_axis)
    logits = nx.scale(clamped, lam)
    if region_mask is not None and direction == "t-i":
        offset = np.where(region_mask, 0.0, _MASKED).astype(sims.dtype)[..., None]
        logits = nx.add(logits, nx.Tensor(np.broadcast_to(offset, logits.shape)))
    return nx.softmax(logits, axis=attend_axis)


def attention_weights(regions, words, lam, direction="t-i", norm="attended", region_mask=None):
    """Region/word attention map of shape (..., n, T).

    For ``t-i`` every column sums to one (distribution over regions), for
    ``i-t`` every row does (distribution over words).
    """
    direction = canonical_direction(direction)
    _check(lam, norm)
    sims = nx.pairwise_cosine(regions, words)
    mask = None if region_mask is None else np.asarray(region_mask, dtype=bool)
    return _attention(sims, lam, direction, norm, mask)


def attended_visual(alpha, regions):
    """Per-word convex combination of region features: (..., n, T), (..., n, h) -> (..., T, h)."""
    if alpha.shape[-2] != regions.shape[-2]:
        raise DimensionError(f"attention over {alpha.shape[-2]} regions, got {regions.shape[-2]}")
    return nx.matmul(nx.swapaxes(alpha, -1, -2), regions)


def _pair_scores(regions, words, region_mask, lam, direction, norm):
    """Relevance for broadcast stacks: regions (B, 1, n, h), words (1, G, T, h) -> (B, G)."""
    sims = nx.pairwise_cosine(regions, words)  # (B, G, n, T)
    alpha = _attention(sims, lam, direction, norm, region_mask[:, None, :])
    b, g, n, t = sims.shape
    h = regions.shape[-1]
    if direction == "t-i":
        attended = nx.matmul(nx.swapaxes(alpha, -1, -2), regions)  # (B, G, T, h)
        r = nx.cosine(nx.broadcast_to(words, (b, g, t, h)), attended)
        return nx.mean(r, axis=-1)
    attended = nx.matmul(alpha, words)  # (B, G, n, h)
    r = nx.cosine(nx.broadcast_to(regions, (b, g, n, h)), attended)  # (B, G, n)
    mask = np.broadcast_to(region_mask[:, None, :], r.shape).astype(r.dtype)
    counts = np.broadcast_to(region_mask.sum(axis=1)[:, None], (b, g)).astype(r.dtype)
    return nx.div(nx.sum(nx.mul(r, nx.Tensor(mask)), axis=-1), nx.Tensor(counts))


def relevance(regions, words, lam, direction="t-i", norm="attended"):
    """Relevance of one image (n, h) and one sentence (T, h), in [-1, 1]."""
    direction = canonical_direction(direction)
    _check(lam, norm)
    if regions.ndim != 2 or words.ndim != 2 or regions.shape[1] != words.shape[1]:
        raise DimensionError(f"relevance needs (n, h) and (T, h), got {regions.shape}, {words.shape}")
    n, h = regions.shape
    out = _pair_scores(
        nx.reshape(regions, (1, 1, n, h)),
        nx.reshape(words, (1, 1) + words.shape),
        np.ones((1, n), dtype=bool), lam, direction, norm,
    )
    return nx.reshape(out, ())


def score_matrix(regions, region_mask, sentences, lam, direction="t-i", norm="attended"):
    """All-pairs scores.

    ``regions`` is a padded (B_img, n_max, h) Tensor with boolean
    ``region_mask`` (B_img, n_max); ``sentences`` is a list of (T_q, h)
    Tensors.  Sentences of equal length are scored together.
    """
    direction = canonical_direction(direction)
    _check(lam, norm)
    if not len(sentences) or regions.shape[0] == 0:
        raise DimensionError("score_matrix needs at least one image and one sentence")
    region_mask = np.asarray(region_mask, dtype=bool)
    if region_mask.shape != regions.shape[:2] or not region_mask.any(axis=1).all():
        raise DimensionError("region mask must match regions and keep at least one region per image")
    by_len = defaultdict(list)
    for q, s in enumerate(sentences):
        by_len[s.shape[0]].append(q)
    groups = [(members, nx.stack([sentences[q] for q in members], axis=0))
              for _, members in sorted(by_len.items())]
    return score_groups(regions, region_mask, groups, lam, direction, norm)


def score_groups(regions, region_mask, groups, lam, direction="t-i", norm="attended"):
    """Like :func:`score_matrix` for sentences already stacked by length.

    ``groups`` is a list of ``(positions, words)`` with words of shape
    (G, T, h); ``positions`` give the output column of each stacked sentence.
    """
    direction = canonical_direction(direction)
    _check(lam, norm)
    region_mask = np.asarray(region_mask, dtype=bool)
    b = regions.shape[0]
    stacked_regions = nx.reshape(regions, (b, 1) + regions.shape[1:])
    order, blocks = [], []
    for members, words in groups:
        blocks.append(_pair_scores(stacked_regions, nx.reshape(words, (1,) + words.shape),
                                   region_mask, lam, direction, norm))
        order.extend(members)
    scores = blocks[0] if len(blocks) == 1 else nx.concat(blocks, axis=1)
    if order == list(range(len(order))):
        return scores
    inverse = np.argsort(order)
    return nx.transpose(nx.take(nx.transpose(scores), inverse))


def pad_regions(images):
    """Stack a list of (n_i, h) Tensors into a zero-padded (B, n_max, h) Tensor and mask."""
    n_max = max(im.shape[0] for im in images)
    h = images[0].shape[1]
    rows, mask = [], np.zeros((len(images), n_max), dtype=bool)
    for i, im in enumerate(images):
        n = im.shape[0]
        mask[i, :n] = True
        if n < n_max:
            im = nx.concat([im, nx.Tensor(np.zeros((n_max - n, h), dtype=im.dtype))], axis=0)
        rows.append(im)
    return nx.stack(rows, axis=0), mask


def score_batch(images, sentences, lam, direction="t-i", norm="attended"):
    """S[p][q] = relevance(images[p], sentences[q]) for lists of per-item Tensors."""
    if not images or not sentences:
        raise DimensionError("score_batch needs nonempty image and sentence lists")
    regions, mask = pad_regions(images)
    return score_matrix(regions, mask, sentences, lam, direction, norm)
