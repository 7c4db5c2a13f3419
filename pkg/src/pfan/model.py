"""Parameter set and forward pass of the full matching network."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor, resolve_dtype
from .position import (augment_and_project, baseline_position_feature, position_feature,
                       position_logits, position_weights)
from .scoring import _attention, score_groups
from .text import cell_names, encode_sentences


@dataclass
class ImageBatch:
    features: np.ndarray  # (B, n_max, D)
    block_idx: np.ndarray  # (B, n_max, L), 0-based
    overlaps: np.ndarray  # (B, n_max, L)
    mask: np.ndarray  # (B, n_max) bool

    def __len__(self):
        return self.features.shape[0]


def make_image_batch(images, k, l, dtype=np.float64):
    """Pad a list of ImageRecords; padded regions get a dummy single-block overlap and are masked out."""
    n_max = max(im.n_regions for im in images)
    dim = images[0].features.shape[1]
    b = len(images)
    feats = np.zeros((b, n_max, dim), dtype=dtype)
    idx = np.zeros((b, n_max, l), dtype=np.int64)
    over = np.zeros((b, n_max, l), dtype=dtype)
    if l:
        over[:, :, 0] = 1.0
    mask = np.zeros((b, n_max), dtype=bool)
    for i, im in enumerate(images):
        n = im.n_regions
        feats[i, :n] = im.features
        if l:
            blocks, weights = im.positions(k, l)
            idx[i, :n] = blocks
            over[i, :n] = weights
        mask[i, :n] = True
    return ImageBatch(feats, idx, over, mask)


def param_shapes(config, vocab_size):
    c = config
    shapes = {}
    if c.block_dim:
        shapes["block_embedding"] = (c.grid_k ** 2, c.block_dim)
        if c.position == "attention":
            shapes["bilinear"] = (c.visual_dim, c.block_dim)
    shapes["proj.weight"] = (c.joint_dim, c.visual_dim + c.block_dim)
    shapes["proj.bias"] = (c.joint_dim,)
    shapes["word_embedding"] = (c.word_dim, vocab_size)
    for direction in ("fwd", "bwd"):
        for name in cell_names():
            kind = name[0]
            full = f"gru.{direction}.{name}"
            if kind == "W":
                shapes[full] = (c.joint_dim, c.word_dim)
            elif kind == "U":
                shapes[full] = (c.joint_dim, c.joint_dim)
            else:
                shapes[full] = (c.joint_dim,)
    return shapes


def _fan_in(name, shape, config):
    if name == "block_embedding":
        return shape[0]  # one-hot over K*K blocks
    if name == "bilinear":
        return shape[1]
    if name == "word_embedding":
        return shape[1]  # one-hot over the vocabulary
    if name.startswith("gru."):
        return config.joint_dim
    if name == "proj.bias":
        return config.visual_dim + config.block_dim
    return shape[1]


def init_params(config, vocab_size, seed=None):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor, drawn in a fixed order."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = resolve_dtype(config.precision)
    params = {}
    for name, shape in param_shapes(config, vocab_size).items():
        bound = 1.0 / np.sqrt(_fan_in(name, shape, config))
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True, name=name)
    return params


class PFAN:
    def __init__(self, config, params):
        self.config = config
        self.params = params
        self.dtype = resolve_dtype(config.precision)

    @classmethod
    def create(cls, config, vocab_size, seed=None):
        return cls(config, init_params(config, vocab_size, seed))

    @property
    def vocab_size(self):
        return self.params["word_embedding"].shape[1]

    def batch(self, images):
        return make_image_batch(images, self.config.grid_k, self.config.top_l if self.config.block_dim else 0,
                                self.dtype)

    def position_path(self, batch):
        """Block embeddings, beta (or None) and gamma for every region: (B, n, L, iota), (B, n, L)."""
        p = self.params
        blocks = nx.take(p["block_embedding"], batch.block_idx)
        overlaps = Tensor(batch.overlaps.astype(self.dtype))
        if self.config.position == "baseline":
            return blocks, None, overlaps
        beta = position_logits(Tensor(batch.features), blocks, p["bilinear"])
        return blocks, beta, position_weights(beta, overlaps)

    def encode_images(self, batch):
        """Unit-length joint-space region features (B, n_max, h); padded rows are zero."""
        v = Tensor(batch.features)
        pe = None
        if self.config.block_dim:
            blocks, beta, weights = self.position_path(batch)
            if beta is None:
                pe = baseline_position_feature(blocks, weights)
            else:
                pe = position_feature(blocks, weights)
        _, ve = augment_and_project(v, pe, self.params["proj.weight"], self.params["proj.bias"])
        mask = Tensor(np.broadcast_to(batch.mask[..., None], ve.shape).astype(self.dtype))
        return nx.l2_normalize(nx.mul(ve, mask), axis=-1)

    def encode_captions(self, token_lists):
        """Group captions by length and encode each group: list of (positions, (G, T, h))."""
        by_len = defaultdict(list)
        for q, toks in enumerate(token_lists):
            by_len[len(toks)].append(q)
        groups = []
        for length in sorted(by_len):
            members = by_len[length]
            tokens = np.array([token_lists[q] for q in members], dtype=np.int64)
            groups.append((members, encode_sentences(tokens, self.params)))
        return groups

    def lam(self, direction):
        return self.config.lambda_ti if direction == "t-i" else self.config.lambda_it

    def scores(self, batch, token_lists, direction=None):
        """(B_img, B_txt) relevance matrix."""
        direction = direction or self.config.direction
        regions = self.encode_images(batch)
        groups = self.encode_captions(token_lists)
        return score_groups(regions, batch.mask, groups, self.lam(direction), direction, self.config.sim_norm)

    def attention_map(self, batch, tokens, direction=None):
        """Region/word attention for a single image and caption: (n, T) numpy array."""
        direction = direction or self.config.direction
        regions = self.encode_images(batch)
        words = encode_sentences(np.array([tokens], dtype=np.int64), self.params)
        n = int(batch.mask[0].sum())
        r = nx.reshape(regions[0, :n, :], (n, regions.shape[-1]))
        sims = nx.pairwise_cosine(r, nx.reshape(words, words.shape[1:]))
        alpha = _attention(sims, self.lam(direction), direction, self.config.sim_norm, None)
        return alpha.data
