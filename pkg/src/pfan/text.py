"""Vocabulary, word embedding and the bidirectional GRU sentence encoder."""
from __future__ import annotations

import logging
from collections import Counter
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import DimensionError, ValidationError, VocabularyError

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
GATES = ("z", "r", "h")


def tokenize(text):
    return text.lower().split()


class Vocabulary:
    """Dense token -> index map; index 0 is padding and 1 the unknown token."""

    def __init__(self, tokens=()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: 0, UNK: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, token):
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def index(self, token):
        return self.stoi.get(token, 1)

    def encode(self, tokens):
        return [self.index(t) for t in tokens]

    @classmethod
    def from_captions(cls, captions, min_freq=1):
        """Build from token lists; tokens are added in order of first appearance."""
        counts = Counter(t for cap in captions for t in cap)
        seen = []
        for cap in captions:
            for t in cap:
                if counts[t] >= min_freq and t not in (PAD, UNK):
                    seen.append(t)
        return cls(dict.fromkeys(seen))

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if lines[:2] != [PAD, UNK]:
            raise VocabularyError(f"{path}: first two lines must be {PAD} and {UNK}")
        if len(set(lines)) != len(lines):
            raise VocabularyError(f"{path}: duplicate tokens")
        return cls(lines[2:])


def embed_words(tokens, embedding):
    """Look up columns of the (d, N) embedding matrix; output has shape tokens.shape + (d,)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = embedding.shape[1]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= n):
        raise VocabularyError(f"token index outside vocabulary of size {n}")
    return nx.take(nx.transpose(embedding), tokens)


def _affine(x, w, b=None):
    out = nx.matmul(x, nx.transpose(w))
    if b is not None:
        out = nx.add(out, nx.broadcast_to(b, out.shape))
    return out


def gru_cell(x, h_prev, cell):
    """One GRU step.  ``cell`` maps W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h to Tensors.

    x has shape (G, d), h_prev (G, h).
    """
    if x.shape[-1] != cell["W_z"].shape[1] or h_prev.shape[-1] != cell["U_z"].shape[1]:
        raise DimensionError(f"GRU cell does not accept input {x.shape} / state {h_prev.shape}")
    z = nx.sigmoid(nx.add(_affine(x, cell["W_z"], cell["b_z"]), _affine(h_prev, cell["U_z"])))
    r = nx.sigmoid(nx.add(_affine(x, cell["W_r"], cell["b_r"]), _affine(h_prev, cell["U_r"])))
    cand = nx.tanh(nx.add(_affine(x, cell["W_h"], cell["b_h"]), _affine(nx.mul(r, h_prev), cell["U_h"])))
    return nx.add(nx.mul(nx.sub(1.0, z), h_prev), nx.mul(z, cand))


def _run(x, cell, reverse):
    g, t_len, _ = x.shape
    hidden = cell["U_z"].shape[0]
    h = nx.Tensor(np.zeros((g, hidden), dtype=x.dtype))
    outs = [None] * t_len
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in steps:
        h = gru_cell(x[:, t, :], h, cell)
        outs[t] = h
    return nx.stack(outs, axis=1)


def bigru_features(x, params):
    """Forward and backward hidden-state sequences for x of shape (G, T, d)."""
    fwd = _run(x, {k: params[f"gru.fwd.{k}"] for k in cell_names()}, reverse=False)
    bwd = _run(x, {k: params[f"gru.bwd.{k}"] for k in cell_names()}, reverse=True)
    return fwd, bwd


def encode_sentences(tokens, params, normalize=True):
    """Encode G sentences of equal length T: (G, T) token ids -> (G, T, h) word features.

    Each word feature is the mean of the forward and backward states, scaled
    to unit length when ``normalize`` is set.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ValidationError("sentences must contain at least one token")
    x = embed_words(tokens, params["word_embedding"])
    fwd, bwd = bigru_features(x, params)
    e = nx.scale(nx.add(fwd, bwd), 0.5)
    return nx.l2_normalize(e, axis=-1) if normalize else e


def encode_sentence(tokens, params, normalize=True):
    """Single-sentence form of :func:`encode_sentences`; returns (T, h)."""
    tokens = list(tokens)
    if not tokens:
        raise ValidationError("empty sentence")
    out = encode_sentences([tokens], params, normalize)
    return nx.reshape(out, out.shape[1:])


def truncate(tokens, max_tokens):
    if len(tokens) > max_tokens:
        log.warning("caption of %d tokens truncated to %d", len(tokens), max_tokens)
        return list(tokens[:max_tokens])
    return list(tokens)


def cell_names():
    return [f"{kind}_{gate}" for gate in GATES for kind in ("W", "U", "b")]
