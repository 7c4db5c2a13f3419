"""Retrieval metrics, score fusion and metric reports."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, ValidationError

RECALL_AT = (1, 5, 10)
MAP_AT = (1, 3, 5)
ACCURACY_AT = (1, 2, 3)


@dataclass
class RankingResult:
    """Candidates of every query sorted by descending score, ties by ascending candidate id.

    ``labels[q, c]`` marks candidate ``c`` relevant to query ``q``.
    """

    order: np.ndarray  # (Q, C) candidate ids
    labels: np.ndarray  # (Q, C) bool, indexed by candidate id

    @property
    def hits(self):
        """Relevance in ranked order, (Q, C)."""
        return np.take_along_axis(self.labels, self.order, axis=1)

    @property
    def n_relevant(self):
        return self.labels.sum(axis=1)

    def relevant_ranks(self, q):
        return (np.flatnonzero(self.hits[q]) + 1).tolist()


def rank(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} must be equal 2-D shapes")
    if not labels.any(axis=1).all():
        raise ValidationError("every query needs at least one relevant candidate")
    order = np.argsort(-scores, axis=1, kind="stable")
    return RankingResult(order, labels)


def _check_cutoff(k, what):
    if k < 1:
        raise ConfigError(f"{what} cutoff must be >= 1, got {k}")


def recall_at(results, h):
    """Percentage of queries with at least one relevant item in the top ``h``."""
    _check_cutoff(h, "recall")
    found = int(results.hits[:, :h].any(axis=1).sum())
    return 100.0 * found / results.order.shape[0]


def map_at(results, k):
    """Mean over queries of average precision truncated at rank ``k``."""
    _check_cutoff(k, "MAP")
    hits = results.hits[:, :k].astype(np.float64)
    ranks = np.arange(1, hits.shape[1] + 1)
    precision = np.cumsum(hits, axis=1) / ranks
    ap = (precision * hits).sum(axis=1) / np.minimum(k, results.n_relevant)
    return float(ap.mean())


def accuracy_at(results, k, normalized=True):
    """Relevant items in the top ``k`` divided by min(k, #relevant), or by k when not ``normalized``."""
    _check_cutoff(k, "accuracy")
    found = results.hits[:, :k].sum(axis=1)
    denom = np.minimum(k, results.n_relevant) if normalized else k
    return float((found / denom).mean())


def standardize(scores):
    scores = np.asarray(scores, dtype=np.float64)
    centered = scores - scores.mean()
    std = centered.std()
    return centered / std if std > 0 else centered


def fuse_scores(s_ti, s_it):
    """Mean of the two score matrices after standardising each to zero mean, unit variance."""
    a = s_ti.data if isinstance(s_ti, nx.Tensor) else np.asarray(s_ti)
    b = s_it.data if isinstance(s_it, nx.Tensor) else np.asarray(s_it)
    if a.shape != b.shape:
        raise DimensionError(f"cannot fuse score matrices of shapes {a.shape} and {b.shape}")
    return 0.5 * (standardize(a) + standardize(b))


def score_dataset(model, dataset, direction=None, chunk=256):
    """(n_images, n_captions) score matrix, computed without recording gradients."""
    batch = model.batch(dataset.images)
    tokens = dataset.token_ids(model.config.max_tokens)
    cols = [model.scores(batch, tokens[s:s + chunk], direction).data for s in range(0, len(tokens), chunk)]
    return np.concatenate(cols, axis=1)


def retrieval_metrics(scores, caption_image):
    """Metrics for both retrieval tasks from an (images x captions) score matrix."""
    scores = np.asarray(scores)
    caption_image = np.asarray(caption_image)
    n_img = scores.shape[0]
    labels = caption_image[None, :] == np.arange(n_img)[:, None]  # (images, captions)
    i2t = rank(scores, labels)
    t2i = rank(scores.T, labels.T)
    return {
        "image_to_text": {f"R@{h}": recall_at(i2t, h) for h in RECALL_AT},
        "text_to_image": dict(
            {f"R@{h}": recall_at(t2i, h) for h in RECALL_AT},
            **{f"MAP@{k}": map_at(t2i, k) for k in MAP_AT},
            **{f"A@{k}": accuracy_at(t2i, k) for k in ACCURACY_AT},
        ),
    }


def metrics_report(scores, caption_image, direction, config_hash, checkpoint_id):
    report = retrieval_metrics(scores, caption_image)
    report.update({
        "direction": direction,
        "recall_h": list(RECALL_AT),
        "map_k": list(MAP_AT),
        "accuracy_k": list(ACCURACY_AT),
        "config_hash": config_hash,
        "checkpoint_id": checkpoint_id,
    })
    return report


# plain-text tables ------------------------------------------------------------------


def _cell(value, percent=False):
    if value is None:
        return "-"
    return f"{value * 100 if percent else value:.1f}"


def format_retrieval_table(rows):
    """Two-task recall table; ``rows`` are (method, [i2t R@1,5,10], [t2i R@1,5,10]) in percent."""
    lines = [
        "methods\tImage-to-Text Retrieval\t\t\tText-to-Image Retrieval\t\t",
        "\tR@1\tR@5\tR@10\tR@1\tR@5\tR@10",
    ]
    for method, i2t, t2i in rows:
        lines.append("\t".join([method] + [_cell(v) for v in list(i2t) + list(t2i)]))
    return "\n".join(lines) + "\n"


def format_news_table(rows):
    """MAP/accuracy table; ``rows`` are (method, [MAP@1,3,5], [A@1,2,3]) as fractions."""
    header = [f"MAP@{k}" for k in MAP_AT] + [f"A@{k}" for k in ACCURACY_AT]
    lines = ["\t" + "\t".join(header)]
    for method, maps, accs in rows:
        lines.append("\t".join([method] + [_cell(v, percent=True) for v in list(maps) + list(accs)]))
    return "\n".join(lines) + "\n"


def report_tables(report, method="PFAN"):
    i2t, t2i = report["image_to_text"], report["text_to_image"]
    retrieval = format_retrieval_table([
        (method, [i2t[f"R@{h}"] for h in RECALL_AT], [t2i[f"R@{h}"] for h in RECALL_AT]),
    ])
    news = format_news_table([
        (method, [t2i[f"MAP@{k}"] for k in MAP_AT], [t2i[f"A@{k}"] for k in ACCURACY_AT]),
    ])
    return retrieval + "\n" + news
