"""Block-embedding similarity map and attention visualisation export.

Heatmaps are binary PGM (P5, maxval 255) with pixel value
floor(255 * w / max(w) + 0.5); an all-zero map stays black.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import canonical_json
from .errors import DimensionError, ValidationError

TOP_BLOCKS = 6


def neighbours(i, j, k, neighborhood=4):
    steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if neighborhood == 8:
        steps += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    elif neighborhood != 4:
        raise ValidationError("neighborhood must be 4 or 8")
    return [(i + di, j + dj) for di, dj in steps if 0 <= i + di < k and 0 <= j + dj < k]


def mean_pairwise_distance(embeddings):
    e = np.asarray(embeddings, dtype=np.float64)
    iu = np.triu_indices(e.shape[0], k=1)
    if not len(iu[0]):
        return 0.0
    dist = np.linalg.norm(e[:, None, :] - e[None, :, :], axis=-1)
    return float(dist[iu].mean())


def similarity_map(embeddings, k, neighborhood=4):
    """K x K map: mean Gaussian-kernel similarity of each block embedding to its grid neighbours.

    Embedding m = i*K + j (0-based, row-major) sits at row i, column j.  The
    kernel width is the mean distance over all embedding pairs; when that is
    zero every entry is 1.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] != k * k:
        raise DimensionError(f"expected {k * k} block embeddings, got array of shape {e.shape}")
    sigma = mean_pairwise_distance(e)
    out = np.ones((k, k))
    if sigma == 0.0:
        return out
    for i in range(k):
        for j in range(k):
            b = e[i * k + j]
            near = neighbours(i, j, k, neighborhood)
            if not near:
                continue
            sims = [np.exp(-np.sum((b - e[r * k + c]) ** 2) / (2 * sigma ** 2)) for r, c in near]
            out[i, j] = float(np.mean(sims))
    return out


def pgm_bytes(weights):
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError("heatmap must be 2-D")
    peak = w.max()
    pixels = np.zeros(w.shape, dtype=np.uint8) if peak <= 0 else \
        np.floor(255.0 * np.clip(w, 0, None) / peak + 0.5).astype(np.uint8)
    header = f"P5\n{w.shape[1]} {w.shape[0]}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def write_pgm(path, weights):
    Path(path).write_bytes(pgm_bytes(weights))


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)


def export_similarity_map(params, k, out_dir, neighborhood=4):
    if "block_embedding" not in params:
        raise ValidationError("model has no block embeddings (position path disabled)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emb = params["block_embedding"].data
    sm = similarity_map(emb, k, neighborhood)
    (out / "similarity_map.json").write_text(canonical_json({
        "k": k,
        "neighborhood": neighborhood,
        "sigma": mean_pairwise_distance(emb),
        "map": sm.tolist(),
    }), encoding="utf-8")
    write_pgm(out / "similarity_map.pgm", sm)
    return sm


def attention_summary(model, dataset, image_id, caption_index, top=TOP_BLOCKS):
    """Per region: most-attended word, full and top block weights (gamma) and logits (beta)."""
    cfg = model.config
    image = dataset.image_by_id(image_id)
    if image.n_regions == 0:
        raise ValidationError(f"image {image_id} has no regions")
    if not 0 <= caption_index < len(dataset.captions):
        raise ValidationError(f"caption index {caption_index} outside [0, {len(dataset.captions)})")
    if not cfg.block_dim:
        raise ValidationError("model has no position path to visualise")
    caption = dataset.captions[caption_index]
    tokens = dataset.token_ids(cfg.max_tokens)[caption_index]
    words = caption.tokens[:len(tokens)]
    batch = model.batch([image])
    _, beta, gamma = model.position_path(batch)
    alpha = model.attention_map(batch, tokens)
    k = cfg.grid_k
    regions = []
    for i, box in enumerate(image.boxes):
        blocks = [int(q) + 1 for q in batch.block_idx[0, i]]
        g = [float(v) for v in gamma.data[0, i]]
        ranked = sorted(range(len(blocks)), key=lambda j: (-g[j], blocks[j]))[:top]
        t = int(np.argmax(alpha[i]))
        regions.append({
            "region": i,
            "box": list(box.as_tuple()),
            "word": words[t],
            "word_index": t,
            "alpha": [float(v) for v in alpha[i]],
            "blocks": blocks,
            "gamma": g,
            "beta": None if beta is None else [float(v) for v in beta.data[0, i]],
            "top_blocks": [
                {"block": blocks[j], "row": (blocks[j] - 1) // k, "col": (blocks[j] - 1) % k, "weight": g[j]}
                for j in ranked
            ],
        })
    return {
        "image_id": image.id,
        "caption_index": caption_index,
        "caption": words,
        "direction": cfg.direction,
        "k": k,
        "regions": regions,
    }


def export_attention_viz(model, dataset, image_id, caption_index, out_dir, top=TOP_BLOCKS):
    """Write attention.json plus one K x K gamma heatmap per region; returns the summary."""
    summary = attention_summary(model, dataset, image_id, caption_index, top)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = summary["k"]
    for reg in summary["regions"]:
        grid = np.zeros(k * k)
        for q, w in zip(reg["blocks"], reg["gamma"]):
            grid[q - 1] += w
        name = f"region_{reg['region']:02d}.pgm"
        write_pgm(out / name, grid.reshape(k, k))
        reg["heatmap"] = name
    (out / "attention.json").write_text(canonical_json(summary), encoding="utf-8")
    return summary
