"""Pure-Python geometry kernels, used when the compiled module is unavailable."""
import numpy as np


def _edges(extent, k):
    return [(i * extent) // k for i in range(k + 1)]


def overlap_counts(boxes, width, height, k):
    """Pixel overlap of every box with every block, blocks in row-major order.

    ``boxes`` is an (n, 4) integer array of clipped half-open boxes.
    """
    xs, ys = _edges(width, k), _edges(height, k)
    out = np.zeros((len(boxes), k * k), dtype=np.int64)
    for i, (x0, y0, x1, y1) in enumerate(np.asarray(boxes, dtype=np.int64).tolist()):
        ow = [max(0, min(x1, xs[c + 1]) - max(x0, xs[c])) for c in range(k)]
        oh = [max(0, min(y1, ys[r + 1]) - max(y0, ys[r])) for r in range(k)]
        row = out[i]
        for r in range(k):
            if oh[r]:
                for c in range(k):
                    row[r * k + c] = oh[r] * ow[c]
    return out


def select_top(counts, l):
    """Indices (0-based) of the ``l`` largest counts per row; ties go to the lower index."""
    counts = np.asarray(counts, dtype=np.int64)
    out = np.empty((counts.shape[0], l), dtype=np.int64)
    for i, row in enumerate(counts.tolist()):
        order = sorted(range(len(row)), key=lambda q: (-row[q], q))
        out[i] = order[:l]
    return out
