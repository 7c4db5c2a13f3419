"""Dataset files: binary region features, vocabulary, JSON manifest; synthetic data.

Feature file layout (little-endian)::

    b"PFANF001" | u32 region count | u32 dimension D | count*D float32, row-major

A manifest lists images with their region boxes (pixel coordinates, may be
fractional or exceed the image; they are clipped on load) and the row of
the feature file holding each region's visual feature, plus captions as
token lists.  ``vocabulary`` and ``features`` are paths relative to the
manifest.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import canonical_json
from .errors import RejectedRegionError, ValidationError
from .geometry import BlockGrid, clip_box, encode_regions
from .text import Vocabulary, truncate

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"PFANF001"
_HEADER = struct.Struct("<8sII")
SPLITS = ("train", "val", "test")


def write_features(path, features):
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValidationError("feature array must be 2-D (count, D)")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("non-finite feature value")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_features(path):
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise ValidationError(f"missing feature file: {path}") from None
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, count, dim = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * count * dim:
        raise ValidationError(
            f"{path}: payload length mismatch ({len(payload)} bytes, expected {4 * count * dim})"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        bad = int(np.argwhere(~np.isfinite(arr))[0][0])
        raise ValidationError(f"{path}: non-finite feature in region row {bad}")
    return arr


@dataclass
class ImageRecord:
    id: object
    width: int
    height: int
    boxes: list  # clipped RegionBox per kept region
    features: np.ndarray  # (n, D) float32
    _positions: dict = field(default_factory=dict, repr=False)

    @property
    def n_regions(self):
        return len(self.boxes)

    def positions(self, k, l):
        """Cached (0-based block indices, overlap weights), each (n, l)."""
        key = (k, l)
        if key not in self._positions:
            grid = BlockGrid(self.width, self.height, k)
            self._positions[key] = encode_regions(self.boxes, grid, l)
        return self._positions[key]


@dataclass
class CaptionRecord:
    image_id: object
    tokens: list


@dataclass
class Dataset:
    split: str
    images: list
    captions: list
    vocab: Vocabulary
    manifest: dict
    root: Path | None = None
    rejected: list = field(default_factory=list)

    def __post_init__(self):
        self.image_pos = {im.id: i for i, im in enumerate(self.images)}

    @property
    def feature_dim(self):
        return self.images[0].features.shape[1]

    def image_by_id(self, image_id):
        for im in self.images:
            if im.id == image_id or str(im.id) == str(image_id):
                return im
        raise ValidationError(f"no image with id {image_id!r}")

    def caption_image_index(self):
        return np.array([self.image_pos[c.image_id] for c in self.captions], dtype=np.int64)

    def token_ids(self, max_tokens=None):
        out = []
        for cap in self.captions:
            toks = cap.tokens if max_tokens is None else truncate(cap.tokens, max_tokens)
            out.append(self.vocab.encode(toks))
        return out


def load_manifest(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"missing manifest: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: manifest must be a JSON object")
    return data


def save_manifest(path, manifest):
    Path(path).write_text(canonical_json(manifest), encoding="utf-8")


def resolve_manifest(path, split="train"):
    """Accept a manifest file or a dataset directory holding ``<split>.json``."""
    path = Path(path)
    return path / f"{split}.json" if path.is_dir() else path


def load_dataset(path, max_regions=36, split=None):
    """Load and validate a dataset eagerly.

    Regions that are empty after clipping are dropped and listed in
    ``Dataset.rejected``; every other defect raises ``ValidationError``.
    """
    mpath = resolve_manifest(path, split or "train")
    manifest = load_manifest(mpath)
    root = mpath.parent
    for key in ("images", "captions", "vocabulary", "features"):
        if key not in manifest:
            raise ValidationError(f"{mpath}: missing field {key!r}")
    split_name = manifest.get("split", split or "train")
    if split_name not in SPLITS:
        raise ValidationError(f"{mpath}: split must be one of {SPLITS}, got {split_name!r}")
    if not manifest["images"]:
        raise ValidationError(f"{mpath}: no images")

    features = read_features(root / manifest["features"])
    try:
        vocab = Vocabulary.load(root / manifest["vocabulary"])
    except FileNotFoundError:
        raise ValidationError(f"missing vocabulary file: {root / manifest['vocabulary']}") from None

    images, rejected, seen = [], [], set()
    for entry in manifest["images"]:
        try:
            image_id, width, height = entry["id"], int(entry["width"]), int(entry["height"])
            regions = entry["regions"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{mpath}: malformed image entry ({exc})") from None
        if image_id in seen:
            raise ValidationError(f"{mpath}: duplicate image id {image_id!r}")
        seen.add(image_id)
        if width < 1 or height < 1:
            raise ValidationError(f"image {image_id}: nonpositive size")
        if len(regions) > max_regions:
            raise ValidationError(f"image {image_id}: {len(regions)} regions exceeds maximum {max_regions}")
        boxes, rows = [], []
        for j, reg in enumerate(regions):
            idx = reg.get("feature_index")
            if not isinstance(idx, int) or not 0 <= idx < features.shape[0]:
                raise ValidationError(f"image {image_id} region {j}: feature_index {idx!r} out of range")
            try:
                boxes.append(clip_box(reg["box"], width, height, region_id=f"{image_id}/{j}"))
            except RejectedRegionError as exc:
                log.warning("%s", exc)
                rejected.append({"image_id": image_id, "region": j, "reason": str(exc)})
                continue
            rows.append(idx)
        if not boxes:
            raise ValidationError(f"image {image_id}: no regions left after clipping")
        images.append(ImageRecord(image_id, width, height, boxes, features[rows]))

    captions = []
    for cap in manifest["captions"]:
        if cap.get("image_id") not in seen:
            raise ValidationError(f"{mpath}: caption refers to unknown image {cap.get('image_id')!r}")
        tokens = cap.get("tokens")
        if not tokens or not all(isinstance(t, str) for t in tokens):
            raise ValidationError(f"{mpath}: caption for image {cap['image_id']!r} has no tokens")
        captions.append(CaptionRecord(cap["image_id"], list(tokens)))
    if not captions:
        raise ValidationError(f"{mpath}: no captions")
    return Dataset(split_name, images, captions, vocab, manifest, root, rejected)


def subset(dataset, n_pairs):
    """First ``n_pairs`` images, each with its first caption."""
    images = dataset.images[:n_pairs]
    keep = {im.id for im in images}
    captions, used = [], set()
    for cap in dataset.captions:
        if cap.image_id in keep and cap.image_id not in used:
            captions.append(cap)
            used.add(cap.image_id)
    return Dataset(dataset.split, images, captions, dataset.vocab, dataset.manifest, dataset.root)


# synthetic data --------------------------------------------------------------------


@dataclass
class SynthSpec:
    n_pairs: int = 32
    n_regions: int = 3
    n_tokens: int = 4
    dim: int = 16
    vocab_size: int | None = None
    n_classes: int = 4
    width: int = 64
    height: int = 64
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_pairs", "n_regions", "n_tokens", "dim", "n_classes", "width", "height"):
            if getattr(self, name) < 1:
                raise ValidationError(f"synthetic spec: {name} must be positive")
        if self.vocab_size is not None and self.vocab_size < 1:
            raise ValidationError("synthetic spec: vocab_size must be positive")

    @property
    def concepts(self):
        return self.vocab_size or self.n_pairs * self.n_regions


def synthesize(spec):
    """Build the synthetic manifest, feature matrix and vocabulary in memory.

    Pair i belongs to pattern class i mod C; the class fixes which cell of
    the image the regions sit in and contributes one caption word.  Every
    region carries a concept prototype (plus noise) whose word also appears
    in the caption, so both content and position carry signal.
    """
    rng = np.random.default_rng(spec.seed)
    n_concepts = spec.concepts
    prototypes = rng.standard_normal((n_concepts, spec.dim))
    perm = rng.permutation(n_concepts)
    cells = math.ceil(math.sqrt(spec.n_classes))
    cw, ch = spec.width / cells, spec.height / cells

    images, captions, rows = [], [], []
    for i in range(spec.n_pairs):
        cls = i % spec.n_classes
        cx0, cy0 = (cls % cells) * cw, (cls // cells) * ch
        regions, words = [], []
        for j in range(spec.n_regions):
            concept = int(perm[(i * spec.n_regions + j) % n_concepts])
            feat = prototypes[concept] + spec.noise * rng.standard_normal(spec.dim)
            bw, bh = cw * rng.uniform(0.4, 0.9), ch * rng.uniform(0.4, 0.9)
            x0 = cx0 + rng.uniform(0, cw - bw)
            y0 = cy0 + rng.uniform(0, ch - bh)
            box = [round(float(v), 2) for v in (x0, y0, x0 + bw, y0 + bh)]
            regions.append({"box": box, "feature_index": len(rows)})
            rows.append(feat)
            words.append(f"w{concept:03d}")
        seq = words + [f"c{cls}"]
        images.append({"id": i, "width": spec.width, "height": spec.height, "regions": regions})
        captions.append({"image_id": i, "tokens": [seq[t % len(seq)] for t in range(spec.n_tokens)]})

    vocab = Vocabulary.from_captions([c["tokens"] for c in captions])
    manifest = {
        "captions": captions,
        "features": "features.bin",
        "images": images,
        "split": "train",
        "synthetic": {k: v for k, v in vars(spec).items()},
        "tokenization": "lowercase-whitespace",
        "vocabulary": "vocab.txt",
    }
    return manifest, np.asarray(rows, dtype=np.float32), vocab


def gen_synthetic(out_dir, spec=None, splits=("train",)):
    """Write a synthetic dataset (manifest per split, shared features/vocab); returns the directory."""
    spec = spec or SynthSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, features, vocab = synthesize(spec)
    write_features(out / "features.bin", features)
    vocab.save(out / "vocab.txt")
    for split in splits:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        save_manifest(out / f"{split}.json", dict(manifest, split=split))
    return out


def in_memory_synthetic(spec):
    """Synthetic dataset without touching disk (gradient checks, tests)."""
    manifest, features, vocab = synthesize(spec)
    images = []
    for entry in manifest["images"]:
        boxes = [clip_box(r["box"], entry["width"], entry["height"]) for r in entry["regions"]]
        rows = [r["feature_index"] for r in entry["regions"]]
        images.append(ImageRecord(entry["id"], entry["width"], entry["height"], boxes, features[rows]))
    captions = [CaptionRecord(c["image_id"], c["tokens"]) for c in manifest["captions"]]
    return Dataset("train", images, captions, vocab, manifest)
