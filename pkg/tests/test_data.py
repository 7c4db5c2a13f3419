import json
import struct

import numpy as np
import pytest

from pfan.data import (FEATURE_MAGIC, SynthSpec, gen_synthetic, load_dataset, load_manifest, read_features,
                       save_manifest, subset, synthesize, write_features)
from pfan.errors import ValidationError
from pfan.text import Vocabulary


def write_dataset(root, images, captions, features=None, vocab=("dog", "cat")):
    features = np.arange(12, dtype=np.float32).reshape(3, 4) if features is None else features
    write_features(root / "f.bin", features)
    Vocabulary(list(vocab)).save(root / "v.txt")
    manifest = {"split": "train", "vocabulary": "v.txt", "features": "f.bin", "images": images, "captions": captions}
    save_manifest(root / "train.json", manifest)
    return root / "train.json"


IMAGE = {"id": "a", "width": 10, "height": 8, "regions": [{"box": [0, 0, 5, 4], "feature_index": 0},
                                                          {"box": [2.5, 1.5, 9.2, 7.9], "feature_index": 2}]}
CAPTION = {"image_id": "a", "tokens": ["dog", "runs"]}


# feature file -------------------------------------------------------------------------


def test_features_round_trip_bit_exact(tmp_path, rng):
    arr = rng.standard_normal((7, 5)).astype(np.float32)
    arr[0, 0] = np.float32(1e-38)
    write_features(tmp_path / "f.bin", arr)
    assert read_features(tmp_path / "f.bin").tobytes() == arr.tobytes()


def test_feature_header(tmp_path):
    write_features(tmp_path / "f.bin", np.ones((2, 3), dtype=np.float32))
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:8] == FEATURE_MAGIC and struct.unpack("<II", raw[8:16]) == (2, 3)
    assert len(raw) == 16 + 4 * 6


def test_payload_length_mismatch(tmp_path):
    write_features(tmp_path / "f.bin", np.ones((2, 3), dtype=np.float32))
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "f.bin").write_bytes(raw[:-4])
    with pytest.raises(ValidationError, match="payload length mismatch"):
        read_features(tmp_path / "f.bin")


def test_bad_magic(tmp_path):
    (tmp_path / "f.bin").write_bytes(b"NOTMAGIC" + struct.pack("<II", 0, 0))
    with pytest.raises(ValidationError, match="magic"):
        read_features(tmp_path / "f.bin")


def test_non_finite_feature(tmp_path):
    raw = FEATURE_MAGIC + struct.pack("<II", 1, 2) + np.array([1.0, np.nan], dtype="<f4").tobytes()
    (tmp_path / "f.bin").write_bytes(raw)
    with pytest.raises(ValidationError, match="non-finite"):
        read_features(tmp_path / "f.bin")


def test_missing_feature_file(tmp_path):
    with pytest.raises(ValidationError, match="missing"):
        read_features(tmp_path / "nope.bin")


# manifest ---------------------------------------------------------------------------


def test_load_dataset_clips_boxes(tmp_path):
    ds = load_dataset(write_dataset(tmp_path, [IMAGE], [CAPTION]))
    im = ds.images[0]
    assert [b.as_tuple() for b in im.boxes] == [(0, 0, 5, 4), (2, 1, 10, 8)]
    assert im.features.tolist() == [[0, 1, 2, 3], [8, 9, 10, 11]]
    assert ds.token_ids() == [[2, 1]]


def test_directory_resolves_to_split_manifest(tmp_path):
    write_dataset(tmp_path, [IMAGE], [CAPTION])
    assert load_dataset(tmp_path, split="train").images[0].id == "a"


def test_no_images(tmp_path):
    with pytest.raises(ValidationError, match="no images"):
        load_dataset(write_dataset(tmp_path, [], [CAPTION]))


def test_rejected_region_is_reported(tmp_path):
    image = dict(IMAGE, regions=IMAGE["regions"] + [{"box": [20, 20, 30, 30], "feature_index": 1}])
    ds = load_dataset(write_dataset(tmp_path, [image], [CAPTION]))
    assert ds.images[0].n_regions == 2
    assert ds.rejected == [{"image_id": "a", "region": 2, "reason": ds.rejected[0]["reason"]}]
    assert "a/2" in ds.rejected[0]["reason"]


@pytest.mark.parametrize("images,captions,match", [
    ([dict(IMAGE, regions=[{"box": [0, 0, 2, 2], "feature_index": 3}])], [CAPTION], "out of range"),
    ([IMAGE], [{"image_id": "b", "tokens": ["dog"]}], "unknown image"),
    ([IMAGE, IMAGE], [CAPTION], "duplicate"),
    ([IMAGE], [{"image_id": "a", "tokens": []}], "no tokens"),
    ([dict(IMAGE, width=0)], [CAPTION], "nonpositive"),
])
def test_invalid_manifests(tmp_path, images, captions, match):
    with pytest.raises(ValidationError, match=match):
        load_dataset(write_dataset(tmp_path, images, captions))


def test_too_many_regions(tmp_path):
    with pytest.raises(ValidationError, match="exceeds"):
        load_dataset(write_dataset(tmp_path, [IMAGE], [CAPTION]), max_regions=1)


def test_missing_manifest(tmp_path):
    with pytest.raises(ValidationError, match="missing manifest"):
        load_dataset(tmp_path / "none.json")


def test_manifest_write_is_idempotent(tmp_path):
    path = write_dataset(tmp_path, [IMAGE], [CAPTION])
    first = path.read_bytes()
    save_manifest(path, load_manifest(path))
    assert path.read_bytes() == first
    assert first == (json.dumps(json.loads(first), sort_keys=True, indent=2) + "\n").encode()


# synthetic -------------------------------------------------------------------------


def test_synthetic_output_is_byte_identical(tmp_path):
    spec = SynthSpec(n_pairs=12, seed=3)
    gen_synthetic(tmp_path / "a", spec, ("train", "test"))
    gen_synthetic(tmp_path / "b", spec, ("train", "test"))
    for name in ("features.bin", "vocab.txt", "train.json", "test.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synthetic_dataset_shape(tmp_path):
    gen_synthetic(tmp_path, SynthSpec())
    ds = load_dataset(tmp_path)
    assert len(ds.images) == 32 and len(ds.captions) == 32
    assert all(im.n_regions == 3 and im.features.shape == (3, 16) for im in ds.images)
    assert all(len(c.tokens) == 4 for c in ds.captions)
    assert not ds.rejected


def test_synthetic_classes_are_balanced():
    manifest, _, _ = synthesize(SynthSpec(n_pairs=32, n_classes=4))
    words = [c["tokens"] for c in manifest["captions"]]
    counts = {f"c{k}": sum(f"c{k}" in t for t in words) for k in range(4)}
    assert set(counts.values()) == {8}


def test_bad_synthetic_spec():
    with pytest.raises(ValidationError):
        SynthSpec(n_pairs=0)


def test_subset_takes_first_pairs(tmp_path):
    gen_synthetic(tmp_path, SynthSpec(n_pairs=10))
    ds = subset(load_dataset(tmp_path), 4)
    assert [im.id for im in ds.images] == [0, 1, 2, 3]
    assert [c.image_id for c in ds.captions] == [0, 1, 2, 3]
