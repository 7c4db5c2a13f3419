import numpy as np
import pytest

from pfan import numerics as nx
from pfan.errors import DimensionError, ValidationError, VocabularyError
from pfan.numerics import GradTape, Tensor
from pfan.text import (Vocabulary, cell_names, embed_words, encode_sentence, encode_sentences, gru_cell,
                       tokenize, truncate)

from conftest import fd_gradient

D_WORD, HIDDEN, N_VOCAB = 5, 4, 9


def random_params(rng, d=D_WORD, h=HIDDEN, n=N_VOCAB):
    params = {"word_embedding": Tensor(rng.standard_normal((d, n)) * 0.5, requires_grad=True)}
    for side in ("fwd", "bwd"):
        for name in cell_names():
            shape = {"W": (h, d), "U": (h, h), "b": (h,)}[name[0]]
            params[f"gru.{side}.{name}"] = Tensor(rng.standard_normal(shape) * 0.5, requires_grad=True)
    return params


def zero_cell(d, h):
    cell = {}
    for name in cell_names():
        shape = {"W": (h, d), "U": (h, h), "b": (h,)}[name[0]]
        cell[name] = Tensor(np.zeros(shape))
    return cell


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def numpy_gru(xs, p, side):
    """Plain loop over the same update equations."""
    g = {k: p[f"gru.{side}.{k}"].data for k in cell_names()}
    h = np.zeros(g["U_z"].shape[0])
    out = []
    for x in xs:
        z = sigmoid(g["W_z"] @ x + g["b_z"] + g["U_z"] @ h)
        r = sigmoid(g["W_r"] @ x + g["b_r"] + g["U_r"] @ h)
        cand = np.tanh(g["W_h"] @ x + g["b_h"] + g["U_h"] @ (r * h))
        h = (1 - z) * h + z * cand
        out.append(h)
    return np.array(out)


def numpy_encoder(tokens, p):
    xs = p["word_embedding"].data[:, tokens].T
    fwd = numpy_gru(xs, p, "fwd")
    bwd = numpy_gru(xs[::-1], p, "bwd")[::-1]
    e = (fwd + bwd) / 2
    return e / (np.linalg.norm(e, axis=1, keepdims=True) + nx.COSINE_EPS)


# vocabulary ---------------------------------------------------------------------


def test_reserved_indices():
    v = Vocabulary(["a", "b"])
    assert v.index("<pad>") == 0 and v.index("<unk>") == 1
    assert v.encode(["a", "b", "zzz"]) == [2, 3, 1]
    assert len(v) == 4


def test_vocabulary_from_captions_first_appearance():
    v = Vocabulary.from_captions([["b", "a"], ["a", "c"]])
    assert v.itos == ["<pad>", "<unk>", "b", "a", "c"]


def test_vocabulary_file_round_trip(tmp_path):
    v = Vocabulary(["dog", "cat"])
    v.save(tmp_path / "vocab.txt")
    assert (tmp_path / "vocab.txt").read_text() == "<pad>\n<unk>\ndog\ncat\n"
    assert Vocabulary.load(tmp_path / "vocab.txt").itos == v.itos


@pytest.mark.parametrize("text", ["dog\n<unk>\n", "<pad>\n<unk>\ndog\ndog\n"])
def test_bad_vocabulary_files(tmp_path, text):
    (tmp_path / "v.txt").write_text(text)
    with pytest.raises(VocabularyError):
        Vocabulary.load(tmp_path / "v.txt")


def test_tokenize_lowercases():
    assert tokenize("A Dog  runs\tfast") == ["a", "dog", "runs", "fast"]


def test_truncate_warns(caplog):
    assert truncate(list("abcdef"), 4) == list("abcd")
    assert "truncated" in caplog.text
    assert truncate(["a"], 4) == ["a"]


# embedding --------------------------------------------------------------------------


def test_embedding_equals_one_hot_product(rng):
    w = rng.standard_normal((D_WORD, N_VOCAB))
    tokens = [0, 3, 3, 8, 1]
    one_hot = np.eye(N_VOCAB)[:, tokens]
    assert embed_words(tokens, Tensor(w)).data == pytest.approx((w @ one_hot).T, abs=0)


def test_padding_index_is_first_column(rng):
    w = rng.standard_normal((D_WORD, N_VOCAB))
    assert embed_words([0], Tensor(w)).data[0].tolist() == w[:, 0].tolist()


def test_unknown_word_uses_reserved_column(rng):
    w = rng.standard_normal((D_WORD, N_VOCAB))
    v = Vocabulary(["a"])
    assert embed_words(v.encode(["never-seen"]), Tensor(w)).data[0].tolist() == w[:, 1].tolist()


def test_index_outside_vocabulary(rng):
    with pytest.raises(VocabularyError):
        embed_words([N_VOCAB], Tensor(rng.standard_normal((D_WORD, N_VOCAB))))


# GRU --------------------------------------------------------------------------------


def test_zero_cell_halves_previous_state():
    v = np.array([[0.3, -1.2, 2.0]])
    h = gru_cell(Tensor(np.zeros((1, 2))), Tensor(v), zero_cell(2, 3))
    assert h.data.tolist() == (0.5 * v).tolist()


def test_zero_cell_from_zero_state():
    h = gru_cell(Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 3))), zero_cell(2, 3))
    assert h.data.tolist() == [[0.0, 0.0, 0.0]]


def test_cell_dimension_mismatch():
    with pytest.raises(DimensionError):
        gru_cell(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 3))), zero_cell(2, 3))


def test_encoder_matches_numpy_loop(rng):
    p = random_params(rng)
    tokens = [2, 5, 1, 7]
    out = encode_sentence(tokens, p).data
    assert out == pytest.approx(numpy_encoder(tokens, p), abs=1e-13)


def test_encoder_shapes_and_unit_norm(rng):
    p = random_params(rng)
    out = encode_sentences(np.array([[2, 3, 4], [5, 6, 7]]), p)
    assert out.shape == (2, 3, HIDDEN)
    assert np.linalg.norm(out.data, axis=-1) == pytest.approx(np.ones((2, 3)), abs=1e-7)


def test_averaging_before_normalization(rng):
    p = random_params(rng)
    raw = encode_sentence([2, 3], p, normalize=False).data
    xs = p["word_embedding"].data[:, [2, 3]].T
    fwd, bwd = numpy_gru(xs, p, "fwd"), numpy_gru(xs[::-1], p, "bwd")[::-1]
    assert raw == pytest.approx((fwd + bwd) / 2, abs=1e-14)


def test_direction_swap(rng):
    """Reversing the sentence and swapping the two cells reverses the output."""
    p = random_params(rng)
    swapped = dict(p)
    for name in cell_names():
        swapped[f"gru.fwd.{name}"], swapped[f"gru.bwd.{name}"] = p[f"gru.bwd.{name}"], p[f"gru.fwd.{name}"]
    tokens = [4, 2, 8, 3, 6]
    a = encode_sentence(tokens, p).data
    b = encode_sentence(tokens[::-1], swapped).data
    assert a == pytest.approx(b[::-1], abs=1e-14)


def test_empty_sentence():
    with pytest.raises(ValidationError):
        encode_sentence([], {})


def test_encoder_gradients_match_finite_differences(rng):
    p = random_params(rng)
    tokens = [2, 5, 5]
    w = rng.standard_normal((3, HIDDEN))
    with GradTape() as tape:
        loss = nx.sum(nx.mul(encode_sentence(tokens, p), Tensor(w)))
    grads = tape.gradient(loss, p)

    def f():
        return float(np.sum(numpy_encoder(tokens, p) * w))

    for name, t in p.items():
        numeric = fd_gradient(f, t.data, h=1e-6)
        assert np.max(nx.relative_error(grads[name], numeric)) < 1e-5, name


def test_first_word_depends_on_later_words(rng):
    p = random_params(rng)
    a = encode_sentence([2, 3, 4], p).data[0]
    b = encode_sentence([2, 3, 5], p).data[0]
    assert not np.allclose(a, b)
