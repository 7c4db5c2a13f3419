import math

import numpy as np
import pytest

from pfan import numerics as nx
from pfan.config import TrainConfig
from pfan.data import SynthSpec, in_memory_synthetic
from pfan.errors import DimensionError, NumericError
from pfan.numerics import GradTape, Tensor
from pfan.position import (augment_and_project, baseline_position_feature, position_feature,
                           position_logits, position_weights)
from pfan.trainer import train

from conftest import fd_gradient


def cancellation_form(beta, a):
    w = np.exp(beta) * a
    return w / w.sum(axis=-1, keepdims=True)


# logits --------------------------------------------------------------------------


def test_zero_bilinear_gives_zero_logits(rng):
    beta = position_logits(Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal((3, 4))),
                           Tensor(np.zeros((5, 4))))
    assert beta.data.tolist() == [0.0, 0.0, 0.0]


def test_unit_vectors_give_tanh_one():
    v = np.zeros(5)
    v[0] = 1.0
    b = np.zeros((1, 3))
    b[0, 0] = 1.0
    m = np.eye(5, 3)
    beta = position_logits(Tensor(v), Tensor(b), Tensor(m))
    assert beta.data[0] == pytest.approx(math.tanh(1.0), abs=1e-15)


def test_logits_in_open_interval(rng):
    beta = position_logits(Tensor(10 * rng.standard_normal((2, 5))), Tensor(rng.standard_normal((2, 4, 3))),
                           Tensor(rng.standard_normal((5, 3))))
    assert beta.shape == (2, 4)
    assert np.all(np.abs(beta.data) <= 1.0)


def test_logits_dimension_mismatch():
    with pytest.raises(DimensionError):
        position_logits(Tensor(np.ones(5)), Tensor(np.ones((3, 4))), Tensor(np.ones((6, 4))))


def test_logits_match_direct_bilinear_form(rng):
    v, b, m = rng.standard_normal(6), rng.standard_normal((4, 3)), rng.standard_normal((6, 3))
    beta = position_logits(Tensor(v), Tensor(b), Tensor(m)).data
    assert beta == pytest.approx([math.tanh(v @ m @ b[j]) for j in range(4)], abs=1e-14)


# weights ----------------------------------------------------------------------------


def test_equal_logits_reduce_to_overlaps():
    g = position_weights(Tensor([0.0, 0.0]), Tensor([0.75, 0.25])).data
    assert g == pytest.approx([0.75, 0.25], abs=1e-15)


def test_single_block_mass(rng):
    g = position_weights(Tensor(rng.standard_normal(3)), Tensor([1.0, 0.0, 0.0])).data
    assert g.tolist() == [1.0, 0.0, 0.0]


def test_two_to_one_exponentials():
    beta = Tensor([math.log(2.0), 0.0])  # exp(beta) = (2, 1)
    g = position_weights(beta, Tensor([0.5, 0.5])).data
    assert g == pytest.approx([2 / 3, 1 / 3], abs=1e-15)


def test_two_step_equals_cancellation_form():
    rng = np.random.default_rng(11)
    beta = np.tanh(rng.standard_normal((10_000, 15)) * 3)
    a = rng.uniform(0, 1, (10_000, 15))
    a[rng.uniform(size=a.shape) < 0.2] = 0.0
    a[:, 0] += 1e-3  # keep every row nondegenerate
    a /= a.sum(axis=1, keepdims=True)
    g = position_weights(Tensor(beta), Tensor(a)).data
    assert np.max(np.abs(g - cancellation_form(beta, a))) < 1e-12
    assert np.max(np.abs(g.sum(axis=1) - 1.0)) < 1e-9


def test_padding_blocks_get_zero_weight(rng):
    a = np.array([0.6, 0.4, 0.0, 0.0])
    g = position_weights(Tensor(rng.standard_normal(4)), Tensor(a)).data
    assert g[2] == 0.0 and g[3] == 0.0


def test_degenerate_overlaps_raise():
    with pytest.raises(NumericError):
        position_weights(Tensor([0.1, 0.2]), Tensor([0.0, 0.0]))


def test_weight_shape_mismatch():
    with pytest.raises(DimensionError):
        position_weights(Tensor([0.1, 0.2]), Tensor([1.0]))


def test_weights_gradient_matches_finite_differences(rng):
    beta = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    a = Tensor(rng.uniform(0.1, 1, (2, 4)), requires_grad=True)
    w = rng.standard_normal((2, 4))
    with GradTape() as tape:
        loss = nx.sum(nx.mul(position_weights(beta, a), Tensor(w)))
    grads = tape.gradient(loss, {"beta": beta, "a": a})

    def f():
        return float(np.sum(cancellation_form(beta.data, a.data) * w))

    for name, p in (("beta", beta), ("a", a)):
        numeric = fd_gradient(f, p.data, h=1e-6)
        assert np.max(nx.relative_error(grads[name], numeric)) < 1e-6


# features -------------------------------------------------------------------------


def test_single_block_feature_is_the_block(rng):
    b = rng.standard_normal((1, 5))
    assert position_feature(Tensor(b), Tensor([1.0])).data == pytest.approx(b[0])


def test_equal_blocks_give_that_block(rng):
    c = rng.standard_normal(4)
    blocks = np.tile(c, (3, 1))
    gamma = position_weights(Tensor(rng.standard_normal(3)), Tensor([0.2, 0.5, 0.3]))
    assert position_feature(Tensor(blocks), gamma).data == pytest.approx(c, abs=1e-14)


def test_feature_inside_convex_hull(rng):
    blocks = rng.standard_normal((6, 4, 3))
    a = rng.uniform(0.1, 1, (6, 4))
    gamma = position_weights(Tensor(rng.standard_normal((6, 4))), Tensor(a / a.sum(1, keepdims=True)))
    pe = position_feature(Tensor(blocks), gamma).data
    assert np.all(pe <= blocks.max(axis=1) + 1e-12)
    assert np.all(pe >= blocks.min(axis=1) - 1e-12)


def test_baseline_single_block_scales_by_overlap(rng):
    b = rng.standard_normal((1, 5))
    assert baseline_position_feature(Tensor(b), Tensor([0.4])).data == pytest.approx(0.4 * b[0])


def test_zero_projection_gives_bias(rng):
    bias = rng.standard_normal(6)
    _, ve = augment_and_project(Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal(3)),
                                Tensor(np.zeros((6, 8))), Tensor(bias))
    assert ve.data.tolist() == bias.tolist()


def test_full_size_dimensions():
    vp, ve = augment_and_project(Tensor(np.zeros(2048)), Tensor(np.zeros(200)),
                                 Tensor(np.zeros((1024, 2248))), Tensor(np.zeros(1024)))
    assert vp.shape == (2248,) and ve.shape == (1024,)


def test_augmented_vector_keeps_both_parts(rng):
    v, pe = rng.standard_normal(5), rng.standard_normal(3)
    vp, _ = augment_and_project(Tensor(v), Tensor(pe), Tensor(np.zeros((2, 8))), Tensor(np.zeros(2)))
    assert vp.data[:5].tolist() == v.tolist() and vp.data[5:].tolist() == pe.tolist()


def test_projection_dimension_mismatch():
    with pytest.raises(DimensionError):
        augment_and_project(Tensor(np.zeros(5)), Tensor(np.zeros(3)), Tensor(np.zeros((2, 7))), Tensor(np.zeros(2)))


def test_training_without_position_path():
    cfg = TrainConfig(grid_k=4, top_l=3, visual_dim=16, word_dim=8, block_dim=0, joint_dim=16, batch_size=8,
                      epochs=3, precision="double")
    data = in_memory_synthetic(SynthSpec(n_pairs=8))
    state = train(cfg, data)
    assert "block_embedding" not in state.model.params
    assert len(state.losses) == 3 and all(np.isfinite(state.losses))
