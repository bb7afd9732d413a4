import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfrnet import autodiff as ad
from gfrnet.supervision import class_weights, pixel_counts, resize_gt, stage_losses


def test_resize_2x2_block_to_one():
    lab = np.array([[[1, 2], [3, 4]]])
    assert resize_gt(lab, 1, 1).tolist() == [[[4]]]  # floor(0.5 * 2) = 1 -> bottom-right


def test_resize_identity_and_constant(rng):
    lab = rng.integers(0, 5, (2, 8, 8))
    np.testing.assert_array_equal(resize_gt(lab, 8, 8), lab)
    const = np.full((1, 16, 16), 3)
    np.testing.assert_array_equal(resize_gt(const, 4, 4), 3)


def test_resize_keeps_ignore_values(rng):
    lab = rng.choice([0, 1, 255], (1, 16, 16))
    out = resize_gt(lab, 4, 4)
    assert set(np.unique(out)) <= {0, 1, 255}


def test_resize_rejects_non_power_ratio():
    with pytest.raises(ValueError):
        resize_gt(np.zeros((1, 12, 12), int), 4, 4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 3), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_resize_commutes_with_label_permutation(log_scale, side, seed):
    rng = np.random.default_rng(seed)
    h = side * 2**log_scale
    lab = rng.integers(0, 4, (1, h, h))
    perm = rng.permutation(4)
    np.testing.assert_array_equal(resize_gt(perm[lab], side, side), perm[resize_gt(lab, side, side)])


def test_median_frequency_example():
    w = class_weights([50, 30, 20])
    np.testing.assert_allclose(w, [0.6, 1.0, 1.5])


def test_single_present_class_gets_unit_weight():
    np.testing.assert_allclose(class_weights([0, 7, 0]), [0, 1, 0])


def test_class_weights_all_zero():
    with pytest.raises(ValueError):
        class_weights([0, 0])


def test_pixel_counts_skip_ignore():
    lab = np.array([[0, 1, 255], [1, 1, 2]])
    assert pixel_counts(lab, 3).tolist() == [1, 3, 1]


def _outputs(rng, sizes, C=3):
    g = ad.Graph()
    maps = [g.leaf(rng.standard_normal((1, C, s, s))) for s in sizes]
    return SimpleNamespace(maps=maps), g


def test_one_loss_per_map(f64, rng):
    out, _ = _outputs(rng, (2, 4, 8, 16))
    lab = rng.integers(0, 3, (1, 64, 64))
    lb = stage_losses(out, lab)
    assert len(lb.per_stage) == 4
    assert lb.total.value == pytest.approx(sum(lb.values()))


def test_last_only_weights(f64, rng):
    out, _ = _outputs(rng, (2, 4, 8))
    lab = rng.integers(0, 3, (1, 32, 32))
    lb = stage_losses(out, lab, stage_weights=[0, 0, 1])
    assert lb.total.value == pytest.approx(lb.values()[-1])


def test_stage_weight_scaling(f64, rng):
    out, _ = _outputs(rng, (2, 4))
    lab = rng.integers(0, 3, (1, 8, 8))
    a = stage_losses(out, lab, stage_weights=[1, 1]).total.value
    b = stage_losses(out, lab, stage_weights=[2.5, 2.5]).total.value
    assert b == pytest.approx(2.5 * a)


def test_perfect_logits_give_near_zero_loss(f64):
    lab = np.random.default_rng(0).integers(0, 3, (1, 8, 8))
    g = ad.Graph()
    maps = []
    for s in (2, 4, 8):
        onehot = np.eye(3)[resize_gt(lab, s, s)].transpose(0, 3, 1, 2)
        maps.append(g.leaf(onehot * 40.0))
    lb = stage_losses(SimpleNamespace(maps=maps), lab)
    assert lb.total.value < 1e-5


def test_ignored_pixels_do_not_matter(f64, rng):
    lab = rng.integers(0, 3, (1, 8, 8))
    lab[0, :4] = 255
    g = ad.Graph()
    scores = rng.standard_normal((1, 3, 8, 8))
    a = stage_losses(SimpleNamespace(maps=[g.leaf(scores)]), lab).total.value
    scores2 = scores.copy()
    scores2[..., :4, :] += rng.standard_normal((1, 3, 4, 8)) * 10
    b = stage_losses(SimpleNamespace(maps=[g.leaf(scores2)]), lab).total.value
    assert a == b


def test_weighted_loss_matches_hand_value(f64):
    g = ad.Graph()
    s = g.leaf(np.zeros((1, 2, 1, 2)))
    lb = stage_losses(SimpleNamespace(maps=[s]), np.array([[[0, 1]]]), weights=np.array([1.0, 3.0]))
    assert lb.total.value == pytest.approx(2 * math.log(2))


def test_stage_weight_count_mismatch(f64, rng):
    out, _ = _outputs(rng, (2, 4))
    with pytest.raises(ValueError, match="expected 2"):
        stage_losses(out, np.zeros((1, 8, 8), int), stage_weights=[1.0])


def test_equal_counts_give_unit_weights():
    np.testing.assert_allclose(class_weights([7, 7, 7, 7]), 1.0)


def test_class_weight_scaling_scales_loss_and_gradient(f64, rng):
    lab = rng.integers(0, 3, (1, 8, 8))
    scores = rng.standard_normal((1, 3, 8, 8))
    w = np.array([0.5, 1.2, 2.0])

    def run(weights):
        g = ad.Graph()
        s = g.leaf(scores)
        lb = stage_losses(SimpleNamespace(maps=[s]), lab, weights=weights)
        g.backward(lb.total)
        return lb.total.value, s.grad

    l1, g1 = run(w)
    l2, g2 = run(3.0 * w)
    assert l2 == pytest.approx(3.0 * l1, rel=1e-12)
    np.testing.assert_allclose(g2, 3.0 * g1, rtol=1e-12)
