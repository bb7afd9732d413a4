import numpy as np
import pytest

from gfrnet import autodiff as ad
from gfrnet.arch import (ArchConfig, Bound, forward, gate_branches, gate_unit, infer, init_params,
                         labels_from_scores)
from gfrnet.supervision import stage_losses


def small(depth=5, num_classes=4, **kw):
    ch = kw.pop("stage_channels", tuple([4, 8, 8, 16, 16, 16, 16][:depth]))
    return ArchConfig(depth=depth, stage_channels=ch, num_classes=num_classes, **kw)


def run(cfg, h=64, w=64, seed=0):
    x = np.random.default_rng(seed).standard_normal((1, 3, h, w))
    return forward(x, init_params(cfg, seed), cfg)


@pytest.mark.parametrize("variant", ["gfrnet", "lrn"])
def test_stage_map_shapes_depth5(f64, variant):
    out = run(small(variant=variant))
    assert [m.shape for m in out.maps] == [(1, 4, s, s) for s in (2, 4, 8, 16)]


def test_feature_pyramid_non_square(f64):
    out = run(small(), h=96, w=64)
    assert out.features[2].shape[2:] == (12, 8)
    assert out.maps[-1].shape == (1, 4, 24, 16)


def test_depth7_has_five_refinements(f64):
    cfg = small(depth=7)
    out = run(cfg, 128, 128)
    assert len(out.refined) == 5 and len(out.maps) == 6
    assert out.maps[-1].shape[2:] == (32, 32)


def test_gate_shapes_and_width(f64):
    cfg = ArchConfig(depth=5, stage_channels=(8, 16, 32, 32, 64), num_classes=3)
    x = np.random.default_rng(0).standard_normal((1, 3, 128, 128))
    out = forward(x, init_params(cfg, 0), cfg)
    f4, f5 = out.features[3], out.features[4]
    assert f4.shape == (1, 32, 8, 8) and f5.shape == (1, 64, 4, 4)
    assert out.gates[0].shape == (1, 32, 8, 8)

    narrow = ArchConfig(depth=5, stage_channels=(8, 16, 32, 32, 64), num_classes=3, gate_channels=16)
    out = forward(x, init_params(narrow, 0), narrow)
    assert out.gates[0].shape == (1, 16, 8, 8)


def _gate_setup(mode):
    cfg = small(gate_mode=mode)
    params = init_params(cfg, 0)
    g = ad.Graph()
    P = Bound(params, g)
    rng = np.random.default_rng(3)
    shallow = g.leaf(rng.standard_normal((1, 16, 8, 8)))
    deep = g.leaf(rng.standard_normal((1, 16, 4, 4)))
    return P, shallow, deep, params


def test_gate_mul_vetoes_where_deep_branch_is_zero(f64):
    P, shallow, deep, params = _gate_setup("mul")
    # beta -> large negative makes the deep branch relu output exactly zero
    params.arrays["gate1.deep.bn.beta"][:] = -100.0
    m = gate_unit(shallow, deep, P, 1, "mul")
    np.testing.assert_array_equal(m.value, 0)


@pytest.mark.parametrize("mode", ["mul", "add"])
def test_vetoed_channel_passes_no_gradient_to_shallow_branch(f64, mode):
    P, shallow, deep, params = _gate_setup(mode)
    params.arrays["gate1.deep.bn.beta"][0] = -100.0  # veto channel 0 only
    u, v = gate_branches(shallow, deep, P, 1)
    m = ad.gate_combine(u, v, mode)
    assert np.all(v.value[:, 0] == 0)
    P.graph.backward(ad.project(m, np.random.default_rng(0).standard_normal(m.shape)))
    if mode == "mul":
        np.testing.assert_array_equal(u.grad[:, 0], 0)
        np.testing.assert_array_equal(m.value[:, 0], 0)
    else:
        assert np.abs(u.grad[:, 0]).sum() > 0
    assert np.abs(u.grad[:, 1:]).sum() > 0


def test_gate_add_keeps_shallow_when_deep_is_zero(f64):
    P, shallow, deep, params = _gate_setup("add")
    params.arrays["gate1.deep.bn.beta"][:] = -100.0
    m = gate_unit(shallow, deep, P, 1, "add")
    u = ad.relu(P.conv_bn("gate1.shallow", shallow))
    np.testing.assert_allclose(m.value, u.value)


def test_refinement_unit_channel_rules(f64):
    cfg = small(num_classes=5)
    p = init_params(cfg, 0)
    for k in range(1, 4):
        assert p.arrays[f"ru{k}.out.w"].shape[:2] == (5, 10)
        assert p.arrays[f"ru{k}.mconv.w"].shape[:2] == (5, cfg.gate_width(k))
    lrn = init_params(small(num_classes=5, variant="lrn"), 0)
    for k in range(1, 4):
        c_skip = cfg.stage_channels[cfg.skip_stage(k) - 1]
        assert lrn.arrays[f"ru{k}.out.w"].shape[:2] == (5, 5 + c_skip)


def test_shared_layers_have_identical_init():
    a = init_params(small(), 7)
    b = init_params(small(variant="lrn"), 7)
    shared = set(a.arrays) & set(b.arrays)
    assert any(n.startswith("enc") for n in shared) and "head.w" in shared
    for n in shared:
        if not n.startswith("ru"):
            np.testing.assert_array_equal(a.arrays[n], b.arrays[n])


def test_variants_produce_same_output_shapes(f64):
    a = run(small(variant="gfrnet"))
    b = run(small(variant="lrn"))
    assert [m.shape for m in a.maps] == [m.shape for m in b.maps]


@pytest.mark.parametrize("hw", [(64, 64), (32, 96)])
def test_infer_returns_input_sized_labels(f64, hw):
    cfg = small()
    x = np.random.default_rng(0).standard_normal((1, 3, *hw))
    labels = infer(x, init_params(cfg, 0), cfg)
    assert labels.shape == (1, *hw)
    assert labels.min() >= 0 and labels.max() < cfg.num_classes


def test_tied_scores_pick_lowest_class():
    scores = np.zeros((1, 3, 2, 2))
    np.testing.assert_array_equal(labels_from_scores(scores, 8, 8), 0)


def test_label_shift_by_decoder_stride(f64):
    # Circular shift by a multiple of the final-map stride moves interior labels with it.
    scores = np.random.default_rng(0).standard_normal((1, 3, 8, 8))
    base = labels_from_scores(scores, 32, 32)
    shifted = labels_from_scores(np.roll(scores, 2, axis=3), 32, 32)
    np.testing.assert_array_equal(shifted[..., 12:28], base[..., 4:20])


def test_final_loss_reaches_every_parameter(f64):
    cfg = small()
    params = init_params(cfg, 0)
    x = np.random.default_rng(1).standard_normal((1, 3, 64, 64))
    out = forward(x, params, cfg)
    labels = np.random.default_rng(2).integers(0, 4, (1, 64, 64))
    loss = stage_losses(out, labels, stage_weights=[0, 0, 0, 1])
    out.bound.graph.backward(loss.total)
    grads = out.bound.grads()
    assert set(grads) == set(params.arrays)
    for name, g in grads.items():
        assert np.abs(g).sum() > 0, name


def test_coarse_loss_alone_trains_head_not_decoder(f64):
    cfg = small()
    out = run(cfg)
    labels = np.random.default_rng(2).integers(0, 4, (1, 64, 64))
    loss = stage_losses(out, labels, stage_weights=[1, 0, 0, 0])
    out.bound.graph.backward(loss.total)
    grads = out.bound.grads()
    assert np.abs(grads["head.w"]).sum() > 0
    np.testing.assert_array_equal(grads["ru3.out.w"], 0)


def test_skip_offset_keeps_shapes(f64):
    for variant in ("gfrnet", "lrn"):
        cfg = small(skip_offset=1, variant=variant)
        out = run(cfg)
        assert [m.shape[2] for m in out.maps] == [2, 4, 8, 16]
        assert cfg.skip_stage(1) == 3


def test_input_not_divisible(f64):
    with pytest.raises(ValueError, match=r"divisible by 2\*\*depth = 32"):
        run(small(), 48, 64)


def test_bad_configs():
    with pytest.raises(ValueError, match="depth"):
        ArchConfig(depth=2, stage_channels=(4, 4))
    with pytest.raises(ValueError, match="stage_channels"):
        ArchConfig(depth=4, stage_channels=(4, 4))
    with pytest.raises(ValueError, match="gate_mode"):
        small(gate_mode="max")


def test_config_json_round_trip():
    cfg = small(depth=4, variant="lrn", gate_channels=3)
    assert ArchConfig.from_json(cfg.to_json()) == cfg
