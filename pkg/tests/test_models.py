"""Model construction, forward semantics, receptive field, checkpoints.

The receptive-field oracle drives an all-positive-weight probe network with a
constant input: along such a network a positive perturbation can never
cancel, so the set of changed outputs is exactly the structural reach.
"""

import numpy as np
import pytest

from susmap.engine import (
    ConcatChannels,
    Conv2d,
    Crop2d,
    MaxPool2,
    Optimizer,
    UpsampleBilinear2,
    check_gradients,
)
from susmap.errors import DataError
from susmap.models import (
    Model,
    ModelSpec,
    build_model,
    llr_channel_weights,
    load_model,
    receptive_field,
    save_model,
)


def _param_count(model):
    return sum(p.data.size for _, p in model.parameters())


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def test_llr_parameter_count_is_channels_plus_one():
    model = build_model(ModelSpec("llr", in_channels=94), np.random.default_rng(0))
    assert _param_count(model) == 95


def test_naive_has_no_parameters():
    model = build_model(ModelSpec("naive", in_channels=94), np.random.default_rng(0))
    assert model.parameters() == []


def test_nn_parameter_count_arithmetic():
    spec = ModelSpec("nn", in_channels=5, hidden=(4, 3))
    model = build_model(spec, np.random.default_rng(0))
    # 5->4 (24), 4->3 (15), 3->1 head (4)
    assert _param_count(model) == 43


def test_same_seed_same_initial_parameters():
    spec = ModelSpec("cnn", in_channels=3, depth=2, widths=(4, 6, 8))
    a = build_model(spec, np.random.default_rng(42))
    b = build_model(spec, np.random.default_rng(42))
    for (name_a, pa), (name_b, pb) in zip(a.parameters(), b.parameters()):
        assert name_a == name_b
        np.testing.assert_array_equal(pa.data, pb.data)


def test_spec_validation():
    with pytest.raises(DataError):
        ModelSpec("transformer", in_channels=3)
    with pytest.raises(DataError):
        ModelSpec("llr", in_channels=0)
    with pytest.raises(DataError):
        ModelSpec("cnn", in_channels=3, depth=3, widths=(4, 6, 8))  # needs depth+1
    with pytest.raises(DataError):
        ModelSpec("nn", in_channels=3, hidden=())
    with pytest.raises(DataError):
        ModelSpec("naive", in_channels=3, naive_p=1.5)


# ---------------------------------------------------------------------------
# Forward semantics
# ---------------------------------------------------------------------------


def test_forward_shapes_and_probability_range_all_kinds():
    rng = np.random.default_rng(1)
    cases = [
        ModelSpec("naive", in_channels=4),
        ModelSpec("llr", in_channels=4),
        ModelSpec("nn", in_channels=4, hidden=(6, 3)),
        ModelSpec("lann", in_channels=10, hidden=(6, 3)),
        ModelSpec("cnn", in_channels=4, depth=2, widths=(4, 6, 8)),
        ModelSpec("lacnn", in_channels=10, depth=2, widths=(4, 6, 8)),
    ]
    for spec in cases:
        model = build_model(spec, rng)
        x = rng.standard_normal((2, spec.in_channels, 16, 12)).astype(np.float32)
        out = model.forward(x)
        assert out.shape == (2, 1, 16, 12)
        assert np.all((out > 0.0) & (out < 1.0))


def test_pyramid_forward_handles_odd_spatial_dims():
    rng = np.random.default_rng(2)
    model = build_model(ModelSpec("cnn", in_channels=3, depth=2, widths=(4, 6, 8)), rng)
    out = model.forward(rng.standard_normal((1, 3, 13, 10)).astype(np.float32))
    assert out.shape == (1, 1, 13, 10)


def test_naive_returns_constant_map():
    model = build_model(ModelSpec("naive", in_channels=94, naive_p=0.013),
                        np.random.default_rng(3))
    out = model.forward(np.zeros((1, 94, 8, 8), dtype=np.float32))
    np.testing.assert_array_equal(out, np.full((1, 1, 8, 8), 0.013, dtype=np.float32))


def test_forward_rejects_wrong_channel_count():
    model = build_model(ModelSpec("llr", in_channels=5), np.random.default_rng(4))
    with pytest.raises(DataError):
        model.forward(np.zeros((1, 4, 8, 8), dtype=np.float32))


def test_llr_forward_matches_per_pixel_loop():
    rng = np.random.default_rng(5)
    model = build_model(ModelSpec("llr", in_channels=6), rng, dtype=np.float64)
    x = rng.standard_normal((1, 6, 5, 4))
    out = model.forward(x)
    w = llr_channel_weights(model)
    b = model.head_conv.bias.data[0]
    for r in range(5):
        for c in range(4):
            z = float(np.dot(w, x[0, :, r, c])) + b
            want = 1.0 / (1.0 + np.exp(-z))
            assert abs(out[0, 0, r, c] - want) <= 1e-12


def test_llr_channel_weights_requires_llr():
    model = build_model(ModelSpec("nn", in_channels=4), np.random.default_rng(6))
    with pytest.raises(DataError):
        llr_channel_weights(model)


def test_per_pixel_models_commute_with_spatial_permutation():
    rng = np.random.default_rng(7)
    for kind, channels in (("llr", 5), ("nn", 5)):
        model = build_model(ModelSpec(kind, in_channels=channels), rng, dtype=np.float64)
        x = rng.standard_normal((1, channels, 6, 6))
        perm = rng.permutation(36)
        x_perm = x.reshape(1, channels, 36)[:, :, perm].reshape(1, channels, 6, 6)
        out = model.forward(x).reshape(36)
        out_perm = model.forward(x_perm).reshape(36)
        # BLAS edge-block kernels may round the same dot product differently
        # depending on where the pixel lands, so allow a couple of ULPs
        np.testing.assert_allclose(out_perm, out[perm], rtol=1e-13, atol=0)


def test_aligned_per_pixel_model_with_zeroed_extra_channels_reproduces_plain():
    rng = np.random.default_rng(8)
    nn = build_model(ModelSpec("nn", in_channels=4, hidden=(5, 3)), rng, dtype=np.float64)
    lann = build_model(ModelSpec("lann", in_channels=10, hidden=(5, 3)), rng,
                       dtype=np.float64)
    # first layer: plain weights on the base channels, zeros on the extras
    w0 = lann.pixel_layers[0][0].weight
    w0.data[:] = 0.0
    w0.data[:, :4] = nn.pixel_layers[0][0].weight.data
    lann.pixel_layers[0][0].bias.data[:] = nn.pixel_layers[0][0].bias.data
    for i in (1,):
        lann.pixel_layers[i][0].weight.data[:] = nn.pixel_layers[i][0].weight.data
        lann.pixel_layers[i][0].bias.data[:] = nn.pixel_layers[i][0].bias.data
    lann.head_conv.weight.data[:] = nn.head_conv.weight.data
    lann.head_conv.bias.data[:] = nn.head_conv.bias.data

    base = rng.standard_normal((2, 4, 7, 5))
    extra = rng.standard_normal((2, 6, 7, 5))
    combined = np.concatenate([base, extra], axis=1)
    np.testing.assert_array_equal(lann.forward(combined), nn.forward(base))


def test_initial_outputs_are_non_degenerate_across_seeds():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for spec in (ModelSpec("llr", in_channels=8),
                     ModelSpec("cnn", in_channels=8, depth=2, widths=(4, 6, 8))):
            model = build_model(spec, rng)
            x = rng.standard_normal((1, 8, 16, 16)).astype(np.float32)
            out = model.forward(x)
            assert 0.001 < out.mean() < 0.999
            assert np.ptp(out) > 1e-6  # not a constant map


# ---------------------------------------------------------------------------
# Receptive field
# ---------------------------------------------------------------------------


def test_receptive_field_reference_values():
    assert receptive_field(ModelSpec("naive", in_channels=1)) == 0
    assert receptive_field(ModelSpec("llr", in_channels=1)) == 0
    assert receptive_field(ModelSpec("nn", in_channels=1)) == 0
    assert receptive_field(ModelSpec("cnn", in_channels=1, depth=3,
                                     widths=(1, 1, 1, 1))) == 51
    assert receptive_field(ModelSpec("cnn", in_channels=1, depth=4,
                                     widths=(1, 1, 1, 1, 1))) == 107
    # widths do not matter, only depth
    assert receptive_field(ModelSpec("lacnn", in_channels=160, depth=3,
                                     widths=(32, 64, 128, 256))) == 51


def _probe_forward(depth, x):
    """Pyramid wiring with all conv weights 0.1 and zero bias."""
    rng = np.random.default_rng(0)

    def conv3(cin):
        conv = Conv2d(cin, 1, rng, ksize=3, dtype=np.float64)
        conv.weight.data[:] = 0.1
        conv.bias.data[:] = 0.0
        return conv

    skips = []
    h = x
    for _ in range(depth):
        h = conv3(h.shape[1]).forward(h)
        h = conv3(1).forward(h)
        skips.append(h)
        h = MaxPool2().forward(h)
    h = conv3(1).forward(h)
    h = conv3(1).forward(h)
    for i in reversed(range(depth)):
        h = UpsampleBilinear2().forward(h)
        h = Crop2d().forward(h, skips[i].shape[-2:])
        h = ConcatChannels().forward(skips[i], h)
        h = conv3(2).forward(h)
    return h


def _probe_reach(depth, phases):
    """Max Chebyshev distance of changed outputs over the given pixel phases."""
    bound = receptive_field(ModelSpec("cnn", in_channels=1, depth=depth,
                                      widths=(1,) * (depth + 1)))
    block = 2**depth
    n = 2 * bound + 33
    n -= n % block
    base = np.ones((1, 1, n, n), dtype=np.float64)
    out0 = _probe_forward(depth, base)
    worst = 0
    for pr, pc in phases:
        pert = base.copy()
        cr, cc = n // 2 + pr, n // 2 + pc
        pert[0, 0, cr, cc] += 1.0
        changed = np.argwhere(_probe_forward(depth, pert)[0, 0] != out0[0, 0])
        assert changed.size, "perturbation must reach the output somewhere"
        worst = max(worst, int(np.abs(changed - [cr, cc]).max()))
        assert worst <= bound  # soundness: nothing beyond the bound ever moves
    return worst, bound


def test_reach_bound_is_attained_depth_1_and_2():
    for depth in (1, 2):
        block = 2**depth
        phases = [(r, c) for r in range(block) for c in range(block)]
        worst, bound = _probe_reach(depth, phases)
        assert worst == bound


def test_reach_bound_is_attained_depth_3():
    # row/col phase 2 is one of the phases that reaches the full radius
    worst, bound = _probe_reach(3, [(0, 0), (2, 2)])
    assert worst == bound == 51


def test_model_output_never_depends_on_pixels_beyond_the_radius():
    rng = np.random.default_rng(9)
    spec = ModelSpec("cnn", in_channels=2, depth=2, widths=(3, 4, 5))
    model = build_model(spec, rng, dtype=np.float64)
    radius = receptive_field(spec)  # 23
    n = 64
    x = rng.standard_normal((1, 2, n, n))
    out0 = model.forward(x.copy())
    for pr, pc in ((0, 0), (1, 3)):
        pert = x.copy()
        pert[0, :, n // 2 + pr, n // 2 + pc] += 5.0
        out1 = model.forward(pert)
        changed = np.argwhere(out1[0, 0] != out0[0, 0])
        if changed.size:
            dist = np.abs(changed - [n // 2 + pr, n // 2 + pc]).max()
            assert dist <= radius


# ---------------------------------------------------------------------------
# Whole-model gradients
# ---------------------------------------------------------------------------


def test_whole_model_gradient_check_tiny_pyramid():
    rng = np.random.default_rng(123)
    spec = ModelSpec("lacnn", in_channels=3, depth=1, widths=(2, 3))
    model = build_model(spec, rng, dtype=np.float64)
    x = rng.standard_normal((1, 3, 6, 7))

    params = [p for _, p in model.parameters()]
    result = check_gradients(
        lambda: model.forward(x), model.backward, [x], params, rng,
        name="lacnn-tiny")
    assert result.passed, result.max_rel_error


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(10)
    spec = ModelSpec("cnn", in_channels=3, depth=2, widths=(4, 6, 8))
    model = build_model(spec, rng)
    opt = Optimizer("adam", lr=0.003, weight_decay=0.001)
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    out = model.forward(x)
    model.zero_grad()
    model.backward(np.ones_like(out))
    opt.step(model.parameters())

    path = tmp_path / "model.json"
    save_model(path, model, opt)
    loaded, loaded_opt = load_model(path)

    assert loaded.spec == spec
    for (name_a, pa), (name_b, pb) in zip(model.parameters(), loaded.parameters()):
        assert name_a == name_b
        assert pa.data.tobytes() == pb.data.tobytes()
    assert loaded_opt.kind == "adam" and loaded_opt.state.step == 1
    assert loaded_opt.lr == 0.003
    for name in opt.state.m:
        np.testing.assert_array_equal(loaded_opt.state.m[name], opt.state.m[name])
        np.testing.assert_array_equal(loaded_opt.state.v[name], opt.state.v[name])
    # same forward after reload
    np.testing.assert_array_equal(loaded.forward(x), model.forward(x))


def test_checkpoint_without_optimizer(tmp_path):
    model = build_model(ModelSpec("llr", in_channels=4), np.random.default_rng(11))
    save_model(tmp_path / "llr.json", model)
    loaded, opt = load_model(tmp_path / "llr.json")
    assert opt is None
    assert loaded.spec.kind == "llr"


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError):
        load_model(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "something-else"}')
    with pytest.raises(DataError):
        load_model(bad)

    import json
    model = build_model(ModelSpec("llr", in_channels=4), np.random.default_rng(12))
    path = tmp_path / "trunc.json"
    save_model(path, model)
    manifest = json.loads(path.read_text())
    manifest["tensors"] = manifest["tensors"][:-1]
    path.write_text(json.dumps(manifest))
    with pytest.raises(DataError):
        load_model(path)
