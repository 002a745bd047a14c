import itertools

import numpy as np
import pytest

import oracles
from trackloc.recurrent import (Architecture, ModelError, ModelParams, backward, compose_streams, forward,
                                loss_and_grads, nll_loss)
from trackloc.recurrent.cells import cell_param_count
from trackloc.recurrent.gradcheck import check_gradients, numerical_grads, relative_error
from trackloc.recurrent.network import fc_baseline_forward, single_stream_view

CELL_TYPES = ("gru", "lstm", "fc")
MULTI = ("average", "gating", "fusion_layer")
COMBOS = [(c, "single") for c in CELL_TYPES] + list(itertools.product(CELL_TYPES, MULTI))


def make_arch(cell, fusion, hidden=3, n_classes=2, dims=(4, 3), norm_dim=3, norm_activation="tanh"):
    streams = ("appearance", "flow") if fusion != "single" else ("appearance",)
    return Architecture(streams, dims[:len(streams)], norm_dim, hidden, n_classes, fusion, cell, norm_activation)


def random_model(arch, seed, scale=0.8):
    rng = np.random.default_rng(seed)
    return ModelParams(arch, {k: rng.normal(0, scale, s) for k, s in arch.param_shapes().items()})


def random_features(arch, T, seed, batch=None):
    rng = np.random.default_rng(seed)
    lead = (T,) if batch is None else (batch, T)
    return {s: rng.normal(size=lead + (d,)) for s, d in zip(arch.streams, arch.input_dims)}


@pytest.mark.parametrize("cell,fusion", COMBOS)
def test_zero_parameters_give_uniform_rows(cell, fusion):
    arch = make_arch(cell, fusion, n_classes=3)
    probs, _ = forward(ModelParams.zeros(arch), random_features(arch, 6, 0))
    np.testing.assert_allclose(probs, np.full((6, 4), 0.25), rtol=0, atol=1e-15)


@pytest.mark.parametrize("cell,fusion", COMBOS)
@pytest.mark.parametrize("norm", ["tanh", "identity"])
def test_matches_unrolled_scalar_oracle(cell, fusion, norm):
    arch = make_arch(cell, fusion, hidden=3, n_classes=2, norm_activation=norm)
    model = random_model(arch, 1)
    feats = random_features(arch, 4, 2)
    want = oracles.model_forward({k: v.tolist() for k, v in model.weights.items()}, arch.streams, fusion, cell,
                                 {s: x.tolist() for s, x in feats.items()}, norm)
    probs, _ = forward(model, feats)
    assert np.abs(probs - np.array(want)).max() <= 1e-12


@pytest.mark.parametrize("cell,fusion", COMBOS)
def test_rows_are_distributions(cell, fusion):
    arch = make_arch(cell, fusion, n_classes=4)
    probs, _ = forward(random_model(arch, 3, scale=3.0), random_features(arch, 9, 4, batch=3))
    assert probs.shape == (3, 9, 5)
    assert (probs >= 0).all()
    np.testing.assert_allclose(probs.sum(-1), 1.0, rtol=0, atol=1e-9)


def test_single_frame_equals_first_row():
    arch = make_arch("gru", "gating")
    model, feats = random_model(arch, 5), random_features(arch, 7, 6)
    full, _ = forward(model, feats)
    one, _ = forward(model, {s: x[:1] for s, x in feats.items()})
    np.testing.assert_allclose(one[0], full[0], rtol=0, atol=1e-15)


def test_batch_equals_individual_tracks():
    arch = make_arch("lstm", "fusion_layer")
    model, feats = random_model(arch, 7), random_features(arch, 5, 8, batch=4)
    batch, _ = forward(model, feats)
    for b in range(4):
        single, _ = forward(model, {s: x[b] for s, x in feats.items()})
        np.testing.assert_allclose(batch[b], single, rtol=0, atol=1e-14)


def test_missing_stream_is_rejected():
    arch = make_arch("gru", "average")
    with pytest.raises(ModelError):
        forward(ModelParams.zeros(arch), {"appearance": np.zeros((3, 4))})


@pytest.mark.parametrize("kwargs", [dict(fusion="average", streams=("a",), input_dims=(2,)),
                                    dict(fusion="single", streams=("a", "b"), input_dims=(2, 2)),
                                    dict(fusion="mean", streams=("a",), input_dims=(2,)),
                                    dict(fusion="single", streams=("a",), input_dims=(2,), cell="rnn")])
def test_invalid_architecture(kwargs):
    with pytest.raises(ModelError):
        Architecture(norm_dim=2, hidden=2, n_classes=2, **kwargs)


def test_classifier_width_follows_fusion():
    assert make_arch("gru", "single", hidden=5).param_shapes()["appearance.cls.W"] == (3, 10)
    assert make_arch("gru", "fusion_layer", hidden=5).param_shapes()["fusion.W"] == (3, 20)
    assert make_arch("gru", "gating", hidden=5).param_shapes()["gate.w"] == (3, 2)


class TestNLL:
    def test_perfect_predictions(self):
        assert nll_loss(np.eye(3), [0, 1, 2]) == 0.0

    def test_uniform_predictions(self):
        n, k = 7, 4
        assert nll_loss(np.full((n, k), 1 / k), np.zeros(n, int)) == pytest.approx(n * np.log(k), abs=1e-12)

    def test_zero_probability_is_floored(self):
        assert nll_loss(np.array([[1.0, 0.0]]), [1]) == 50.0

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            n, k = int(rng.integers(1, 10)), int(rng.integers(2, 6))
            p = rng.dirichlet(np.ones(k), size=n)
            y = rng.integers(0, k, n)
            want = -sum(np.log(p[i][y[i]]) for i in range(n))
            assert abs(nll_loss(p, y) - want) <= 1e-12 * max(1.0, want)

    def test_mask_drops_frames(self):
        p = np.array([[0.5, 0.5], [0.1, 0.9]])
        assert nll_loss(p, [0, 0], mask=[1, 0]) == pytest.approx(np.log(2), abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ModelError):
            nll_loss(np.full((3, 2), 0.5), [0, 1])


@pytest.mark.parametrize("cell,fusion", COMBOS)
def test_gradients_match_finite_differences(cell, fusion):
    arch = make_arch(cell, fusion, hidden=3, n_classes=3, dims=(3, 2), norm_dim=2)
    model = random_model(arch, 11)
    feats = random_features(arch, 6, 12, batch=2)
    labels = np.random.default_rng(13).integers(0, 4, size=(2, 6))
    mask = np.ones((2, 6))
    mask[1, 4:] = 0
    assert check_gradients(model, feats, labels, mask) < 1e-4


@pytest.mark.parametrize("fusion", ("single",) + MULTI)
def test_staged_differences_equal_full_forward(fusion):
    model = random_model(make_arch("lstm", fusion), 4)
    feats = random_features(model.arch, 5, 4, batch=2)
    y = np.random.default_rng(4).integers(0, 3, size=(2, 5))
    got = numerical_grads(model, feats, y, eps=1e-4)
    for k, theta in model.weights.items():
        flat = theta.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + 1e-4
            up = nll_loss(forward(model, feats)[0], y)
            flat[j] = keep - 1e-4
            down = nll_loss(forward(model, feats)[0], y)
            flat[j] = keep
            assert got[k].reshape(-1)[j] == (up - down) / 2e-4, k


def test_relative_error_floor():
    assert relative_error(np.array(0.0), np.array(0.0)) == 0.0
    assert relative_error(np.array(1e-12), np.array(0.0)) == pytest.approx(1e-4)


def test_gradient_zero_at_minimum_of_bias_toy():
    # balanced labels with zero weights: uniform output minimises NLL over the classifier bias
    arch = make_arch("gru", "single", n_classes=2)
    model = ModelParams.zeros(arch)
    feats = random_features(arch, 6, 0)
    _, grads = loss_and_grads(model, feats, [0, 1, 2, 2, 1, 0])
    assert np.abs(grads["appearance.cls.b"]).max() <= 1e-9
    for eps in (-1e-3, 1e-3):
        for c in range(3):
            moved = model.copy()
            moved.weights["appearance.cls.b"][c] += eps
            assert nll_loss(forward(moved, feats)[0], [0, 1, 2, 2, 1, 0]) > nll_loss(forward(model, feats)[0],
                                                                                    [0, 1, 2, 2, 1, 0])


@pytest.mark.parametrize("cell", ["gru", "lstm"])
def test_bptt_equal_to_length_is_untruncated(cell):
    arch = make_arch(cell, "gating")
    model, feats = random_model(arch, 14), random_features(arch, 8, 15, batch=2)
    labels = np.random.default_rng(16).integers(0, 3, size=(2, 8))
    probs, cache = forward(model, feats)
    full = backward(model, cache, labels)
    cut = backward(model, cache, labels, bptt=8)
    longer = backward(model, cache, labels, bptt=50)
    for k in full:
        np.testing.assert_array_equal(full[k], cut[k])
        np.testing.assert_array_equal(full[k], longer[k])


def test_short_bptt_changes_recurrent_gradients_only():
    arch = make_arch("gru", "single")
    model, feats = random_model(arch, 17), random_features(arch, 8, 18)
    labels = np.random.default_rng(19).integers(0, 3, size=8)
    _, cache = forward(model, feats)
    full, cut = backward(model, cache, labels), backward(model, cache, labels, bptt=3)
    np.testing.assert_array_equal(full["appearance.cls.W"], cut["appearance.cls.W"])
    assert np.abs(full["appearance.cell1.U"] - cut["appearance.cell1.U"]).max() > 1e-6


def test_wrt_restricts_output():
    arch = make_arch("gru", "fusion_layer")
    model, feats = random_model(arch, 23), random_features(arch, 5, 24)
    labels = np.zeros(5, int)
    _, all_grads = loss_and_grads(model, feats, labels)
    _, head = loss_and_grads(model, feats, labels, wrt={"fusion.W", "fusion.b"})
    assert set(head) == {"fusion.W", "fusion.b"}
    np.testing.assert_array_equal(head["fusion.W"], all_grads["fusion.W"])


class TestFCBaseline:
    def test_permutation_equivariant(self):
        arch = make_arch("fc", "average")
        model, feats = random_model(arch, 25), random_features(arch, 10, 26)
        perm = np.random.default_rng(27).permutation(10)
        out, _ = fc_baseline_forward(model, feats)
        out_p, _ = fc_baseline_forward(model, {s: x[perm] for s, x in feats.items()})
        np.testing.assert_allclose(out_p, out[perm], rtol=0, atol=1e-15)

    def test_gru_is_not_equivariant(self):
        arch = make_arch("gru", "average")
        model, feats = random_model(arch, 25), random_features(arch, 10, 26)
        perm = np.random.default_rng(27).permutation(10)
        out, _ = forward(model, feats)
        out_p, _ = forward(model, {s: x[perm] for s, x in feats.items()})
        assert np.abs(out_p - out[perm]).max() > 1e-3

    def test_parameter_count_matches_gru(self):
        for h, d in [(3, 2), (16, 16), (8, 5)]:
            fc = make_arch("fc", "single", hidden=h, norm_dim=d)
            gru = make_arch("gru", "single", hidden=h, norm_dim=d)
            assert ModelParams.zeros(fc).n_params == ModelParams.zeros(gru).n_params
            assert cell_param_count("fc", d, h) == 3 * (h * d + h * h + h)

    def test_requires_fc_cell(self):
        with pytest.raises(ModelError):
            fc_baseline_forward(ModelParams.zeros(make_arch("gru", "single")), {})


def test_average_fusion_is_mean_of_singles():
    arch = make_arch("lstm", "average")
    model, feats = random_model(arch, 28), random_features(arch, 7, 29)
    fused, _ = forward(model, feats)
    singles = [forward(single_stream_view(model, s), {s: feats[s]})[0] for s in arch.streams]
    assert np.abs(fused - (singles[0] + singles[1]) / 2).max() <= 1e-12


def test_compose_fusion_layer_starts_as_unit_gating():
    singles = [random_model(make_arch("gru", "single", dims=(d,)), seed)
               for d, seed in ((4, 30), (3, 31))]
    singles[1] = ModelParams(Architecture(("flow",), (3,), 3, 3, 2), {
        k.replace("appearance", "flow"): v for k, v in singles[1].weights.items()})
    fl = compose_streams(singles, "fusion_layer", rng=0)
    gate = compose_streams(singles, "gating", rng=0)
    feats = random_features(fl.arch, 6, 32)
    np.testing.assert_allclose(forward(fl, feats)[0], forward(gate, feats)[0], rtol=0, atol=1e-13)


def test_initialisation_bounds():
    arch = make_arch("gru", "gating", hidden=8, norm_dim=5)
    model = ModelParams.initialize(arch, 0)
    for k, v in model.weights.items():
        if k == "gate.w":
            assert (v == 1).all()
        elif k.endswith(".b"):
            assert not v.any()
        else:
            assert np.abs(v).max() <= 1 / np.sqrt(v.shape[-1])
