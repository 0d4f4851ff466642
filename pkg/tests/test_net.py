"""Network core: forward/backward oracles, scale invariance, margins, files."""

import numpy as np
import pytest

from fragaudit.errors import ConfigError, FormatError, InvalidDataset, \
    NormalizationSingularity
from fragaudit.net import Checkpoint, NetSpec, backward_batch, evaluate, \
    flatten_params, forward, forward_batch, init_checkpoint, load_checkpoint, \
    margins, save_checkpoint, scale_checkpoint, unflatten_params
from fragaudit.rng import Rng


def make_ckpt(spec, seed=0):
    return init_checkpoint(spec, Rng(seed).spawn_key("init"))


def scale_invariant_spec(dims=(2, 8, 8, 2)):
    return NetSpec(dims, normalize_hidden=True, frozen_readout=True,
                   bias_enabled=False)


def test_identity_net_passes_input_through():
    spec = NetSpec((2, 2, 2))
    eye = np.eye(2)
    ck = Checkpoint([eye.copy(), eye.copy()], [eye.copy(), eye.copy()])
    assert np.allclose(forward(spec, ck, np.array([1.0, 1.0])), [1.0, 1.0])


def test_forward_matches_hand_evaluation():
    # oracle: scalar re-evaluation of the affine/relu chain, element by element
    spec = NetSpec((2, 3, 2))
    ck = make_ckpt(spec, seed=5)
    x = np.array([0.3, -1.2])
    got = forward(spec, ck, x)
    W1, W2 = ck.weights
    hidden = []
    for i in range(3):
        z = sum(W1[i][j] * x[j] for j in range(2))
        hidden.append(z if z > 0 else 0.0)
    expected = [sum(W2[o][i] * hidden[i] for i in range(3)) for o in range(2)]
    assert np.all(np.abs(got - np.array(expected)) <= 1e-12)


def test_forward_batch_matches_single():
    spec = NetSpec((3, 5, 4))
    ck = make_ckpt(spec, seed=2)
    X = Rng(9).gaussians(12).reshape(4, 3)
    batch = forward_batch(spec, ck.weights, ck.biases, X)
    for i in range(4):
        assert np.allclose(batch[i], forward(spec, ck, X[i]), atol=1e-14)


def test_scale_invariance_of_normalized_net():
    spec = scale_invariant_spec()
    ck = make_ckpt(spec, seed=1)
    X = Rng(4).gaussians(20).reshape(10, 2)
    base = forward_batch(spec, ck.weights, ck.biases, X)
    for c in (0.5, 2.0, 10.0, 7.0):
        scaled = scale_checkpoint(ck, spec, c)
        out = forward_batch(spec, scaled.weights, scaled.biases, X)
        assert np.max(np.abs(out - base)) <= 1e-10 * max(1.0, np.max(np.abs(base)))


def test_normalization_singularity_is_an_error():
    spec = scale_invariant_spec((2, 4, 2))
    ck = make_ckpt(spec, seed=3)
    ck.weights[0][:] = 1.0
    x = np.array([1.0, -1.0])  # first-layer preactivation is exactly zero
    with pytest.raises(NormalizationSingularity):
        forward(spec, ck, x)


def _ce_loss(spec, ck, flat, X, y):
    c = unflatten_params(spec, flat, ck)
    logits = forward_batch(spec, c.weights, c.biases, X)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(logz - shifted[np.arange(len(y)), y]))


@pytest.mark.parametrize("spec", [
    NetSpec((2, 6, 3)),
    NetSpec((3, 4, 4, 2), bias_enabled=True),
    scale_invariant_spec((2, 5, 3)),
])
def test_gradient_matches_central_differences(spec):
    ck = make_ckpt(spec, seed=11)
    rng = Rng(21)
    X = rng.gaussians(8 * spec.layer_dims[0]).reshape(8, spec.layer_dims[0])
    y = np.array([rng.below(spec.layer_dims[-1]) for _ in range(8)])
    flat = flatten_params(spec, ck.weights, ck.biases)
    grad, _ = backward_batch(spec, ck.weights, ck.biases, X, y)
    h = 1e-5
    coords = [rng.below(flat.size) for _ in range(min(40, flat.size))]
    for idx in coords:
        fp, fm = flat.copy(), flat.copy()
        fp[idx] += h
        fm[idx] -= h
        fd = (_ce_loss(spec, ck, fp, X, y) - _ce_loss(spec, ck, fm, X, y)) / (2 * h)
        denom = max(abs(fd), abs(grad[idx]), 1e-8)
        assert abs(grad[idx] - fd) / denom <= 1e-5


def test_single_layer_gradient_fixture():
    # one linear layer, one example: d(CE)/dW checked against central differences
    spec = NetSpec((2, 2))
    ck = make_ckpt(spec, seed=7)
    X = np.array([[0.5, -0.25]])
    y = np.array([1])
    grad, _ = backward_batch(spec, ck.weights, ck.biases, X, y)
    flat = flatten_params(spec, ck.weights, ck.biases)
    h = 1e-5
    for idx in range(flat.size):
        fp, fm = flat.copy(), flat.copy()
        fp[idx] += h
        fm[idx] -= h
        fd = (_ce_loss(spec, ck, fp, X, y) - _ce_loss(spec, ck, fm, X, y)) / (2 * h)
        assert abs(grad[idx] - fd) / max(abs(fd), 1e-8) <= 1e-5


def test_scale_invariant_gradient_orthogonal_to_weights():
    spec = scale_invariant_spec()
    ck = make_ckpt(spec, seed=13)
    rng = Rng(14)
    X = rng.gaussians(16).reshape(8, 2)
    y = np.array([rng.below(2) for _ in range(8)])
    grad, _ = backward_batch(spec, ck.weights, ck.biases, X, y)
    theta = flatten_params(spec, ck.weights, ck.biases)
    assert abs(grad @ theta) <= 1e-8 * np.linalg.norm(grad) * np.linalg.norm(theta)


def test_scale_invariant_gradient_homogeneity():
    spec = scale_invariant_spec()
    ck = make_ckpt(spec, seed=15)
    rng = Rng(16)
    X = rng.gaussians(16).reshape(8, 2)
    y = np.array([rng.below(2) for _ in range(8)])
    grad, _ = backward_batch(spec, ck.weights, ck.biases, X, y)
    for c in (0.5, 2.0, 3.0, 10.0):
        scaled = scale_checkpoint(ck, spec, c)
        grad_c, _ = backward_batch(spec, scaled.weights, scaled.biases, X, y)
        assert np.linalg.norm(c * grad_c - grad) <= 1e-8 * np.linalg.norm(grad)


def test_frozen_readout_gradient_excluded():
    spec = NetSpec((2, 4, 2), frozen_readout=True)
    ck = make_ckpt(spec, seed=1)
    X = np.array([[1.0, 2.0], [0.5, -1.0]])
    y = np.array([0, 1])
    grad, _ = backward_batch(spec, ck.weights, ck.biases, X, y)
    assert grad.size == 8  # only the 4x2 hidden layer is trainable


def test_margins_all_equal():
    spec = NetSpec((2, 2))
    eye = np.eye(2)
    ck = Checkpoint([eye.copy()], [eye.copy()])
    X = np.array([[2.0, 0.0]] * 4)
    y = np.zeros(4, dtype=np.int64)
    stats = margins(spec, ck, X, y)
    assert np.allclose(stats.margins, 2.0)
    assert stats.margin_gamma == 2.0


def test_margin_percentile_lower_convention():
    spec = NetSpec((2, 2))
    eye = np.eye(2)
    ck = Checkpoint([eye.copy()], [eye.copy()])
    vals = np.arange(-1.0, 9.0)  # margins -1..8
    X = np.stack([vals, np.zeros(10)], axis=1)
    y = np.zeros(10, dtype=np.int64)
    stats = margins(spec, ck, X, y)
    assert stats.margin_gamma == -1.0  # index floor(0.1 * 9) = 0


def test_interpolating_classifier_has_positive_margins():
    spec = NetSpec((2, 2))
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    ck = Checkpoint([W.copy()], [W.copy()])
    X = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.5]])
    y = np.array([0, 1, 0])
    acc, _ = evaluate(spec, ck, X, y)
    assert acc == 1.0
    assert np.all(margins(spec, ck, X, y).margins > 0)


def test_margins_rejects_single_class():
    spec = NetSpec((2, 2))
    eye = np.eye(2)
    ck = Checkpoint([eye.copy()], [eye.copy()])
    with pytest.raises(InvalidDataset):
        margins(spec, ck, np.ones((3, 2)), np.zeros(3, dtype=np.int64), 0.1, 1)


def test_spec_invariant_enforced():
    with pytest.raises(ConfigError):
        NetSpec((2, 3, 2), normalize_hidden=True)  # needs frozen readout
    with pytest.raises(ConfigError):
        NetSpec((2, 3, 2), normalize_hidden=True, frozen_readout=True,
                bias_enabled=True)
    with pytest.raises(ConfigError):
        NetSpec((2,))


def test_flatten_unflatten_roundtrip():
    spec = NetSpec((3, 4, 2), bias_enabled=True)
    ck = make_ckpt(spec, seed=9)
    for i, b in enumerate(ck.biases):
        b[:] = Rng(i + 1).gaussians(b.size)
    flat = flatten_params(spec, ck.weights, ck.biases)
    back = unflatten_params(spec, flat, ck)
    for a, b in zip(back.weights, ck.weights):
        assert np.array_equal(a, b)
    for a, b in zip(back.biases, ck.biases):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("inline", [False, True])
def test_checkpoint_roundtrip(tmp_path, inline):
    spec = NetSpec((3, 4, 2), bias_enabled=True)
    ck = make_ckpt(spec, seed=9)
    ck.meta["run_id"] = "abc"
    ck.meta["epoch"] = 17
    path = tmp_path / ("ck.json" if inline else "ck.bin")
    save_checkpoint(path, spec, ck, inline=inline)
    spec2, ck2 = load_checkpoint(path)
    assert spec2 == spec
    assert ck2.meta["run_id"] == "abc"
    assert ck2.meta["epoch"] == 17
    for a, b in zip(ck2.weights, ck.weights):
        assert np.array_equal(a, b)
    for a, b in zip(ck2.init_weights, ck.init_weights):
        assert np.array_equal(a, b)


def test_checkpoint_bad_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"\x00\x01\x02 not a checkpoint")
    with pytest.raises(FormatError):
        load_checkpoint(path)
