import numpy as np
import pytest

from shapley_machine import nn


def gradcheck(mlp, loss_and_backward, rtol=1e-4, eps=1e-5):
    """loss_and_backward() must zero grads, run forward+backward, return loss."""
    nn.Adam(mlp.blocks).zero_grads()
    loss_and_backward()
    analytic = [b.grads.copy() for b in mlp.blocks]
    nn.Adam(mlp.blocks).zero_grads()

    def loss_only():
        return loss_and_backward(compute_grads=False)

    numeric = nn.finite_difference_gradients(loss_only, mlp.blocks, eps=eps)
    for block, a, g in zip(mlp.blocks, analytic, numeric):
        err = np.abs(a - g)
        bound = rtol * (np.abs(a) + np.abs(g)) + 1e-7
        assert np.all(err <= bound), f"{block.name}: max err {err.max():.3e}"


def weighted_sum_loss(mlp, x, w):
    def run(compute_grads=True):
        y, tape = mlp.forward(x)
        loss = float(np.sum(y * w))
        if compute_grads:
            mlp.backward(tape, w)
        return loss

    return run


# ---------------------------------------------------------------------------
# forward

def test_zero_parameters_give_zero_output():
    rng = np.random.default_rng(0)
    mlp = nn.Mlp("f", nn.MlpSpec(3, (4,), 2, activation="identity"), rng)
    for b in mlp.blocks:
        b.values[:] = 0.0
    y, _ = mlp.forward(np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(y, [0.0, 0.0])


def test_identity_single_layer():
    rng = np.random.default_rng(1)
    mlp = nn.Mlp("f", nn.MlpSpec(3, (), 3, activation="identity"), rng)
    mlp.blocks[0].view[...] = np.eye(3)
    mlp.blocks[1].values[:] = 0.0
    x = np.array([0.5, -1.0, 2.0])
    y, _ = mlp.forward(x)
    np.testing.assert_allclose(y, x)


def test_dimension_mismatch_raises():
    mlp = nn.Mlp("f", nn.MlpSpec(3, (4,), 2), np.random.default_rng(2))
    with pytest.raises(ValueError):
        mlp.forward(np.zeros(5))


def test_batched_forward_matches_rowwise():
    rng = np.random.default_rng(3)
    mlp = nn.Mlp("f", nn.MlpSpec(4, (8, 8), 3, layer_norm=True), rng)
    xs = rng.normal(size=(6, 4))
    batch, _ = mlp.forward(xs)
    for i, x in enumerate(xs):
        row, _ = mlp.forward(x)
        np.testing.assert_allclose(batch[i], row, atol=1e-12)


# ---------------------------------------------------------------------------
# backward

def nudge_biases(mlp, rng):
    # keep relu pre-activations away from the (measure-zero) kink that zero
    # biases can pin them to, where finite differences are meaningless
    for b in mlp.blocks:
        if ".b" in b.name or ".ln_b" in b.name:
            b.values += rng.normal(scale=0.05, size=b.size)


@pytest.mark.parametrize("activation", ["tanh", "relu", "identity"])
@pytest.mark.parametrize("layer_norm", [False, True])
def test_gradients_match_finite_differences(activation, layer_norm):
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        mlp = nn.Mlp(
            "f",
            nn.MlpSpec(5, (8, 6), 3, activation=activation, layer_norm=layer_norm),
            rng,
        )
        nudge_biases(mlp, rng)
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(4, 3))
        gradcheck(mlp, weighted_sum_loss(mlp, x, w))


def test_gradcheck_many_seeds_relu_layer_norm():
    # the trainer's default architecture family, across >= 20 seeds
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        mlp = nn.Mlp("f", nn.MlpSpec(6, (8,), 2, activation="relu", layer_norm=True), rng)
        nudge_biases(mlp, rng)
        x = rng.normal(size=(3, 6))
        w = rng.normal(size=(3, 2))
        gradcheck(mlp, weighted_sum_loss(mlp, x, w))


def test_zero_upstream_accumulates_nothing():
    rng = np.random.default_rng(4)
    mlp = nn.Mlp("f", nn.MlpSpec(3, (4,), 2), rng)
    _, tape = mlp.forward(rng.normal(size=(2, 3)))
    mlp.backward(tape, np.zeros((2, 2)))
    for b in mlp.blocks:
        np.testing.assert_array_equal(b.grads, 0.0)


def test_backward_linear_in_upstream_and_accumulates():
    rng = np.random.default_rng(5)
    mlp = nn.Mlp("f", nn.MlpSpec(3, (4,), 2, activation="tanh"), rng)
    x = rng.normal(size=(2, 3))
    up = rng.normal(size=(2, 2))
    _, tape = mlp.forward(x)
    mlp.backward(tape, up)
    once = [b.grads.copy() for b in mlp.blocks]
    mlp.backward(tape, 2.0 * up)  # accumulates on top
    for b, g1 in zip(mlp.blocks, once):
        np.testing.assert_allclose(b.grads, 3.0 * g1, atol=1e-12)


def test_stale_tape_rejected():
    rng = np.random.default_rng(6)
    mlp = nn.Mlp("f", nn.MlpSpec(3, (4,), 2), rng)
    _, tape = mlp.forward(rng.normal(size=3))
    mlp.blocks[0].grads[:] = 1.0
    nn.Adam(mlp.blocks).step()
    with pytest.raises(RuntimeError, match="stale"):
        mlp.backward(tape, np.ones(2))


# ---------------------------------------------------------------------------
# categorical

def test_uniform_entropy_is_log_n():
    d = nn.Categorical(np.zeros(4))
    assert d.entropy() == pytest.approx(np.log(4.0))


def test_degenerate_head():
    logits = np.array([0.0, 1000.0, 0.0])
    d = nn.Categorical(logits)
    assert d.entropy() == pytest.approx(0.0, abs=1e-6)
    rng = np.random.default_rng(7)
    assert all(d.sample(rng) == 1 for _ in range(20))


def test_log_probs_normalized():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(5, 6)) * 3
    sums = np.array(
        [np.sum([np.exp(nn.Categorical(row).log_prob(a)) for a in range(6)]) for row in logits]
    )
    np.testing.assert_allclose(sums, 1.0, atol=1e-9)


def test_entropy_bounds_property():
    rng = np.random.default_rng(9)
    for _ in range(100):
        a = int(rng.integers(2, 8))
        d = nn.Categorical(rng.normal(size=a) * rng.uniform(0, 10))
        assert -1e-12 <= d.entropy() <= np.log(a) + 1e-12


def test_empty_logits_rejected():
    with pytest.raises(ValueError):
        nn.Categorical(np.zeros(0))


def test_sampling_frequencies_follow_probs():
    rng = np.random.default_rng(10)
    d = nn.Categorical(np.log(np.array([0.7, 0.2, 0.1])))
    counts = np.bincount([d.sample(rng) for _ in range(20000)], minlength=3)
    np.testing.assert_allclose(counts / 20000, [0.7, 0.2, 0.1], atol=0.02)


# ---------------------------------------------------------------------------
# adam

def test_zero_grads_leave_parameters_unchanged():
    rng = np.random.default_rng(11)
    mlp = nn.Mlp("f", nn.MlpSpec(3, (4,), 2), rng)
    before = [b.values.copy() for b in mlp.blocks]
    nn.Adam(mlp.blocks).step()
    for b, prev in zip(mlp.blocks, before):
        np.testing.assert_array_equal(b.values, prev)


def test_constant_gradient_moves_against_it():
    block = nn.ParameterBlock("p", (3,), np.zeros(3))
    opt = nn.Adam([block], lr=0.01)
    for _ in range(50):
        block.grads[:] = np.array([1.0, -2.0, 0.5])
        opt.step()
    assert block.values[0] < 0 and block.values[1] > 0 and block.values[2] < 0


def test_quadratic_bowl_convergence():
    target = np.array([1.5, -0.5, 2.0])
    block = nn.ParameterBlock("p", (3,), np.zeros(3))
    opt = nn.Adam([block], lr=0.01, beta1=0.9)
    for _ in range(5000):
        block.grads[:] = block.values - target
        opt.step()
        if np.max(np.abs(block.values - target)) < 1e-3:
            break
    assert np.max(np.abs(block.values - target)) < 1e-3


def test_nonfinite_gradient_rejected():
    block = nn.ParameterBlock("p", (2,), np.zeros(2))
    opt = nn.Adam([block])
    block.grads[:] = [np.nan, 0.0]
    before = block.values.copy()
    with pytest.raises(nn.NonFiniteGradientError):
        opt.step()
    np.testing.assert_array_equal(block.values, before)


def test_grads_zeroed_after_step():
    block = nn.ParameterBlock("p", (2,), np.zeros(2))
    opt = nn.Adam([block])
    block.grads[:] = 1.0
    opt.step()
    np.testing.assert_array_equal(block.grads, 0.0)


def test_identical_seeds_identical_trajectories():
    def run():
        rng = np.random.default_rng(42)
        mlp = nn.Mlp("f", nn.MlpSpec(4, (8,), 2, layer_norm=True), rng)
        opt = nn.Adam(mlp.blocks, lr=1e-3)
        for step in range(10):
            x = rng.normal(size=(3, 4))
            y, tape = mlp.forward(x)
            mlp.backward(tape, y)  # gradient of 0.5*sum(y^2)
            opt.step()
        return np.concatenate([b.values for b in mlp.blocks])

    np.testing.assert_array_equal(run(), run())


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    mlp = nn.Mlp("actor", nn.MlpSpec(4, (8,), 3, layer_norm=True), rng)
    path = tmp_path / "ck.bin"
    nn.save_checkpoint(path, mlp.blocks)
    loaded = nn.load_checkpoint(path, expected_manifest=nn.manifest_of(mlp.blocks))
    for b in mlp.blocks:
        np.testing.assert_array_equal(loaded[b.name], b.values)


def test_checkpoint_restore_and_mismatch(tmp_path):
    rng = np.random.default_rng(13)
    mlp = nn.Mlp("actor", nn.MlpSpec(4, (8,), 3), rng)
    path = tmp_path / "ck.bin"
    nn.save_checkpoint(path, mlp.blocks)
    other = nn.Mlp("actor", nn.MlpSpec(4, (8,), 3), np.random.default_rng(99))
    nn.restore_blocks(other.blocks, nn.load_checkpoint(path))
    for a, b in zip(mlp.blocks, other.blocks):
        np.testing.assert_array_equal(a.values, b.values)

    wrong = nn.Mlp("actor", nn.MlpSpec(4, (16,), 3), rng)
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(path, expected_manifest=nn.manifest_of(wrong.blocks))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(path)
