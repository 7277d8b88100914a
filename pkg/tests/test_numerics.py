import numpy as np
import pytest

from smorlrec import numerics as nx

# -log softmax([1, 2, 3])[2], evaluated with mpmath at 50 digits
CE_123_TARGET_2 = 0.40760596444438030448


def test_affine_examples():
    W = np.array([[2.0, 3.0], [5.0, 7.0]])
    assert nx.affine([1.0, 0.0], W, [0.0, 0.0]).value.tolist() == [2.0, 3.0]
    assert nx.affine([0.0, 0.0], W, [4.0, -1.0]).value.tolist() == [4.0, -1.0]
    assert nx.affine([1.0, 1.0], [[1.0, 2.0], [3.0, 4.0]], [1.0, 1.0]).value.tolist() == [5.0, 7.0]


def test_affine_shape_error_names_both_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(3,\).*\(2, 2\)"):
        nx.affine(np.ones(3), np.ones((2, 2)))


def test_softmax_cross_entropy_examples():
    loss, grad = nx.softmax_cross_entropy([0.0, 0.0], 0)
    assert loss == pytest.approx(np.log(2), abs=1e-15)
    assert grad.tolist() == [-0.5, 0.5]

    loss, grad = nx.softmax_cross_entropy([1000.0, 0.0], 0)
    assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-300)
    assert np.all(np.isfinite(grad))

    loss, _ = nx.softmax_cross_entropy([1.0, 2.0, 3.0], 2)
    assert loss == pytest.approx(CE_123_TARGET_2, abs=1e-15)


def test_softmax_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        nx.softmax_cross_entropy([0.0, 1.0], 2)


def test_batched_cross_entropy_matches_single():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(4, 6))
    targets = np.array([0, 5, 2, 2])
    expected = np.mean([nx.softmax_cross_entropy(l, t)[0] for l, t in zip(logits, targets)])
    assert nx.cross_entropy(logits, targets).value == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_non_negative(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=10, size=8)
    assert nx.softmax_cross_entropy(logits, int(rng.integers(8)))[0] >= 0


def test_grad_check_quadratic():
    p = nx.parameter([3.0, 4.0])
    err = nx.grad_check(lambda: nx.mul(nx.mean(nx.square(p)), 0.5 * 2), [p], eps=1e-5)
    assert err < 1e-6


def test_grad_check_rejects_bad_eps():
    p = nx.parameter([1.0])
    with pytest.raises(ValueError):
        nx.grad_check(lambda: nx.mean(p), [p], eps=0.1)


def test_grad_check_detects_nondeterminism():
    p = nx.parameter([1.0, 2.0])
    rng = np.random.default_rng(0)
    with pytest.raises(nx.DeterminismError):
        nx.grad_check(lambda: nx.mean(nx.mul(p, float(rng.normal()))), [p])


def test_frozen_parameter_gradient_is_exactly_zero():
    E = nx.parameter(np.arange(12.0).reshape(4, 3), frozen=True)
    W = nx.parameter(np.ones((3, 2)))
    with nx.Tape() as tape:
        loss = nx.mean(nx.square(nx.affine(nx.take_rows(E, [1, 2, 2]), W)))
    tape.backward(loss)
    grads = tape.gradient({"E": E, "W": W})
    assert grads["E"].shape == E.shape and not grads["E"].any()
    assert grads["W"].shape == W.shape and grads["W"].any()


def test_no_grad_values_do_not_record():
    W = nx.parameter(np.ones((2, 2)))
    with nx.Tape() as tape:
        with nx.no_grad():
            const = nx.affine([1.0, 2.0], W)
        loss = nx.mean(nx.mul(nx.affine([1.0, 1.0], W), const.value))
    tape.backward(loss)
    assert not const.requires_grad
    np.testing.assert_allclose(tape.gradient([W])[0], np.full((2, 2), 1.5))


def _random_graph(rng):
    """Small composite loss touching every primitive; shapes at most 8x8."""
    B, d, n = (int(v) for v in rng.integers(2, 9, size=3))
    x = nx.parameter(rng.normal(size=(B, d)))
    W = nx.parameter(rng.normal(size=(d, n)) / np.sqrt(d))
    b = nx.parameter(rng.normal(size=n))
    E = nx.parameter(rng.normal(size=(6, n)))
    idx = rng.integers(0, 6, size=B)
    cols = rng.integers(0, n, size=B)
    split = int(rng.integers(1, n)) if n > 1 else 1
    targets = rng.integers(0, n, size=B)

    def loss():
        h = nx.affine(x, W, b)
        g = nx.tanh(nx.add(h, nx.take_rows(E, idx)))
        s = nx.sigmoid(nx.sub(g, nx.mul(h, 0.3)))
        m = nx.mul(s, g)
        part = nx.columns(m, 0, split)
        picked = nx.stack([nx.gather(m, cols), nx.gather(h, cols)])
        return nx.add(
            nx.add(nx.cross_entropy(m, targets), nx.mean(nx.square(part))),
            nx.mean(nx.square(nx.sub(1.0, picked))),
        )

    return loss, [x, W, b, E]


@pytest.mark.parametrize("seed", range(100))
def test_primitives_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    loss, params = _random_graph(rng)
    assert nx.grad_check(loss, params, eps=1e-5, max_coords=16, seed=seed) < 1e-4


def test_adam_bias_corrected_first_step():
    p = nx.parameter([1.0, -2.0])
    opt = nx.Adam({"p": p}, lr=0.1)
    opt.step({"p": np.array([0.5, -3.0])})
    # after one step the corrected moments give m/sqrt(v) = sign(g)
    np.testing.assert_allclose(p.value, [0.9, -1.9], atol=1e-8)
