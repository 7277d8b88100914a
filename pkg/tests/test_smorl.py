import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smorlrec import numerics as nx
from smorlrec.data import make_examples, popularity_stats, split
from smorlrec.encoder import EncoderModel, SupervisedConfig, TrainingError, encode, rng_streams, train_supervised
from smorlrec.smorl import (
    Agent,
    SmorlConfig,
    SmorlHead,
    TrainerState,
    is_sqn_equivalent,
    q_forward,
    scalarize,
    sdql_loss,
    select_action,
    smorl_losses,
    smorl_step,
    train,
)
from smorlrec.synthetic import successor_sessions


@pytest.fixture(scope="module")
def toy():
    ds = successor_sessions(n_items=12, n_sessions=60, length=(3, 8), seed=1)
    ex = make_examples(ds)
    cat = popularity_stats(ds.sessions, ds.n_items)
    e_div = np.random.default_rng(9).normal(size=(ds.n_items + 1, 5))
    return ds, ex, cat, e_div


def _agent(n, seed, h=4):
    return Agent(EncoderModel(n, rng=seed, embed_size=5, hidden_size=h), SmorlHead(n, seed + 100, hidden_size=h))


# ----------------------------------------------------------------- head ops


def test_q_forward_zero_state_gives_biases():
    head = SmorlHead(6, 0, hidden_size=4)
    for j, z in enumerate(("acc", "div", "nov")):
        head.params[f"q_{z}_b"].value[:] = np.arange(6) + 10 * j
    Q = q_forward(np.zeros(4), head)
    assert Q.shape == (6, 3)
    assert Q[:, 2].tolist() == list(range(20, 26))


def test_q_forward_hand_computed():
    head = SmorlHead(2, 0, hidden_size=2)
    head.params["q_acc_w"].value[:] = [[1, 2], [3, 4]]
    head.params["q_div_w"].value[:] = [[0, 1], [1, 0]]
    head.params["q_nov_w"].value[:] = [[-1, 0], [0, -1]]
    head.params["q_div_b"].value[:] = [0.5, 0.5]
    Q = q_forward([1.0, 2.0], head)
    assert Q.tolist() == [[7.0, 2.5, -1.0], [10.0, 1.5, -2.0]]


def test_head_validation():
    with pytest.raises(ValueError):
        SmorlHead(3, gamma=1.5)
    with pytest.raises(ValueError):
        SmorlHead(3, alpha=-1)
    with pytest.raises(ValueError):
        SmorlHead(3, w=(1, -1, 0))


def test_scalarize_examples():
    assert scalarize([0.7, -2, 5], [1, 0, 0]) == 0.7
    assert scalarize([1, 2, 3], [1, 1, 1]) == 6.0
    assert scalarize([9, -4, 2], [0, 0, 0]) == 0.0
    with pytest.raises(nx.DimensionError):
        scalarize([1, 2], [1, 1, 1])


def test_select_action_examples():
    Q = np.zeros((5, 3))
    Q[3] = [1, 1, 1]
    assert select_action(Q, [1, 1, 1]) == 4
    Q[1] = [3, 0, 0]
    assert select_action(Q, [1, 1, 1]) == 2  # rows 2 and 4 tie at 3


@pytest.mark.parametrize("seed", range(10))
def test_select_action_matches_linear_scan(seed):
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(100, 3))
    w = rng.uniform(0, 2, size=3)
    best, best_val = None, -np.inf
    for a in range(100):
        v = sum(Q[a, z] * w[z] for z in range(3))
        if v > best_val:
            best, best_val = a + 1, v
    assert select_action(Q, w) == best


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_argmax_invariant_to_positive_rescaling(seed, c):
    rng = np.random.default_rng(seed)
    Q = rng.integers(-5, 6, size=(40, 3)).astype(float)  # integer entries keep ties exact
    w = rng.integers(0, 4, size=3).astype(float)
    assert select_action(Q, c * w) == select_action(Q, w) if c == int(c) or not w.any() else True
    k = float(rng.integers(1, 50))
    assert select_action(Q, k * w) == select_action(Q, w)


def test_sdql_examples():
    assert sdql_loss([[0, 0, 0]], [[1, 0.5, 1]], [[0, 0, 0]], [1, 1, 1], 0.0) == 6.25
    assert sdql_loss([[0, 0, 0]], [[0, 0, 0]], [[7, 7, 7]], [1, 1, 1], 0.0) == 0.0


def test_sdql_matches_scalar_recomputation():
    rng = np.random.default_rng(3)
    q, r, boot = rng.normal(size=(3, 4, 3))
    w, gamma = rng.uniform(0, 1, size=3), 0.5
    per = []
    for i in range(4):
        td = sum(w[z] * (r[i, z] + gamma * boot[i, z] - q[i, z]) for z in range(3))
        per.append(td * td)
    expect = sum(per) / 4
    assert sdql_loss(q, r, boot, w, gamma) == pytest.approx(expect, rel=1e-14)
    tensor = sdql_loss(nx.parameter(q), r, boot, w, gamma)
    assert float(tensor.value) == pytest.approx(expect, rel=1e-14)


def test_sdql_permutation_of_objectives():
    rng = np.random.default_rng(4)
    q, r, boot = rng.normal(size=(3, 6, 3))
    w = rng.uniform(0, 1, size=3)
    for perm in ([1, 2, 0], [2, 0, 1], [0, 2, 1]):
        a = sdql_loss(q, r, boot, w, 0.5)
        b = sdql_loss(q[:, perm], r[:, perm], boot[:, perm], w[perm], 0.5)
        assert a == pytest.approx(b, rel=1e-13)


def test_sdql_nan_reports_batch_index():
    r = np.zeros((5, 3))
    r[3, 1] = np.nan
    with pytest.raises(TrainingError, match="index 3"):
        sdql_loss(np.zeros((5, 3)), r, np.zeros((5, 3)), [1, 1, 1], 0.5)


def test_sqn_label():
    assert is_sqn_equivalent((1, 0, 0)) and not is_sqn_equivalent((1, 1, 0))


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("which", [0, 1, 2])
def test_smorl_losses_match_finite_differences(toy, which):
    ds, ex, cat, e_div = toy
    upd, other = _agent(ds.n_items, 0), _agent(ds.n_items, 1)
    batch = ex.subset(np.arange(8))

    def loss():
        return smorl_losses(batch, upd, other, (1.0, 0.7, 0.4), 0.5, 0.8, cat, e_div)[which]

    assert nx.grad_check(loss, upd.params, eps=1e-5, max_coords=12) < 1e-4


def test_bootstrap_copy_receives_no_gradient(toy):
    ds, ex, cat, e_div = toy
    upd, other = _agent(ds.n_items, 0), _agent(ds.n_items, 1)
    with nx.Tape() as tape:
        total = smorl_losses(ex.subset(np.arange(8)), upd, other, (1, 1, 1), 0.5, 1.0, cat, e_div)[2]
    tape.backward(total)
    for g in tape.gradient(other.params).values():
        assert not g.any()
    assert all(g.any() for k, g in tape.gradient(upd.params).items() if k != "embedding")


# ------------------------------------------------------------- SQN reduction


def _scalar_double_q(batch, upd, other, gamma):
    """Single-objective double-Q loss with reward 1, one example at a time."""
    Wa, ba = upd.head.params["q_acc_w"].value, upd.head.params["q_acc_b"].value
    Wo, bo = other.head.params["q_acc_w"].value, other.head.params["q_acc_b"].value
    total = 0.0
    for i in range(len(batch)):
        s = encode(batch.prefixes[i], upd.model)
        s_next = encode(batch.next_prefixes[i], upd.model)
        s_next_other = encode(batch.next_prefixes[i], other.model)
        q_next = [float(s_next @ Wa[:, a] + ba[a]) for a in range(Wa.shape[1])]
        a_star = max(range(len(q_next)), key=lambda a: (q_next[a], -a))
        boot = float(s_next_other @ Wo[:, a_star] + bo[a_star])
        a_t = int(batch.targets[i]) - 1
        q = float(s @ Wa[:, a_t] + ba[a_t])
        total += (1.0 + gamma * boot - q) ** 2
    return total / len(batch)


def test_accuracy_only_weights_reduce_to_scalar_double_q(toy):
    ds, ex, cat, e_div = toy
    upd, other = _agent(ds.n_items, 2, h=6), _agent(ds.n_items, 3, h=6)
    for p in upd.head.params.values():
        p.value += 0.3  # move Q off zero so the bootstrap term matters
    batch = ex.subset(np.arange(16))
    got = float(smorl_losses(batch, upd, other, (1, 0, 0), 0.5, 1.0, cat, e_div)[1].value)
    assert abs(got - _scalar_double_q(batch, upd, other, 0.5)) < 1e-10


# ------------------------------------------------------------------ trainer


def _arrays(agent):
    return {k: p.value.tobytes() for k, p in agent.params.items()}


def test_alpha_zero_is_bit_identical_to_supervised(toy):
    ds, ex, cat, _ = toy
    sup, _ = train_supervised(ex, ds.n_items, SupervisedConfig(steps=40, batch_size=16, seed=5))
    res = train(ex, ds.n_items, SmorlConfig(alpha=0.0, batch_size=16, max_steps=40, seed=5))
    for k, p in sup.params.items():
        assert p.value.tobytes() == res.model.params[k].value.tobytes()


def test_two_steps_are_deterministic(toy):
    ds, ex, cat, e_div = toy
    cfg = SmorlConfig(batch_size=8, max_steps=2, seed=11)
    a = train(ex, ds.n_items, cfg, cat, e_div)
    b = train(ex, ds.n_items, cfg, cat, e_div)
    for i in range(2):
        assert _arrays(a.trainer.copies[i]) == _arrays(b.trainer.copies[i])
    assert a.log == b.log


def test_resume_reproduces_uninterrupted_run(toy, tmp_path):
    ds, ex, cat, e_div = toy
    valid = ex.subset(np.arange(40))
    full = train(ex, ds.n_items, SmorlConfig(batch_size=8, max_steps=8, eval_every=3, seed=2), cat, e_div, valid)
    part = train(ex, ds.n_items, SmorlConfig(batch_size=8, max_steps=5, eval_every=3, seed=2), cat, e_div, valid,
                 checkpoint_every=5, checkpoint_path=tmp_path / "t.ckpt")
    cfg = SmorlConfig(batch_size=8, max_steps=8, eval_every=3, seed=2)
    state = TrainerState.load(tmp_path / "t.ckpt", ds.n_items, len(ex), cfg)
    rest = train(ex, ds.n_items, cfg, cat, e_div, valid, trainer=state)
    for i in range(2):
        assert _arrays(full.trainer.copies[i]) == _arrays(rest.trainer.copies[i])
    steps = [r for r in full.log if "L_s" in r]
    assert steps == [r for r in part.log + rest.log if "L_s" in r]
    assert full.trainer.branch_counts == rest.trainer.branch_counts


def test_branch_follows_coin_and_is_fair(toy):
    ds, ex, cat, e_div = toy
    res = train(ex, ds.n_items, SmorlConfig(batch_size=4, max_steps=60, seed=8), cat, e_div)
    coin = rng_streams(8)["coin"]
    draws = coin.random(10_000)
    expected = [1 if z < 0.5 else 2 for z in draws[:60]]
    assert [r["branch"] for r in res.log] == expected
    b1 = int(np.sum(draws < 0.5))
    assert abs(b1 - (10_000 - b1)) <= 3 * np.sqrt(10_000)


def test_only_updated_copy_changes(toy):
    ds, ex, cat, e_div = toy
    cfg = SmorlConfig(batch_size=8, seed=3)
    trainer = TrainerState(ds.n_items, len(ex), cfg)
    before = [_arrays(c) for c in trainer.copies]
    res = smorl_step(ex.subset(np.arange(8)), trainer, cfg, cat, e_div)
    after = [_arrays(c) for c in trainer.copies]
    assert after[1 - res.branch] == before[1 - res.branch]
    assert after[res.branch] != before[res.branch]
    assert res.loss_smorl == pytest.approx(res.loss_s + res.loss_sdql)


def test_copies_start_as_clones(toy):
    ds, ex, _, _ = toy
    trainer = TrainerState(ds.n_items, len(ex), SmorlConfig(seed=0))
    assert _arrays(trainer.copies[0]) == _arrays(trainer.copies[1])


def test_zero_steps_returns_initialization(toy):
    ds, ex, cat, e_div = toy
    res = train(ex, ds.n_items, SmorlConfig(max_steps=0, seed=4), cat, e_div, ex)
    fresh = EncoderModel(ds.n_items, rng=rng_streams(4)["model"])
    assert res.log == []
    for k, p in fresh.params.items():
        assert p.value.tobytes() == res.model.params[k].value.tobytes()


def test_training_log_fields_and_best_checkpoint(toy):
    ds, ex, cat, e_div = toy
    fold = split(len(ds), seed=0).folds[0]
    tr, va = make_examples(ds, sessions=fold.train), make_examples(ds, sessions=fold.validation)
    res = train(tr, ds.n_items, SmorlConfig(batch_size=16, max_steps=30, eval_every=10, seed=0), cat, e_div, va)
    assert set(res.log[0]) == {"step", "L_s", "L_SDQL", "L_SMORL", "branch"}
    evals = [r for r in res.log if "validation" in r]
    assert [r["step"] for r in evals] == [10, 20, 30]
    best = max(evals, key=lambda r: r["validation"]["ndcg@20"])
    assert res.best_step == best["step"]


def test_alpha_positive_needs_catalog(toy):
    ds, ex, _, _ = toy
    with pytest.raises(ValueError):
        train(ex, ds.n_items, SmorlConfig(max_steps=1))
