import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fne.datagen import SyntheticSpec, generate
from fne.errors import DegenerateEmbeddingError, MalformedInputError
from fne.model import (
    Encoder,
    TrainConfig,
    TrainState,
    batch_loss_backward,
    encode,
    loss_backward,
    make_rngs,
    train,
    train_epoch,
    triplet_loss_fne,
)
from fne.sampler import FneConfig
from tests.oracles import central_difference, cosine, rel_error, triplet_loss

SMALL = SyntheticSpec(n_clusters=4, items_per_cluster=16, seed=3)


def test_encode_examples():
    assert encode(Encoder([np.eye(3), np.zeros(3)]), [1.0, -2.0, 3.0]).tolist() == [1.0, -2.0, 3.0]
    assert encode(Encoder([np.zeros((2, 3)), np.array([4.0, 5.0])]), [1, 2, 3]).tolist() == [4.0, 5.0]
    assert encode(Encoder([np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([1.0, 0.0])]),
                  [1.0, 1.0]).tolist() == [4.0, 1.0]
    with pytest.raises(MalformedInputError):
        encode(Encoder([np.eye(3), np.zeros(3)]), [1.0, 2.0])


def test_triplet_loss_examples():
    assert triplet_loss_fne(0.8, 0.5, 0.9, 0.2) == pytest.approx(0.3)
    assert triplet_loss_fne(1.0, -1.0, -1.0, 0.2) == 0.0
    assert triplet_loss_fne(0.4, 0.4, 0.4, 0.2) == pytest.approx(0.4)


def _fd_gradients(v, w, wn, vn, margin):
    args = [v, w, wn, vn]

    def f_at(i):
        def f(x):
            a = list(args)
            a[i] = x
            return triplet_loss(*a, margin)
        return f

    return [central_difference(f_at(i), args[i]) for i in range(4)]


def _random_triplet(rng, dim, margin):
    """Random embeddings whose hinges sit away from the kink, so the finite
    difference sees a single smooth branch."""
    while True:
        v, w, wn, vn = rng.normal(size=(4, dim))
        sp = cosine(v, w)
        slack = [margin - sp + cosine(v, wn), margin - sp + cosine(vn, w)]
        if min(abs(h) for h in slack) > 1e-3:
            return v, w, wn, vn


def _analytic(out):
    dim = out.grad_anchor_image.size
    z = np.zeros(dim)
    return [out.grad_anchor_image, out.grad_positive_text,
            z if out.grad_neg_text is None else out.grad_neg_text,
            z if out.grad_neg_image is None else out.grad_neg_image]


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(2024)
    patterns = set()
    worst = 0.0
    for trial in range(100):
        margin = [0.05, 0.2, 0.5, 1.0][trial % 4]
        v, w, wn, vn = _random_triplet(rng, int(rng.integers(2, 9)), margin)
        out = loss_backward(v, w, wn, vn, margin)
        assert out.loss == pytest.approx(triplet_loss(v, w, wn, vn, margin), abs=1e-14)
        patterns.add((out.grad_neg_text is None, out.grad_neg_image is None))
        fd = _fd_gradients(v, w, wn, vn, margin)
        err = rel_error(np.concatenate(_analytic(out)), np.concatenate(fd))
        worst = max(worst, err)
    assert worst <= 1e-6
    assert len(patterns) == 4  # active/inactive mixes all exercised


def test_gradients_single_precision_inputs():
    rng = np.random.default_rng(7)
    for _ in range(100):
        v, w, wn, vn = (x.astype(np.float32) for x in _random_triplet(rng, 6, 0.3))
        out = loss_backward(v, w, wn, vn, 0.3)
        fd = _fd_gradients(*(x.astype(np.float64) for x in (v, w, wn, vn)), 0.3)
        assert rel_error(np.concatenate(_analytic(out)), np.concatenate(fd)) <= 1e-4


def test_inactive_hinges_give_zero_gradients():
    v = np.array([1.0, 0.0])
    out = loss_backward(v, v, -v, -v, 0.2)
    assert out.loss == 0.0
    assert out.grad_neg_text is None and out.grad_neg_image is None
    assert not out.grad_anchor_image.any() and not out.grad_positive_text.any()


def test_hinge_exactly_at_zero_is_inactive():
    # negative orthogonal to the anchor (s_neg = 0) and margin equal to the
    # computed positive similarity: the text-side slack is exactly zero
    v = np.array([1.0, 0.0])
    w = np.array([0.5, np.sqrt(0.75)])
    neg_text = np.array([[0.0, 1.0]])
    neg_image = np.array([[-1.0, 0.0]])
    margin = float(batch_loss_backward(v[None], w[None], neg_text, neg_image, 0.1).s_pos[0])
    out = batch_loss_backward(v[None], w[None], neg_text, neg_image, margin)
    assert margin - out.s_pos[0] + 0.0 == 0.0
    assert not out.active_text[0] and out.loss[0] == 0.0
    assert not out.grad_neg_text.any() and not out.grad_image.any()


def test_zero_norm_rejected():
    with pytest.raises(DegenerateEmbeddingError):
        loss_backward(np.zeros(3), np.ones(3), np.ones(3), np.ones(3), 0.2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_small_step_decreases_active_triplet_loss(seed):
    rng = np.random.default_rng(seed)
    while True:
        v, w, wn, vn = rng.normal(size=(4, 5))
        out = loss_backward(v, w, wn, vn, 0.5)
        if out.loss > 1e-3:
            break
    g = _analytic(out)
    step = 1e-6
    moved = [x - step * gx for x, gx in zip((v, w, wn, vn), g)]
    assert triplet_loss(*moved, 0.5) < out.loss


@pytest.mark.parametrize("hidden", [0, 6])
def test_encoder_backward_matches_finite_differences(hidden):
    rng = np.random.default_rng(hidden)
    enc = Encoder.init(4, 3, rng, hidden_dim=hidden)
    for p in enc.params:
        p += 0.1 * rng.normal(size=p.shape)
    x = rng.normal(size=(5, 4))
    upstream = rng.normal(size=(5, 3))
    out, cache = enc.forward(x)
    grads = enc.backward(cache, upstream)
    for i, p in enumerate(enc.params):
        def f(val, i=i):
            trial = Encoder([val if j == i else q for j, q in enumerate(enc.params)])
            return float((trial.forward(x)[0] * upstream).sum())
        assert rel_error(grads[i], central_difference(f, p)) <= 1e-7


def _params(state):
    return [p.copy() for e in (state.image_encoder, state.text_encoder) for p in e.params]


def test_zero_learning_rate_leaves_parameters_but_advances_state():
    ds = generate(SMALL)
    cfg = TrainConfig(learning_rate=0.0, epochs=1, bank_capacity=256, min_ready_count=10)
    rngs = make_rngs(cfg.seed)
    state = TrainState.initial(ds, cfg, rngs["init"])
    before = _params(state)
    train_epoch(state, ds, cfg, FneConfig(), rngs)
    for a, b in zip(before, _params(state)):
        np.testing.assert_array_equal(a, b)
    assert len(state.image_bank) == len(state.text_bank) == min(256, ds.n_texts)
    assert state.tracker.negative.count > 0 and state.step == -(-ds.n_texts // 32)


@pytest.mark.parametrize("mode", ["fne", "hardest", "uniform", "semi-hard"])
def test_training_is_bit_reproducible(mode):
    ds = generate(SMALL)
    cfg = TrainConfig(epochs=3, bank_capacity=256, min_ready_count=50)
    a_state, a_logs = train(ds, cfg, FneConfig(mode=mode))
    b_state, b_logs = train(ds, cfg, FneConfig(mode=mode))
    for la, lb in zip(a_logs, b_logs):
        assert la.samples == lb.samples
        assert np.array_equal(np.array(la.steps, dtype=float), np.array(lb.steps, dtype=float),
                              equal_nan=True)
    for a, b in zip(_params(a_state), _params(b_state)):
        np.testing.assert_array_equal(a, b)


def test_one_epoch_on_defaults_descends():
    ds = generate(SyntheticSpec())
    cfg = TrainConfig(epochs=1)
    _, logs = train(ds, cfg, FneConfig())
    losses = np.array([r.loss for r in logs[0].steps])
    q = max(1, losses.size // 4)
    assert losses[-q:].mean() < losses[:q].mean()


def test_fne_mode_uses_weights_once_tracker_is_ready():
    ds = generate(SMALL)
    cfg = TrainConfig(epochs=4, bank_capacity=256, min_ready_count=50)
    _, logs = train(ds, cfg, FneConfig())
    ready = [r.tracker_ready for log in logs for r in log.steps]
    assert not ready[0] and ready[-1]
    rec = logs[-1].steps[-1]
    assert rec.mu_pos > rec.mu_neg and rec.sigma_pos > 0


def test_train_config_validation_and_schedule():
    cfg = TrainConfig(learning_rate=2.0, lr_decay_epochs=[2, 4], lr_decay_factor=0.5)
    assert [cfg.lr_at(e) for e in range(6)] == [2.0, 2.0, 1.0, 1.0, 0.5, 0.5]
    for bad in (dict(margin=0), dict(learning_rate=-1), dict(bank_capacity=4, batch_size=8),
                dict(momentum=1.0), dict(stats_source="x")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})
