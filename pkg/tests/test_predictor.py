import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heightbev.bevgrid import GridSpec
from heightbev.errors import DataError, ShapeMismatch
from heightbev.predictor import (
    INIT_EMBEDDING,
    Batch,
    Decoded,
    TrainConfig,
    backward,
    decode,
    fit,
    focal_loss,
    forward,
    forward_stack,
    grad_check,
    height_loss,
    init_embeddings,
    init_params,
    load_checkpoint,
    read_training_log,
    save_checkpoint,
    write_training_log,
)

G = GridSpec()


class GT:
    def __init__(self, y, h, indicator):
        self.y, self.h, self.indicator = np.asarray(y, float), np.asarray(h, float), np.asarray(indicator)


def one_cell(y=0.0, h=1.0, sigma_y=1.0, sigma_h=1.0, logit=0.0):
    a = np.atleast_1d
    return Decoded(a(y), a(h), a(sigma_y), a(sigma_h), a(1 / (1 + math.exp(-logit))), a(logit))


def random_batch(seed, n=32, channels=8, n_layers=3):
    rng = np.random.default_rng(seed)
    E0 = np.tile(INIT_EMBEDDING, (n, 1)) + rng.normal(0, 0.05, (n, 5))
    queries = [rng.uniform(0, 1, (n, channels)) for _ in range(n_layers)]
    return Batch(E0, queries, rng.uniform(-2, 1, n), rng.uniform(0.5, 3, n), rng.integers(0, 2, n), rng.uniform(1, 2, n), G)


def perturbed_params(seed, channels=8, hidden=16, n_layers=3, scale=0.1):
    p = init_params(channels, hidden, n_layers, seed=seed)
    rng = np.random.default_rng(seed + 100)
    return p.with_flat(p.flat() + rng.normal(0, scale, p.flat().size))


def test_initial_embedding_decodes_to_full_range():
    d = decode(init_embeddings(G), G)
    assert np.all(d.y == -1.0) and np.all(d.h == 8.0)
    assert np.all(d.sigma_y == 1.0) and np.all(d.sigma_h == 1.0)
    assert np.all(d.seg_prob == 0.5)


def test_decode_endpoints_and_clamp():
    d = decode(np.array([[0.0, 0.5, 0, 0, 0], [1.5, 1.0, 0, 0, 0]]), G)
    assert d.y[0] == -5.0
    assert d.y[1] == 3.0
    raw = decode(np.array([[1.5, 1.0, 0, 0, 0]]), G, clamp=False)
    assert raw.y[0] == pytest.approx(7.0)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0, 1), b=st.floats(0, 1), ch=st.sampled_from([0, 1]))
def test_decode_monotone(a, b, ch):
    lo, hi = sorted((a, b))
    E = np.zeros((2, 5))
    E[:, ch] = lo, hi
    d = decode(E, G)
    vals = d.y if ch == 0 else d.h
    assert vals[0] <= vals[1]


def test_zero_weights_is_identity():
    p = init_params(8, 16, 3).zeros_like()
    rng = np.random.default_rng(0)
    E = rng.normal(size=(7, 5))
    assert np.array_equal(forward(E, rng.normal(size=(7, 8)), p, 1), E)


def test_fresh_stack_is_identity():
    # zero output layer: an untrained stack leaves the embeddings alone
    p = init_params(8, 16, 3)
    E = init_embeddings(GridSpec(cells_x=3, cells_z=4))
    Q = [np.random.default_rng(k).normal(size=(3, 4, 8)) for k in range(3)]
    assert np.array_equal(forward_stack(E, Q, p), E)


def test_stack_equals_manual_nesting():
    p = perturbed_params(1)
    rng = np.random.default_rng(1)
    E0 = rng.normal(size=(6, 5))
    Q = [rng.normal(size=(6, 8)) for _ in range(3)]
    manual = forward(forward(forward(E0, Q[0], p, 0), Q[1], p, 1), Q[2], p, 2)
    assert np.array_equal(forward_stack(E0, Q, p), manual)
    called = forward_stack(E0, lambda layer, E: Q[layer], p)
    assert np.array_equal(called, manual)


def test_per_cell_locality():
    p = perturbed_params(2)
    rng = np.random.default_rng(2)
    E = rng.normal(size=(10, 5))
    Q = rng.normal(size=(10, 8))
    Q2 = Q.copy()
    Q2[4] += 1.0
    a, b = forward(E, Q, p, 0), forward(E, Q2, p, 0)
    changed = np.any(a != b, axis=1)
    assert changed[4] and changed.sum() == 1


def test_forward_shape_check():
    with pytest.raises(ShapeMismatch):
        forward(np.zeros((3, 5)), np.zeros((3, 7)), init_params(8, 4, 1), 0)


def test_laplace_loss_examples():
    gt = GT([0.0], [1.0], [1])
    # zero residual at sigma one costs nothing on the h branch
    rep = height_loss(one_cell(y=0.0, h=1.0), gt)
    assert rep.height_term == 0.0
    rep = height_loss(one_cell(y=0.0, h=2.0, sigma_h=math.sqrt(2)), gt)
    assert rep.height_term == pytest.approx(1 + math.log(math.sqrt(2)), abs=1e-12)
    rep = height_loss(one_cell(sigma_h=2.0), GT([0.0], [1.0], [0]))
    assert rep.height_term == pytest.approx(0.5)


def test_laplace_minimizer_on_sigma_grid():
    for r in (0.1, 0.37, 1.0, 2.5):
        sig = np.linspace(0.01, 5, 4000)
        gt = GT(np.zeros_like(sig), np.zeros_like(sig), np.ones_like(sig))
        cells = Decoded(np.zeros_like(sig), np.full_like(sig, r), sig, sig, np.full_like(sig, 0.5), np.zeros_like(sig))
        per_cell = np.sqrt(2) * r / sig + np.log(sig)
        rep = height_loss(cells, gt)
        assert rep.height_term == pytest.approx(per_cell.mean())
        best = sig[np.argmin(per_cell)]
        assert abs(best - math.sqrt(2) * r) <= sig[1] - sig[0]


def test_focal_examples():
    assert focal_loss(np.array([np.inf]), np.array([1])) == 0.0
    rng = np.random.default_rng(3)
    x = rng.normal(size=50)
    lab = rng.integers(0, 2, 50)
    p = 1 / (1 + np.exp(-x))
    bce = -np.mean(np.where(lab == 1, np.log(p), np.log(1 - p)))
    assert focal_loss(x, lab, gamma=0.0, alpha=0.5) == pytest.approx(0.5 * bce)


def test_focal_monotone_in_correct_probability():
    x = np.linspace(-8, 8, 200)
    pos = [focal_loss(np.array([v]), np.array([1])) for v in x]
    neg = [focal_loss(np.array([-v]), np.array([0])) for v in x]
    assert np.all(np.diff(pos) < 0) and np.all(np.diff(neg) < 0)


def test_stationary_residual_has_small_bias_gradient():
    n = 20
    E0 = np.tile([0.5, 0.125, 0.0, 0.0, 0.0], (n, 1))
    y = np.full(n, -1.0)
    h = np.full(n, 1.0)
    ind = np.r_[np.ones(n // 2), np.zeros(n // 2)]
    p = init_params(4, 8, 1)
    batch = Batch(E0, [np.zeros((n, 4))], y, h, ind, np.ones(n), G)
    _, _, grads = backward(p, batch)
    # occupied cells sit exactly on target with sigma one: only log-sigma and background terms remain
    assert abs(grads.layers[0]["b2"][0]) < 1e-12 and abs(grads.layers[0]["b2"][1]) < 1e-12


def test_weight_doubling_doubles_gradient():
    p = perturbed_params(4)
    b = random_batch(4)
    _, _, g1 = backward(p, b)
    b.weights = b.weights * 2
    _, _, g2 = backward(p, b)
    assert np.allclose(g2.flat(), 2 * g1.flat(), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("supervise_all", [False, True])
def test_gradient_check_small(supervise_all):
    assert grad_check(perturbed_params(5), random_batch(5), supervise_all=supervise_all) < 1e-4


class ToyScene:
    """Tiny stand-in for a prepared scene: queries are a fixed function of the target."""

    def __init__(self, seed, n=40, channels=6):
        rng = np.random.default_rng(seed)
        self.grid = GridSpec(cells_x=n, cells_z=1)
        self.channels = channels
        self.y = rng.uniform(-2, 1, n)
        self.h = rng.uniform(1, 3, n)
        self.ind = (rng.uniform(size=n) < 0.5).astype(np.uint8)
        self.feat = np.column_stack([self.ind, self.y / 3, self.h / 3, rng.normal(0, 0.1, (n, channels - 3))])

    def cell_batch(self, rng, config):
        ci = np.arange(self.grid.cells_x)
        return ci, np.zeros_like(ci), np.ones(ci.size)

    def targets(self, ci, cj):
        return self.y[ci], self.h[ci], self.ind[ci]

    def gather(self, y, h, ci, cj, n_anchors):
        return self.feat[ci]


def test_zero_lr_keeps_parameters():
    start = perturbed_params(6, channels=6)
    out, hist = fit([ToyScene(0)], TrainConfig(epochs=3, lr=0.0, hidden=16), params=start)
    assert np.array_equal(out.flat(), start.flat())
    assert len(hist) == 3


def test_fit_is_deterministic():
    cfg = TrainConfig(epochs=5, hidden=16)
    a, ha = fit([ToyScene(0), ToyScene(1)], cfg)
    b, hb = fit([ToyScene(0), ToyScene(1)], cfg)
    assert np.array_equal(a.flat(), b.flat()) and ha == hb


def test_fit_learns_toy_heights():
    _, hist = fit([ToyScene(0)], TrainConfig(epochs=300, lr=0.01, hidden=16))
    assert hist[-1].y_mae_occupied_m < 0.25
    assert hist[-1].total_loss < hist[0].total_loss


def test_fit_needs_scenes_and_known_optimizer():
    with pytest.raises(ValueError):
        fit([], TrainConfig())
    with pytest.raises(ValueError):
        fit([ToyScene(0)], TrainConfig(optimizer="sgd"))


def test_momentum_optimizer_runs():
    _, hist = fit([ToyScene(0)], TrainConfig(epochs=20, optimizer="momentum", lr=0.01, hidden=16))
    assert hist[-1].total_loss < hist[0].total_loss


def test_checkpoint_round_trip(tmp_path):
    p = perturbed_params(7)
    save_checkpoint(p, tmp_path / "ck.bin", epoch=12)
    back, header = load_checkpoint(tmp_path / "ck.bin")
    assert np.array_equal(back.flat(), p.flat())
    assert header["epoch"] == 12 and header["layer_sizes"] == [13, 16, 5]
    raw = (tmp_path / "ck.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-8])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "cut.bin")


def test_training_log_round_trip(tmp_path):
    _, hist = fit([ToyScene(0)], TrainConfig(epochs=4, hidden=8))
    write_training_log(hist, tmp_path / "log.csv")
    assert read_training_log(tmp_path / "log.csv") == hist
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,total_loss,height_term,y_term,seg_term,y_mae_occupied_m"
