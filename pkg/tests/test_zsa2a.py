import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, naive_network, pair_loss_reference
from paray.errors import TrainingDivergedError
from paray.forward import PhantomSpec, rasterize_phantom, required_samples, simulate_signals
from paray.geometry import fibonacci_sphere_array, make_grid
from paray.perturb import MapTarget, Plane
from paray.zsa2a import (
    NetworkParams,
    TrainConfig,
    TrainedModel,
    _forward,
    forward,
    gradients,
    init_network,
    loss,
    pair_loss,
    remove_artifacts,
    run_zsa2a,
    subset_loss,
    train,
    zero_network,
)

C = 1.5e6


def smooth_pair(size=16, seed=0):
    """Two correlated, normalised test images."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] / size
    base = np.sin(6 * xx) * np.cos(4 * yy)
    r1 = base + 0.3 * rng.standard_normal(base.shape)
    r2 = base + 0.3 * rng.standard_normal(base.shape)
    stack = np.stack([r1, r2])
    stack = (stack - stack.mean()) / stack.std()
    return stack[0], stack[1]


def fd_check(params, recons, indices, h=1e-4):
    """Relative errors of analytic vs finite-difference gradients at ``indices``."""
    c = params.channels
    x = np.stack(recons)
    flat0 = params.flat()
    analytic = gradients(params, *recons).flat()

    def f(v):
        return loss(NetworkParams.from_flat(v, c), *recons)[0]

    def pattern(v):
        _, cache = _forward(NetworkParams.from_flat(v, c), x)
        return np.concatenate([(cache[2] > 0).ravel(), (cache[4] > 0).ravel()])

    errors = []
    for i in indices:
        fd, _ = central_difference(f, flat0, i, h, pattern)
        errors.append(abs(analytic[i] - fd) / (abs(analytic[i]) + 1e-6))
    return np.array(errors)


def manual_net(a, b, c, d, e, f):
    p = zero_network(1)
    p.w1[4, 0], p.b1[0] = a, b
    p.w2[4, 0], p.b2[0] = c, d
    p.w3[0, 0], p.b3[0] = e, f
    return p


# --- network ------------------------------------------------------------------

def test_parameter_counts():
    assert init_network(48, 0).n_params == 21313
    assert init_network(1, 0).n_params == 22


def test_init_deterministic_and_bounded():
    a, b = init_network(48, 5), init_network(48, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert not np.array_equal(a.w2, init_network(48, 6).w2)
    assert not a.b1.any() and not a.b2.any() and not a.b3.any()
    assert np.abs(a.w1).max() <= np.sqrt(6 / 9)
    assert np.abs(a.w2).max() <= np.sqrt(6 / (9 * 48))


def test_flat_roundtrip():
    p = init_network(7, 1)
    q = NetworkParams.from_flat(p.flat(), 7)
    assert all(np.array_equal(x, y) for x, y in zip(p.arrays(), q.arrays()))
    with pytest.raises(ValueError):
        NetworkParams.from_flat(p.flat()[:-1], 7)


def test_zero_params_zero_output():
    img = np.random.default_rng(0).standard_normal((9, 11))
    assert not forward(zero_network(8), img).any()


def test_zero_input_zero_output():
    assert not forward(init_network(8, 3), np.zeros((6, 6))).any()


def test_single_pixel_hand_trace():
    # relu(1.5*2 + 0.5) = 3.5 -> relu(2*3.5 - 1) = 6 -> 0.5*6 + 0.25 = 3.25
    out = forward(manual_net(1.5, 0.5, 2.0, -1.0, 0.5, 0.25), np.array([[2.0]]))
    assert out.shape == (1, 1) and out[0, 0] == pytest.approx(3.25)


def test_forward_matches_naive_convolution():
    p = init_network(5, 2)
    p.b1[:] = 0.1
    p.b2[:] = -0.05
    p.b3[:] = 0.2
    img = np.random.default_rng(1).standard_normal((7, 10))
    ref = naive_network(p.w1.reshape(3, 3, 1, 5), p.b1, p.w2.reshape(3, 3, 5, 5), p.b2, p.w3, p.b3, img)
    np.testing.assert_allclose(forward(p, img), ref, rtol=1e-12, atol=1e-12)


def test_forward_rejects_non_finite():
    img = np.zeros((4, 4))
    img[1, 1] = np.nan
    with pytest.raises(ValueError):
        forward(init_network(2, 0), img)


# --- loss ----------------------------------------------------------------------

def test_loss_zero_map():
    r1, r2 = smooth_pair(8)
    total, res, cons = loss(zero_network(4), r1, r2)
    d = np.mean((r1 - r2) ** 2)
    assert res == pytest.approx(d) and cons == pytest.approx(d) and total == pytest.approx(2 * d)


def test_loss_minimum_at_equal_inputs():
    r1, _ = smooth_pair(8)
    assert loss(zero_network(4), r1, r1) == (0.0, 0.0, 0.0)


def test_loss_hand_example():
    total, res, cons = pair_loss(np.array([3.0]), np.array([1.0]), np.array([1.0]), np.array([0.0]))
    assert (res, cons, total) == (2.5, 1.0, 3.5)
    # the same numbers through a network with g(3) = 1, g(1) = 0
    net = manual_net(1.0, -1.0, 1.0, 0.0, 0.5, 0.0)
    assert loss(net, np.array([[3.0]]), np.array([[1.0]])) == (3.5, 2.5, 1.0)


def test_pair_loss_matches_reference():
    rng = np.random.default_rng(3)
    r1, r2, g1, g2 = rng.standard_normal((4, 6, 6))
    np.testing.assert_allclose(pair_loss(r1, r2, g1, g2), pair_loss_reference(r1, r2, g1, g2), rtol=1e-14)


def test_k2_generalised_loss_bitwise():
    rng = np.random.default_rng(4)
    for _ in range(20):
        r1, r2, g1, g2 = rng.standard_normal((4, 13, 9)).astype(np.float32)
        assert subset_loss([r1, r2], [g1, g2]) == pair_loss(r1, r2, g1, g2)


def test_k3_loss_averages_pairs():
    rng = np.random.default_rng(5)
    r = rng.standard_normal((3, 5, 5))
    g = rng.standard_normal((3, 5, 5))
    pairs = [(i, j) for i in range(3) for j in range(3) if i != j]
    res = np.mean([np.mean((r[i] - g[i] - r[j]) ** 2) for i, j in pairs])
    cons = np.mean([np.mean(((r[i] - g[i]) - (r[j] - g[j])) ** 2) for i, j in pairs])
    total, r_, c_ = subset_loss(list(r), list(g))
    assert r_ == pytest.approx(res) and c_ == pytest.approx(cons) and total == pytest.approx(res + cons)


@given(arrays(np.float64, (2, 4, 4), elements=st.floats(-1e3, 1e3)), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_loss_non_negative(stack, seed):
    total, res, cons = loss(init_network(3, seed), stack[0], stack[1])
    assert res >= 0 and cons >= 0 and total >= 0


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        loss(zero_network(2), np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        gradients(zero_network(2), np.zeros((4, 4)), np.zeros((5, 4)))


# --- gradients -----------------------------------------------------------------

def test_gradients_vanish_at_trivial_minimum():
    r1, _ = smooth_pair(8)
    g = gradients(zero_network(6), r1, r1)
    assert all(not a.any() for a in g.arrays())


def test_bias_gradient_scales_with_input():
    r1, r2 = smooth_pair(8)
    g1 = gradients(zero_network(4), r1, r2).b3[0]
    g3 = gradients(zero_network(4), 3.0 * r1, 3.0 * r2).b3[0]
    assert g3 == pytest.approx(3.0 * g1)


def test_gradients_fd_all_parameters_small_net():
    r1, r2 = smooth_pair(10, seed=1)
    p = init_network(4, 1)
    p.b1[:] = 0.05
    p.b2[:] = 0.05
    p.b3[:] = 0.1
    errors = fd_check(p, (r1, r2), range(p.n_params))
    assert errors.max() <= 1e-3


def test_gradients_fd_sample_c48():
    r1, r2 = smooth_pair(12, seed=2)
    p = init_network(48, 2)
    idx = np.random.default_rng(0).choice(p.n_params, 150, replace=False)
    idx = np.union1d(idx, [0, 431, 480, 21263, 21312])  # touch every layer
    assert fd_check(p, (r1, r2), idx).max() <= 1e-3


def test_gradients_fd_three_subsets():
    rng = np.random.default_rng(6)
    recons = tuple(rng.standard_normal((3, 6, 6)))
    p = init_network(3, 4)
    assert fd_check(p, recons, range(p.n_params)).max() <= 1e-3


# --- training ------------------------------------------------------------------

def test_train_config_validation():
    for bad in ({"iterations": 0}, {"lr": 0.0}, {"gamma": 0.0}, {"gamma": 1.5}, {"k_subsets": 1}, {"step_size": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_lr_schedule():
    cfg = TrainConfig()
    lrs = [cfg.learning_rate(i) for i in (0, 999, 1000, 2000)]
    assert lrs[0] == 0.01 and lrs[1] == 0.01
    assert lrs[2] == pytest.approx(0.006) and lrs[3] == pytest.approx(0.0036)


def test_train_reduces_loss_and_is_deterministic():
    r1, r2 = smooth_pair(16)
    cfg = TrainConfig(iterations=60, channels=8, seed=3)
    a = train([r1, r2], cfg)
    b = train([r1, r2], cfg)
    assert a.history.shape == (61, 5)
    assert a.history[-1, 4] <= a.history[0, 4]
    assert all(np.array_equal(x, y) for x, y in zip(a.params.arrays(), b.params.arrays()))
    assert np.array_equal(a.history, b.history)


def test_train_identical_subsets_learns_zero_map():
    r1, _ = smooth_pair(16)
    model = train([r1, r1], TrainConfig(iterations=300, channels=16, seed=0))
    assert model.history[-1, 4] <= model.history[0, 4]
    g = forward(model.params, model.normalize(r1)) * model.std
    assert np.linalg.norm(g) <= 1e-2 * np.linalg.norm(r1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_diverges_loudly():
    r1, r2 = smooth_pair(8)
    with pytest.raises(TrainingDivergedError) as info:
        train([1e18 * r1, r2], TrainConfig(iterations=50, lr=1e30, channels=4))
    assert info.value.iteration >= 0


def test_train_needs_two_images():
    with pytest.raises(ValueError):
        train([np.zeros((4, 4))], TrainConfig(iterations=1))


# --- artifact removal ------------------------------------------------------------

def test_zero_params_identity():
    recon = np.random.default_rng(0).standard_normal((8, 8)).astype(np.float32)
    model = TrainedModel(zero_network(4, np.float32), 0.3, 2.0, TrainConfig())
    clean, artifact = remove_artifacts(model, recon)
    assert np.array_equal(clean, recon) and not artifact.any()


def test_decomposition_exact():
    r1, r2 = smooth_pair(16)
    model = train([r1, r2], TrainConfig(iterations=20, channels=8))
    recon = 5.0 * (r1 + r2) + 0.123456789
    clean, artifact = remove_artifacts(model, recon)
    assert np.array_equal(clean + artifact, recon.astype(np.float32).astype(np.float64))
    assert np.any(artifact != 0)


def test_remove_artifacts_shape_check():
    model = TrainedModel(zero_network(2), 0.0, 1.0, TrainConfig())
    with pytest.raises(ValueError):
        remove_artifacts(model, np.zeros((4, 4)), shape=(4, 5))


# --- pipeline ------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_scene():
    grid = make_grid(0.0, 0.8, 0.1)
    spec = PhantomSpec("tubes", [((-0.6, -0.4, 0), (0.6, 0.5, 0), 0.15, 1.0)])
    src = rasterize_phantom(spec, grid)
    arr = fibonacci_sphere_array(24, 20.0)
    dt = grid.spacing / C
    raw = simulate_signals(src, arr, dt, required_samples(grid, arr, dt, C), C)
    return grid, arr, raw


def test_run_smoke_m_n_minus_one(tiny_scene):
    grid, arr, raw = tiny_scene
    res = run_zsa2a(raw, arr, Plane(grid, "z", 8), 23, TrainConfig(iterations=1, channels=4))
    assert np.all(np.isfinite(res.clean)) and res.clean.shape == (16, 16)
    assert len(res.subsets) == 2 and all(len(s) == 23 for s in res.subsets)
    assert np.array_equal(res.clean + res.artifact, res.recon.astype(np.float32).astype(np.float64))


def test_run_rejects_full_subset(tiny_scene):
    grid, arr, raw = tiny_scene
    with pytest.raises(ValueError):
        run_zsa2a(raw, arr, Plane(grid, "z", 8), 24, TrainConfig(iterations=1))


def test_run_map_and_k3(tiny_scene):
    grid, arr, raw = tiny_scene
    res = run_zsa2a(raw, arr, MapTarget(grid, "z"), 18, TrainConfig(iterations=3, channels=4, k_subsets=3))
    assert len(res.subsets) == 3 and np.all(np.isfinite(res.clean))


def test_volume_mode_threads_equal(tiny_scene):
    grid, arr, raw = tiny_scene
    small = make_grid(0.0, 0.3, 0.1)
    cfg = TrainConfig(iterations=2, channels=3, seed=5)
    a = run_zsa2a(raw, arr, small, 20, cfg, threads=1)
    b = run_zsa2a(raw, arr, small, 20, cfg, threads=3)
    assert a.clean.shape == small.dims
    assert np.array_equal(a.clean, b.clean)
    # per-slice seeds are master ^ slice index
    assert [m.config.seed for m in a.models] == [5 ^ i for i in range(small.dims[2])]
