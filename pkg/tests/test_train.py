import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spikefield.config import ConfigError
from spikefield.dataset import OrbitParams, SceneSpec, Sphere, build_dataset, desk_scene
from spikefield.field import GridGrad, VoxelGrid, backward_rays, ray_box, render_rays
from spikefield.recon import ReconConfig
from spikefield.sim import StartupMode
from spikefield.train import (
    LOG_FIELDS, OptimizerState, TrainConfig, _SpikeSchedule, adam_step, hard_counts, loss_recon,
    loss_spike, total_loss, train, write_log,
)

TINY = OrbitParams(n_views=48, duration_s=48 * 25e-6, focal_px=14.0, width=10, height=10)


@pytest.fixture(scope="module")
def tiny_data():
    spec = SceneSpec((Sphere((0.1, 0.0, 0.0), 0.45, (0.8, 0.4, 0.2), 40.0),), grid_resolution=12)
    return build_dataset(spec, TINY, 0.5, StartupMode.random(0), n_samples=32, n_heldout=2)


def tiny_config(**kw):
    base = dict(n_iterations=5, rays_per_batch=64, resolution=8, n_samples=16,
                spike_window_frames=8, spike_lattice_stride=3, recon=ReconConfig(window_w=5))
    base.update(kw)
    return TrainConfig(**base)


# -- losses -----------------------------------------------------------------------


def test_loss_recon_examples():
    loss, adj = loss_recon([[0.8]], [[0.5]], [[1]])
    assert loss == pytest.approx(0.09) and adj[0, 0] == pytest.approx(0.6)
    loss, adj = loss_recon([[0.3, 0.2]], [[0.3, 0.2]], [[1, 1]])
    assert loss == 0.0 and not adj.any()
    loss, adj = loss_recon([[0.8], [0.1]], [[0.5], [0.0]], [[0], [0]])
    assert loss == 0.0 and not adj.any()


def test_loss_recon_modes():
    pred, target, mask = np.array([[0.8], [0.4]]), np.array([[0.5], [0.9]]), np.array([[1], [0]])
    loss, adj = loss_recon(pred, target, mask, "ignore")
    assert loss == pytest.approx(0.09) and adj[1, 0] == 0.0
    loss, adj = loss_recon(pred, target, mask, "zero")
    assert loss == pytest.approx((0.09 + 0.16) / 2)
    np.testing.assert_allclose(adj[:, 0], [0.3, 0.4])
    with pytest.raises(ValueError):
        loss_recon(pred, target, mask, "skip")


@given(arrays(np.float64, (6, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (6, 3), elements=st.floats(0, 1)),
       arrays(np.uint8, (6, 3), elements=st.integers(0, 1)))
def test_loss_recon_nonnegative_zero_iff_equal(pred, target, mask):
    loss, adj = loss_recon(pred, target, mask)
    assert loss >= 0
    equal_on_mask = np.all((pred == target) | (mask == 0))
    assert (loss == 0) == bool(equal_on_mask) or loss < 1e-300


def test_loss_recon_adjoint_is_gradient(rng):
    pred, target = rng.random((5, 3)), rng.random((5, 3))
    mask = rng.integers(0, 2, (5, 3))
    for mode in ("ignore", "zero"):
        _, adj = loss_recon(pred, target, mask, mode)
        h = 1e-6
        for idx in np.ndindex(pred.shape):
            p, m = pred.copy(), pred.copy()
            p[idx] += h
            m[idx] -= h
            num = (loss_recon(p, target, mask, mode)[0] - loss_recon(m, target, mask, mode)[0]) / (2 * h)
            assert adj[idx] == pytest.approx(num, abs=1e-8)


def test_loss_spike_matching_window():
    frames = np.full((10, 1, 1), 0.5)
    gt = hard_counts(frames, 1.0)
    bits = np.zeros((10, 1, 1), np.uint8)
    bits[1::2] = 1
    assert gt[0, 0] == 5
    loss, adj = loss_spike(frames, bits, 1.0)
    assert loss == 0.0 and not adj.any()


def test_loss_spike_one_missing_spike():
    frames = np.full((10, 1, 1), 0.4)  # 4 spikes from a zero start
    gt = np.zeros((10, 1, 1), np.uint8)
    gt[[1, 3, 5, 7, 9]] = 1
    loss, adj = loss_spike(frames, gt, 1.0)
    assert loss == pytest.approx(0.1)
    # sign(count_pred - count_gt) / (phi * window * n_rays)
    np.testing.assert_allclose(adj, -0.1)


def test_loss_spike_sign_invariant_to_phi(rng):
    frames = rng.random((12, 7, 3)) * 0.9
    gt = rng.integers(0, 2, (12, 7, 3)).astype(np.uint8)
    _, a1 = loss_spike(frames, gt, 1.0)
    l2, a2 = loss_spike(frames * 2.0, gt, 2.0)
    np.testing.assert_array_equal(np.sign(a1), np.sign(a2))


@given(st.integers(0, 2**32 - 1))
def test_loss_spike_depends_on_counts_only(seed):
    rng = np.random.default_rng(seed)
    frames = rng.random((16, 5, 1)) * 0.9
    gt = rng.integers(0, 2, (16, 5, 1)).astype(np.uint8)
    counts = hard_counts(frames, 1.0)
    # tiny perturbations that keep every count
    other = frames + rng.normal(0, 1e-9, frames.shape)
    other = np.clip(other, 0, None)
    if not np.array_equal(hard_counts(other, 1.0), counts):
        return
    assert loss_spike(frames, gt, 1.0)[0] == loss_spike(other, gt, 1.0)[0]


def test_loss_spike_shape_check():
    with pytest.raises(ValueError):
        loss_spike(np.zeros((4, 2, 1)), np.zeros((5, 2, 1), np.uint8), 1.0)


def test_total_loss():
    assert total_loss(0.5, 0.2, 0.1) == pytest.approx(0.52)
    assert total_loss(0.5, 0.2, 0.0) == 0.5
    assert total_loss(0.0, 0.7, 0.3) == pytest.approx(0.21)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5))
def test_total_loss_affine_in_spike(r, s1, s2, lam):
    assert total_loss(r, s2, lam) - total_loss(r, s1, lam) == pytest.approx(lam * (s2 - s1), abs=1e-9)


# -- Adam ---------------------------------------------------------------------------


def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    adam_step(p, [np.zeros(2)], OptimizerState.like(p), TrainConfig())
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_is_sign_step():
    p = [np.array([0.5])]
    adam_step(p, [np.array([1.0])], OptimizerState.like(p), TrainConfig(learning_rate=0.1))
    assert p[0][0] - 0.5 == pytest.approx(-0.1, abs=1e-8)


def test_adam_matches_scalar_reference(rng):
    cfg = TrainConfig(learning_rate=0.05, adam_beta1=0.8, adam_beta2=0.99, adam_eps=1e-6)
    p = [rng.normal(size=3)]
    state = OptimizerState.like(p)
    ref_p, m, v = p[0].copy(), np.zeros(3), np.zeros(3)
    for t in range(1, 8):
        g = rng.normal(size=3)
        adam_step(p, [g], state, cfg)
        for k in range(3):
            m[k] = 0.8 * m[k] + 0.2 * g[k]
            v[k] = 0.99 * v[k] + 0.01 * g[k] ** 2
            ref_p[k] -= 0.05 * (m[k] / (1 - 0.8**t)) / ((v[k] / (1 - 0.99**t)) ** 0.5 + 1e-6)
    np.testing.assert_allclose(p[0], ref_p, rtol=1e-12)
    assert state.step_count == 7


def test_adam_rejects_non_finite():
    p = [np.zeros(3), np.zeros((2, 2))]
    g = [np.zeros(3), np.array([[0.0, 0.0], [np.nan, 0.0]])]
    with pytest.raises(FloatingPointError, match=r"parameter 1 at index \(1, 0\)"):
        adam_step(p, g, OptimizerState.like(p), TrainConfig())


# -- config -------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        TrainConfig(spike_window_frames=1)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(unmasked="maybe")


def test_config_text_round_trip():
    cfg = TrainConfig(lam=0.25, learning_rate=0.2, use_mask=False, bbox_min=(-2, -1, -1),
                      recon=ReconConfig("tfi", 9, 16), seed=9)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    assert TrainConfig.from_text("lambda = 0.5\n# note\nseed = 3\n") == TrainConfig(lam=0.5, seed=3)
    with pytest.raises(ConfigError):
        TrainConfig.from_text("momentum = 0.9\n")
    with pytest.raises(ConfigError):
        TrainConfig.from_text("recon_kernel = 3\n")


# -- training loop ------------------------------------------------------------------


def test_spike_schedule_round_robin_and_lattice():
    sched = _SpikeSchedule(n_frames=40, settle=4, window=8, stride=3, height=10, width=10)
    assert sched.starts == [4, 12, 20, 28]
    seen = set()
    for it in range(4 * 9):
        start, pix = sched(it)
        assert start == sched.starts[it % 4]
        seen.add((int(pix[0, 0]), int(pix[0, 1])))
    assert seen == {(x, y) for x in range(3) for y in range(3)}
    with pytest.raises(ValueError):
        _SpikeSchedule(10, 5, 8, 3, 10, 10)


def test_zero_iterations_returns_initial_grid(tiny_data):
    init = VoxelGrid.empty(8, 3)
    grid, log = train(tiny_data.stream, tiny_data.trajectory, tiny_config(n_iterations=0), init_grid=init)
    assert grid == init and log == []


def test_training_deterministic_and_logged(tiny_data, tmp_path):
    cfg = tiny_config(n_iterations=6, val_every=3)
    from spikefield.train import ValidationSet
    val = ValidationSet(tiny_data.heldout, tiny_data.heldout_images)
    g1, log1 = train(tiny_data.stream, tiny_data.trajectory, cfg, val)
    g2, log2 = train(tiny_data.stream, tiny_data.trajectory, cfg, val)
    assert g1 == g2
    write_log(log1, tmp_path / "a.csv")
    write_log(log2, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOG_FIELDS)
    assert [r.iter for r in log1] == list(range(1, 7))
    assert [r.psnr_val is not None for r in log1] == [False, False, True, False, False, True]
    for r in log1:
        assert r.loss_total == pytest.approx(total_loss(r.loss_recon, r.loss_spike, cfg.lam))


def test_lambda_zero_skips_spike_loss(tiny_data):
    _, log = train(tiny_data.stream, tiny_data.trajectory, tiny_config(lam=0.0))
    assert all(r.loss_spike is None and r.loss_total == r.loss_recon for r in log)


def test_training_rejects_misaligned(tiny_data):
    with pytest.raises(ValueError):
        train(tiny_data.stream, tiny_data.trajectory[:-1], tiny_config())


def test_recon_gradient_through_renderer(rng):
    """loss_recon(render(rays)) backpropagated through the renderer matches finite differences."""
    grid = VoxelGrid((-1, -1, -1), (1, 1, 1), rng.normal(0, 1, (3, 3, 3)), rng.normal(0, 1, (3, 3, 3, 2)))
    o = np.tile([0.1, -0.2, 3.0], (4, 1))
    d = rng.normal(0, 0.2, (4, 3)) + [0, 0, -1]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    tn, tf = ray_box(o, d, grid.bbox_min, grid.bbox_max)
    target, mask = rng.random((4, 2)), rng.integers(0, 2, (4, 2))
    mask[0] = 1

    def loss():
        return loss_recon(render_rays(grid, o, d, tn, tf, 12)[0], target, mask)[0]

    _, adj = loss_recon(render_rays(grid, o, d, tn, tf, 12)[0], target, mask)
    grad = backward_rays(grid, o, d, tn, tf, adj, GridGrad(np.zeros((3, 3, 3)), np.zeros((3, 3, 3, 2))), 12)
    h = 1e-5
    for arr, ana in ((grid.density_raw, grad.density), (grid.color_raw, grad.color)):
        flat, gflat = arr.reshape(-1), ana.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = loss()
            flat[k] = old - h
            down = loss()
            flat[k] = old
            assert gflat[k] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-9)


@pytest.mark.slow
def test_smoke_descent_desk():
    ds = build_dataset(desk_scene(resolution=32), OrbitParams(n_views=100, duration_s=0.0025,
                       width=32, height=32, focal_px=60.0), 1.0, n_samples=64, n_heldout=0)
    cfg = TrainConfig(n_iterations=500, rays_per_batch=1024, resolution=32, n_samples=64,
                      learning_rate=0.3, recon=ReconConfig(window_w=7))
    _, log = train(ds.stream, ds.trajectory, cfg)
    early = np.mean([r.loss_recon for r in log[7:12]])
    late = np.mean([r.loss_recon for r in log[495:500]])
    assert late < 0.5 * early
