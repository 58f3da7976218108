import numpy as np
import pytest

from aquasplat.errors import AquasplatError, ConfigError
from aquasplat.gaussian import FREEZABLE, GaussianCloud
from aquasplat.optim import (
    ADAM_EPS,
    DensifyConfig,
    GradStats,
    LearningRates,
    OptimizerState,
    StageConfig,
    adam_step,
    cloud_params,
    densify_and_prune,
    group_lrs,
    position_lr,
    remap_optimizer,
    stage_schedule,
)

from conftest import make_cloud, random_cloud


def test_zero_gradient_leaves_params():
    p = {"a": np.array([1.0, -2.0])}
    st = OptimizerState.for_params(p)
    adam_step(p, {"a": np.zeros(2)}, st, {"a": 0.1})
    np.testing.assert_array_equal(p["a"], [1.0, -2.0])
    assert st.step_count == 1


def test_first_step_closed_form():
    p = {"a": np.array([0.0])}
    st = OptimizerState.for_params(p)
    adam_step(p, {"a": np.array([1.0])}, st, {"a": 0.1})
    assert p["a"][0] == pytest.approx(-0.1 / (1.0 + ADAM_EPS), rel=1e-15)


def test_three_step_quadratic_trace():
    # f(x) = (x - 3)^2, hand-rolled Adam
    x, m, v = 0.0, 0.0, 0.0
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-15
    trace = []
    for t in range(1, 4):
        g = 2 * (x - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        trace.append(x)
    p = {"x": np.array([0.0])}
    st = OptimizerState.for_params(p)
    got = []
    for _ in range(3):
        adam_step(p, {"x": 2 * (p["x"] - 3)}, st, {"x": lr})
        got.append(p["x"][0])
    np.testing.assert_allclose(got, trace, rtol=1e-14)


def test_frozen_group_untouched():
    p = {"a": np.array([1.0]), "b": np.array([1.0])}
    st = OptimizerState.for_params(p)
    adam_step(p, {"a": np.array([1.0]), "b": np.array([1.0])}, st, {"a": 0.1, "b": 0.1}, freeze={"b"})
    assert p["b"][0] == 1.0 and st.first_moment["b"][0] == 0.0 and st.second_moment["b"][0] == 0.0
    assert p["a"][0] < 1.0


def test_rotation_renormalized(rng):
    cloud = random_cloud(rng, 5)
    params = cloud_params(cloud)
    st = OptimizerState.for_params(params)
    grads = {k: rng.normal(size=v.shape) for k, v in params.items()}
    adam_step(params, grads, st, {k: 0.1 for k in params})
    np.testing.assert_allclose(np.linalg.norm(cloud.rotations, axis=1), 1.0, rtol=1e-14)


def test_non_finite_update_raises():
    p = {"a": np.array([1.0])}
    st = OptimizerState.for_params(p)
    with pytest.raises(AquasplatError, match="'a'"):
        adam_step(p, {"a": np.array([np.inf])}, st, {"a": 0.1})


def test_learning_rate_schedule():
    r = LearningRates()
    assert position_lr(0, r, 100) == pytest.approx(1.6e-4)
    assert position_lr(100, r, 100) == pytest.approx(1.6e-6)
    assert position_lr(50, r, 100) == pytest.approx(1.6e-5)
    assert position_lr(0, r, 100, spatial_scale=2.0) == pytest.approx(3.2e-4)
    lrs = group_lrs(50, LearningRates(medium=0.1, medium_final=0.001), 100)
    assert lrs["medium"] == pytest.approx(0.01)
    assert group_lrs(50, r, 100)["medium"] == 1e-3


def test_stage_schedule_boundary():
    cfg = StageConfig(total_iterations=20000, stage_boundary_fraction=0.6)
    s = stage_schedule(11999, cfg)
    assert s.stage == 1 and s.freeze == frozenset() and (s.l1_weight, s.l2_weight) == (0.8, 0.0) and s.densify
    s = stage_schedule(12000, cfg)
    assert s.stage == 2 and s.freeze == {"position", "rotation", "scale", "semantic"}
    assert (s.l1_weight, s.l2_weight) == (0.4, 0.5) and not s.densify


def test_full_fraction_and_disabled_schedule():
    cfg = StageConfig(total_iterations=200, stage_boundary_fraction=1.0)
    assert all(stage_schedule(i, cfg).stage == 1 for i in range(200))
    off = StageConfig(total_iterations=200, enabled=False)
    assert all(stage_schedule(i, off).stage == 1 for i in range(200))
    assert StageConfig(total_iterations=200).boundary == 120


def test_stage_config_validation():
    with pytest.raises(ConfigError):
        StageConfig(freeze_groups={"opacity"})
    with pytest.raises(ConfigError):
        StageConfig(stage_boundary_fraction=0.0)
    assert StageConfig().freeze_groups == FREEZABLE


def _three():
    cloud = make_cloud([[0, 0, 2.0], [1, 0, 2.0], [0, 1, 2.0]], [[0.01] * 3, [0.5, 0.2, 0.1], [0.01] * 3], [0.5, 0.5, 0.5], [0.0, 1.0, 2.0])
    cloud.semantic_features[:] = np.arange(3)[:, None] + 0.25
    return cloud


def test_densify_no_hot_gradients():
    cloud = _three()
    res = densify_and_prune(cloud, GradStats.zeros(3), DensifyConfig(), extent=5.0, rng=np.random.default_rng(0))
    for name in ("positions", "log_scales", "rotations", "sh_coeffs", "opacity_logits", "semantic_features"):
        np.testing.assert_array_equal(getattr(res.cloud, name), getattr(cloud, name))
    assert (res.n_cloned, res.n_split, res.n_pruned) == (0, 0, 0)


def test_prune_transparent():
    cloud = _three()
    cloud.opacity_logits[1] = np.log(0.004 / 0.996)
    res = densify_and_prune(cloud, GradStats.zeros(3), DensifyConfig(), 5.0, np.random.default_rng(0))
    assert res.cloud.n == 2 and res.n_pruned == 1
    np.testing.assert_array_equal(res.source, [0, 2])


def test_clone_and_split_rules():
    cloud = _three()
    stats = GradStats(np.array([1e-3, 1e-3, 0.0]), np.ones(3))
    cfg = DensifyConfig(grad_threshold=2e-4, percent_dense=0.01)
    rng = np.random.default_rng(4)
    res = densify_and_prune(cloud, stats, cfg, extent=5.0, rng=rng)
    # primitive 0 is small (0.01 <= 0.05): cloned; primitive 1 is large: split into 2
    assert (res.n_cloned, res.n_split) == (1, 1)
    np.testing.assert_array_equal(res.source, [0, 2, 0, 1, 1])
    np.testing.assert_array_equal(res.is_new, [False, False, True, True, True])
    c = res.cloud
    for name in ("positions", "log_scales", "rotations", "sh_coeffs", "opacity_logits", "semantic_features"):
        np.testing.assert_array_equal(getattr(c, name)[2], getattr(cloud, name)[0])
    np.testing.assert_allclose(c.log_scales[3:], np.tile(cloud.log_scales[1] - np.log(1.6), (2, 1)))
    np.testing.assert_array_equal(c.semantic_features[3:], np.tile(cloud.semantic_features[1], (2, 1)))
    np.testing.assert_array_equal(c.opacity_logits[3:], cloud.opacity_logits[1])
    # identity rotation: child offsets are N(0,1) * parent scale, drawn in order
    expected = cloud.positions[1] + np.random.default_rng(4).normal(size=(2, 3)) * np.exp(cloud.log_scales[1])
    np.testing.assert_allclose(c.positions[3:], expected, rtol=1e-14)


def test_cap_disables_growth():
    cloud = _three()
    stats = GradStats(np.ones(3), np.ones(3))
    res = densify_and_prune(cloud, stats, DensifyConfig(max_primitives=3), 5.0, np.random.default_rng(0))
    assert res.cloud.n == 3


def test_optimizer_remap():
    cloud = _three()
    params = cloud_params(cloud)
    st = OptimizerState.for_params(params)
    for k in params:
        st.first_moment[k] += 1.0
    stats = GradStats(np.array([1e-3, 0.0, 0.0]), np.ones(3))
    res = densify_and_prune(cloud, stats, DensifyConfig(), 5.0, np.random.default_rng(0))
    remap_optimizer(st, res)
    np.testing.assert_array_equal(st.first_moment["position"][:, 0], [1.0, 1.0, 1.0, 0.0])
    assert st.second_moment["semantic"].shape == (4, 32)


def test_grad_stats_ndc_scaling():
    s = GradStats.zeros(2)
    s.add(np.array([[3.0, 0.0], [1.0, 1.0]]), np.array([True, False]), 4, 2)
    s.add(np.array([[0.0, 1.0], [1.0, 1.0]]), np.array([True, False]), 4, 2)
    np.testing.assert_allclose(s.mean(), [3.5, 0.0])


def test_invariants_after_densify(rng):
    cloud = random_cloud(rng, 40)
    stats = GradStats(rng.uniform(0, 1e-3, 40), np.ones(40))
    res = densify_and_prune(cloud, stats, DensifyConfig(percent_dense=0.02), 5.0, rng)
    assert isinstance(res.cloud, GaussianCloud)
    np.testing.assert_allclose(np.linalg.norm(res.cloud.rotations, axis=1), 1.0, rtol=1e-12)
    assert np.all(res.cloud.scales > 0) and np.all(res.cloud.opacities >= 5e-3)
