import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghostpose.geometry import Workspace
from ghostpose.ghosts import (
    StageConfig,
    allocate,
    default_stages,
    infer_position,
    jittered_center,
    sample_ball,
    sample_stage,
    soft_targets,
    training_targets,
)

WS = Workspace((-0.5, -0.5, -0.1), (0.5, 0.5, 0.9))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(0, 50000))
def test_allocate_is_equal_split_with_early_remainder(stages, extra):
    total = stages + extra
    counts = allocate(total, stages)
    assert sum(counts) == total
    assert max(counts) - min(counts) <= 1
    assert list(counts) == sorted(counts, reverse=True)


def test_allocate_known_values():
    assert allocate(1000) == (334, 333, 333)
    assert allocate(10000) == (3334, 3333, 3333)
    assert allocate(3) == (1, 1, 1)
    with pytest.raises(ValueError):
        allocate(2, 3)


def test_default_stage_layout():
    s = default_stages()
    assert [x.diameter for x in s] == [None, 0.16, 0.04]
    assert [x.source for x in s] == ["coarse", "local-fine", "local-fine"]
    assert all(x.source == "coarse" for x in default_stages(global_only=True))
    with pytest.raises(ValueError):
        default_stages((0.04, 0.16))


def test_box_stage_stays_in_workspace(rng):
    g = sample_stage(StageConfig(1, None), WS.center, 5000, rng, WS)
    assert g.positions.shape == (5000, 3) and WS.contains(g.positions).all()
    # uniform: per-axis means near the box center
    np.testing.assert_allclose(g.positions.mean(0), WS.center, atol=0.02)


def test_ball_points_inside_and_uniform(rng):
    c = np.array([0.1, -0.2, 0.3])
    pts = sample_ball(c, 0.16, 20000, rng)
    r = np.linalg.norm(pts - c, axis=1)
    assert r.max() <= 0.08 + 1e-15
    # Monte-Carlo oracle: the mean of a uniform ball is its center
    np.testing.assert_allclose(pts.mean(0), c, atol=3 * 0.08 / np.sqrt(5 * 20000) * 2)
    # radial CDF of a uniform ball is (r/R)^3
    frac = (r <= 0.04).mean()
    assert abs(frac - 0.125) < 0.01


def test_zero_diameter_ball_is_the_center(rng):
    c = np.array([0.3, 0.2, 0.1])
    np.testing.assert_array_equal(sample_ball(c, 0.0, 4, rng), np.repeat(c[None], 4, 0))


def test_lattice_mode_stays_in_region(rng):
    g = sample_stage(StageConfig(2, 0.16, "local-fine"), np.zeros(3), 200, rng, WS, lattice=True)
    assert len(g.positions) == 200
    assert np.linalg.norm(g.positions, axis=1).max() <= 0.08 + 1e-12
    b = sample_stage(StageConfig(1, None), WS.center, 100, rng, WS, lattice=True)
    assert WS.contains(b.positions).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**32 - 1))
def test_targets_match_linear_scan(n, seed):
    r = np.random.default_rng(seed)
    pts = np.round(r.uniform(-1, 1, (n, 3)) * 3) / 3
    gt = np.round(r.uniform(-1, 1, 3) * 3) / 3
    best, best_d = 0, np.inf
    for i, p in enumerate(pts):
        d = sum((p[j] - gt[j]) ** 2 for j in range(3))
        if d < best_d:
            best, best_d = i, d
    assert training_targets(pts, gt) == best


def test_target_ties_go_to_lowest_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    assert training_targets(pts, np.zeros(3)) == 0


def test_soft_targets_peak_at_nearest(rng):
    pts = rng.uniform(-1, 1, (50, 3))
    gt = rng.uniform(-1, 1, 3)
    t = soft_targets(pts, gt, 0.05)
    assert t.sum() == pytest.approx(1.0)
    assert int(np.argmax(t)) == training_targets(pts, gt)


def test_jitter_radius_is_quarter_diameter(rng):
    gt = np.array([0.0, 0.1, 0.4])
    d = [np.linalg.norm(jittered_center(gt, 0.16, rng) - gt) for _ in range(2000)]
    assert max(d) <= 0.04 + 1e-15 and max(d) > 0.035
    d = [np.linalg.norm(jittered_center(gt, 0.16, rng, fraction=1.0) - gt) for _ in range(2000)]
    assert max(d) <= 0.08 + 1e-15 and max(d) > 0.07


class ScriptedModel:
    """Scores ghosts by negative distance to a hidden point."""

    def __init__(self, goal):
        self.goal = np.asarray(goal)
        self.workspace = WS
        self.stages = default_stages()
        self.calls = []

    def run_stage(self, stage, scene, context, ghosts, query, query_pos):
        self.calls.append((stage.index, ghosts.center.copy(), len(ghosts.positions)))
        return -np.linalg.norm(ghosts.positions - self.goal, axis=1), stage.index


def test_search_centers_each_stage_on_previous_argmax(rng):
    goal = np.array([0.12, -0.21, 0.33])
    m = ScriptedModel(goal)
    res = infer_position(m, None, None, 3000, rng)
    assert [c[0] for c in m.calls] == [1, 2, 3]
    assert [c[2] for c in m.calls] == [1000, 1000, 1000]
    for prev, trace in zip(res.stages, res.stages[1:]):
        np.testing.assert_array_equal(trace.center, prev.selected_position)
    np.testing.assert_array_equal(res.position, res.stages[-1].selected_position)
    assert np.linalg.norm(res.position - goal) < 0.01
    assert res.query == 3


def test_one_point_per_stage_returns_the_single_stage3_sample(rng):
    m = ScriptedModel(np.zeros(3))
    res = infer_position(m, None, None, 3, rng)
    assert len(res.stages[-1].positions) == 1
    np.testing.assert_array_equal(res.position, res.stages[-1].positions[0])


def test_larger_budget_respects_regions(rng):
    m = ScriptedModel(np.array([0.0, 0.0, 0.2]))
    res = infer_position(m, None, None, 30000, rng)
    s1, s2, s3 = res.stages
    assert WS.contains(s1.positions).all()
    assert np.linalg.norm(s2.positions - s2.center, axis=1).max() <= 0.08 + 1e-12
    assert np.linalg.norm(s3.positions - s3.center, axis=1).max() <= 0.02 + 1e-12
