import numpy as np
import pytest

from ghostpose.keyposes import Demonstration, extract_keyposes, make_tuples
from ghostpose.synth import TASKS, SynthConfig, generate_scene, script_demo, task_keyposes


def rows(positions, opens):
    a = np.zeros((len(positions), 9))
    a[:, :3] = positions
    a[:, 3] = 1.0
    a[:, 7] = opens
    return a


def test_hand_traced_trajectory():
    # t:    0    1    2    3    4    5    6    7    8    9
    x = [0.0, 0.1, 0.2, 0.2, 0.2, 0.2, 0.3, 0.3, 0.4, 0.5]
    o = [1, 1, 1, 1, 1, 1, 1, 0, 0, 0]
    # slow frames (speed < 0.01 m/s at dt 0.1): t = 3, 4, 5 and 7
    # run 3..5 has length 3 -> keypose 5; 7 is a single slow frame -> gripper flip at 7 anyway
    keys = extract_keyposes(rows(np.c_[x, np.zeros(10), np.zeros(10)], o), dt=0.1)
    assert keys == [5, 7, 9]


def test_short_pause_is_not_a_keypose():
    x = [0.0, 0.1, 0.1, 0.1, 0.2, 0.3]
    keys = extract_keyposes(rows(np.c_[x, np.zeros(6), np.zeros(6)], [1] * 6), dt=0.1)
    assert keys == [5]


def test_pause_at_end_and_flip_at_first_frame_boundary():
    x = [0.0, 0.0, 0.0, 0.0, 0.0]
    keys = extract_keyposes(rows(np.c_[x, np.zeros(5), np.zeros(5)], [0, 1, 1, 1, 1]), dt=0.1)
    # flip at t=1; frames 1..4 are slow and run to the end
    assert keys == [1, 4]


def test_speed_threshold_is_strict():
    # exactly 0.01 m/s is not slow
    x = np.arange(6) * 0.001
    keys = extract_keyposes(rows(np.c_[x, np.zeros(6), np.zeros(6)], [1] * 6), dt=0.1, vel_eps=0.01)
    assert keys == [5]


@pytest.mark.parametrize("task", TASKS)
def test_scripted_demos_recover_ground_truth(task):
    cfg = SynthConfig(image_size=16, n_views=1)
    checked = 0
    for seed in range(40):
        demo = script_demo(generate_scene(seed, task, cfg), cfg, views=[])
        assert extract_keyposes(demo.actions, demo.dt) == demo.meta["keyposes"]
        for k, kp in zip(demo.meta["keyposes"], task_keyposes(generate_scene(seed, task, cfg), cfg)):
            assert np.array_equal(demo.actions[k, :3], kp.position)
            assert np.array_equal(demo.actions[k, 3:7], kp.rotation)
        checked += 1
    assert checked == 40


def test_tuples_target_next_keypose():
    a = rows(np.c_[np.arange(6) * 0.1, np.zeros(6), np.zeros(6)], [1] * 6)
    demo = Demonstration([[]] * 6, a, "reach", np.array([2]))
    tuples = make_tuples(demo, [2, 5])
    assert [(t.t, t.target_t) for t in tuples] == [(0, 2), (1, 2), (2, 5), (3, 5), (4, 5)]
    np.testing.assert_allclose(tuples[3].proprio, [0.3, 0, 0, 1, 0, 0, 0, 1], atol=1e-15)
    with pytest.raises(ValueError):
        make_tuples(demo, [])


def test_demonstration_validation():
    with pytest.raises(ValueError):
        Demonstration([[]], np.zeros((1, 9)), "x", np.array([1]))
    with pytest.raises(ValueError):
        Demonstration([[], []], np.zeros((2, 8)), "x", np.array([1]))
