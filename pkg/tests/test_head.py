import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghostpose.geometry import quat_angle, quat_from_yaw
from ghostpose.head import KeyposeAction, LossWeights, RegressionHead, normalized_quaternion, regress, score, total_loss
from ghostpose.losses import binary_cross_entropy, binary_cross_entropy_with_logits, cross_entropy, mse, soft_cross_entropy
from ghostpose.tensor import Tensor


def test_score_is_inner_product(rng):
    q, g = rng.normal(size=(2, 1, 6)), rng.normal(size=(2, 5, 6))
    np.testing.assert_allclose(score(Tensor(q), Tensor(g)).data, np.einsum("bnd,bd->bn", g, q[:, 0]), rtol=1e-13)
    with pytest.raises(ValueError):
        score(Tensor(q), Tensor(np.zeros((2, 0, 6))))


def test_regress_normalizes_and_canonicalizes():
    q, po, pc, ob, cb = regress(np.array([-2.0, 0.0, 0.0, 0.0, 3.0, -3.0]))
    np.testing.assert_array_equal(q, [1.0, 0.0, 0.0, 0.0])
    assert ob == 1 and cb == 0
    assert po == pytest.approx(1 / (1 + np.exp(-3.0)))
    with pytest.raises(ValueError):
        regress(np.zeros(6))


def test_action_rejects_non_unit_and_bad_bits():
    with pytest.raises(ValueError):
        KeyposeAction(np.zeros(3), [1.0, 1.0, 0.0, 0.0], 1, 0)
    with pytest.raises(ValueError):
        KeyposeAction(np.zeros(3), [1.0, 0.0, 0.0, 0.0], 2, 0)


def test_action_record_round_trip():
    a = KeyposeAction([0.1, 0.2, 0.3], -quat_from_yaw(0.4), 0, 1, 0.2, 0.9, 0.5)
    assert a.rotation[0] > 0
    b = KeyposeAction.from_record(a.to_record())
    np.testing.assert_array_equal(a.position, b.position)
    np.testing.assert_array_equal(a.rotation, b.rotation)
    assert (b.open, b.collision, b.confidence) == (0, 1, 0.5)
    assert len(a.to_record()["values"]) == 10


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_normalized_quaternion_is_unit_and_sign_invariant(v):
    v = np.asarray(v)
    a = normalized_quaternion(Tensor(v)).data
    b = normalized_quaternion(Tensor(-v)).data
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert quat_angle(a, b) < 1e-6
    if abs(v[0]) > 1e-9:
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_cross_entropy_oracle():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    ref = -np.mean([2.0 - np.log(np.exp([1, 2, 0.5]).sum()), -np.log(3.0)])
    assert cross_entropy(logits, [1, 2]).item() == pytest.approx(ref, rel=1e-14)
    with pytest.raises(IndexError):
        cross_entropy(logits, [3, 0])
    with pytest.raises(ValueError):
        cross_entropy(logits, [0])


def test_soft_cross_entropy_reduces_to_hard():
    logits = np.random.default_rng(0).normal(size=(3, 4))
    onehot = np.eye(4)[[1, 3, 0]]
    assert soft_cross_entropy(logits, onehot).item() == pytest.approx(cross_entropy(logits, [1, 3, 0]).item(), rel=1e-13)


def test_bce_forms_agree():
    x = np.array([-3.0, 0.2, 4.0])
    t = np.array([0.0, 1.0, 1.0])
    p = 1 / (1 + np.exp(-x))
    assert binary_cross_entropy_with_logits(x, t).item() == pytest.approx(binary_cross_entropy(p, t).item(), rel=1e-12)
    with pytest.raises(ValueError):
        binary_cross_entropy(np.array([0.0]), np.array([1.0]))
    # stable far from zero
    assert np.isfinite(binary_cross_entropy_with_logits(np.array([800.0]), np.array([0.0])).item())


def test_mse_shape_check():
    with pytest.raises(ValueError):
        mse(np.zeros(3), np.zeros(4))


def test_total_loss_composition(rng):
    logits = [Tensor(rng.normal(size=(2, n))) for n in (4, 3, 3)]
    targets = [np.array([0, 3]), np.array([1, 1]), np.array([2, 0])]
    raw = Tensor(rng.normal(size=(2, 6)))
    gt_q = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    gt_open, gt_col = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    loss, parts = total_loss(logits, targets, raw, gt_q, gt_open, gt_col)
    q = raw.data[:, :4] / np.linalg.norm(raw.data[:, :4], axis=1, keepdims=True)
    q = q * np.where(q[:, :1] < 0, -1, 1)
    ce = sum(cross_entropy(lg, tg).item() for lg, tg in zip(logits, targets))
    ref = (
        ce
        + 10.0 * np.mean((q - gt_q) ** 2)
        + binary_cross_entropy_with_logits(raw.data[:, 4], gt_open).item()
        + binary_cross_entropy_with_logits(raw.data[:, 5], gt_col).item()
    )
    assert loss.item() == pytest.approx(ref, rel=1e-12)
    assert parts["total"] == pytest.approx(ref, rel=1e-12)
    assert LossWeights().rotation == 10.0
    with pytest.raises(ValueError):
        total_loss(logits[:2], targets[:2], raw, gt_q, gt_open, gt_col)


def test_head_output_width(rng):
    assert RegressionHead(12, rng)(Tensor(rng.normal(size=(3, 12)))).shape == (3, 6)
