"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    params: Sequence[Tensor] = (),
) -> float:
    """Max over all coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``fn`` receives one Tensor per entry of ``inputs`` and must return a
    scalar.  Entries of ``params`` are checked too; they are perturbed in place
    and restored.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    for p in params:
        p.grad = None
    fn(*leaves).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]
    analytic += [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    def evaluate() -> float:
        return fn(*[Tensor(a) for a in arrays]).item()

    targets = arrays + [p.data for p in params]
    worst = 0.0
    for target, grad in zip(targets, analytic):
        flat = target.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate()
            flat[i] = orig - step
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]]:
    """Scalar-valued probes, one per differentiable op.  Inputs avoid kinks and domain edges."""
    from . import losses
    from . import tensor as T
    from .head import normalized_quaternion

    def away(shape, gap=0.1):
        x = rng.normal(size=shape)
        return np.where(np.abs(x) < gap, x + np.sign(x + 1e-300) * gap, x)

    pos = lambda shape: rng.uniform(0.5, 2.0, shape)  # noqa: E731
    w = rng.normal(size=(3, 4))
    fixed: dict[tuple, np.ndarray] = {}

    def weigh(t: Tensor) -> Tensor:
        # a fixed random projection per output shape turns any op into a scalar
        if t.shape not in fixed:
            fixed[t.shape] = rng.normal(size=t.shape)
        return (t * fixed[t.shape]).sum()

    angles = rng.uniform(-np.pi, np.pi, (2, 3))
    probs = rng.dirichlet(np.ones(5), size=3)
    return {
        "add": (lambda a, b: weigh(T.add(a, b)), [away((3, 4)), away((4,))]),
        "sub": (lambda a, b: weigh(T.sub(a, b)), [away((3, 1)), away((3, 4))]),
        "mul": (lambda a, b: weigh(T.mul(a, b)), [away((2, 3)), away((2, 3))]),
        "div": (lambda a, b: weigh(T.div(a, b)), [away((2, 3)), pos((2, 3))]),
        "pow": (lambda a: weigh(T.power(a, 1.7)), [pos((2, 3))]),
        "exp": (lambda a: weigh(T.exp(a)), [away((2, 3))]),
        "log": (lambda a: weigh(T.log(a)), [pos((2, 3))]),
        "tanh": (lambda a: weigh(T.tanh(a)), [away((2, 3))]),
        "sigmoid": (lambda a: weigh(T.sigmoid(a)), [away((2, 3))]),
        "relu": (lambda a: weigh(T.relu(a)), [away((2, 3))]),
        "gelu": (lambda a: weigh(T.gelu(a)), [away((2, 3))]),
        "matmul": (lambda a, b: weigh(T.matmul(a, b)), [away((2, 2, 3)), away((3, 4))]),
        "matmul_batched": (lambda a, b: weigh(T.matmul(a, b)), [away((2, 2, 3)), away((1, 3, 4))]),
        "sum": (lambda a: weigh(T.tsum(a, axis=1, keepdims=True)), [away((2, 3, 2))]),
        "mean": (lambda a: weigh(T.mean(a, axis=(0, 2))), [away((2, 3, 2))]),
        "reshape": (lambda a: weigh(T.reshape(a, (3, 4))), [away((2, 6))]),
        "transpose": (lambda a: weigh(T.transpose(a, (2, 0, 1))), [away((2, 3, 4))]),
        "getitem_basic": (lambda a: weigh(a[1:, ::2]), [away((3, 4))]),
        "getitem_advanced": (lambda a: weigh(a[np.array([0, 2, 0]), np.array([1, 1, 3])]), [away((3, 4))]),
        "concat": (lambda a, b: weigh(T.concat([a, b], axis=1)), [away((2, 2)), away((2, 3))]),
        "stack": (lambda a, b: weigh(T.stack([a, b], axis=1)), [away((2, 3)), away((2, 3))]),
        "softmax": (lambda a: weigh(T.softmax(a, axis=-1)), [away((2, 5))]),
        "log_softmax": (lambda a: weigh(T.log_softmax(a, axis=0)), [away((4, 3))]),
        "layer_norm": (lambda x, g, b: weigh(T.layer_norm(x, g, b)), [away((3, 6)), away((6,)), away((6,))]),
        "conv2d": (
            lambda x, k, b: weigh(T.conv2d(x, k, b, stride=2, padding=1)),
            [away((2, 2, 5, 5)), away((3, 2, 3, 3)), away((3,))],
        ),
        "upsample2x": (lambda a: weigh(T.upsample2x(a)), [away((1, 2, 2, 3))]),
        "rotate_pairs": (lambda a: weigh(T.rotate_pairs(a, np.cos(angles), np.sin(angles))), [away((2, 2, 6))]),
        "linear_weight": (lambda a, b: weigh(T.matmul(a, b)), [away((5, 3)), w]),
        "cross_entropy": (lambda a: losses.cross_entropy(a, np.array([1, 0, 4])), [away((3, 5))]),
        "soft_cross_entropy": (lambda a: losses.soft_cross_entropy(a, probs), [away((3, 5))]),
        "mse": (lambda a, b: losses.mse(a, b), [away((3, 2)), away((3, 2))]),
        "bce": (lambda a: losses.binary_cross_entropy(a, np.array([1.0, 0.0, 1.0])), [rng.uniform(0.2, 0.8, 3)]),
        "bce_logits": (lambda a: losses.binary_cross_entropy_with_logits(a, np.array([1.0, 0.0, 0.0])), [away(3)]),
        "quaternion_normalize": (lambda a: weigh(normalized_quaternion(a)), [away((3, 4), 0.3)]),
    }


def op_suite(seed: int, step: float = 1e-5) -> dict[str, float]:
    """Worst relative error for every differentiable op at one seed."""
    rng = np.random.default_rng(seed)
    return {name: grad_check(fn, inputs, step) for name, (fn, inputs) in _op_cases(rng).items()}


def tied_stack_check(seed: int, step: float = 1e-5, d: int = 12, heads: int = 2, layers: int = 2) -> float:
    """Full weight-tied stack run over three stages, then the combined loss; checks inputs and every parameter."""
    from .attention import AttentionStack, ContextSet, run_stage
    from .head import RegressionHead, score, total_loss

    rng = np.random.default_rng(seed)
    stack = AttentionStack(d, heads, layers, rng, position_scale=3.0)
    head = RegressionHead(d, rng)
    b, m, n, L = 2, 5, 4, 2
    ctx_pos = rng.uniform(-0.5, 0.5, (b, m, 3))
    mask = np.ones((b, m), dtype=bool)
    mask[1, -1] = False
    lang_mask = np.array([[True, True], [True, False]])
    ghost_pos = [rng.uniform(-0.5, 0.5, (b, n, 3)) for _ in range(3)]
    query_pos = [rng.uniform(-0.5, 0.5, (b, 3)) for _ in range(3)]
    targets = [rng.integers(n, size=b) for _ in range(3)]
    gt_rot = rng.normal(size=(b, 4))
    gt_rot /= np.linalg.norm(gt_rot, axis=1, keepdims=True)

    def fn(ctx_feats, lang, ghost, query):
        ctx = ContextSet(ctx_feats, ctx_pos, mask, lang, lang_mask)
        logits = []
        q = query
        for s in range(3):
            g, q = run_stage(stack, ghost * np.ones((b, n, 1)), ghost_pos[s], q, query_pos[s], ctx)
            logits.append(score(q, g))
        raw = head(q.reshape(b, d))
        loss, _ = total_loss(logits, targets, raw, gt_rot, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        return loss

    inputs = [rng.normal(size=(b, m, d)), rng.normal(size=(b, L, d)), rng.normal(size=d), rng.normal(size=(b, 1, d))]
    return grad_check(fn, inputs, step, params=stack.parameters() + head.parameters())
