"""Central finite-difference checks of the reverse-mode gradients."""

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from vrfam import ops
from vrfam.tensor import Tensor

FINITE_DIFFERENCE_STEP = 1e-3
RELATIVE_TOLERANCE = 1e-3


@dataclass
class GradCheckResult:
    """Outcome of checking one primitive on one input shape."""

    name: str
    shapes: List[tuple]
    max_relative_error: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < RELATIVE_TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Return max |analytic - numeric| scaled by the larger of the two max norms."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    seed: int = 0,
    step: float = FINITE_DIFFERENCE_STEP,
) -> float:
    """Compare reverse-mode gradients of ``fn`` with central finite differences.

    The scalar objective is ``sum(fn(*inputs) * R)`` for a fixed random ``R``.
    All arithmetic runs in float64.

    Parameters
    ----------
    fn : Callable[..., Tensor]
        Function of one tensor per input array.
    inputs : Sequence[np.ndarray]
        Points at which gradients are checked.
    seed : int, optional
        Seed of the random projection ``R``, by default 0.
    step : float, optional
        Finite-difference step, by default 1e-3.

    Returns
    -------
    float
        Largest relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*tensors)
    projection = np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(projection)

    def objective() -> float:
        values = fn(*[Tensor(a, requires_grad=False, dtype=np.float64) for a in arrays])
        return float((values.data * projection).sum())

    worst = 0.0
    for array, tensor in zip(arrays, tensors):
        numeric = np.zeros_like(array)
        flat, flat_numeric = array.reshape(-1), numeric.reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + step
            plus = objective()
            flat[index] = original - step
            minus = objective()
            flat[index] = original
            flat_numeric[index] = (plus - minus) / (2 * step)
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(array)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    values = rng.standard_normal(shape)
    return np.sign(values) * (np.abs(values) + 0.1)


def _signed_shift(channels: int) -> np.ndarray:
    # |x_hat| <= sqrt(batch*T - 1) <= 4 for the block cases, so a gain <= 0.6 and
    # a +-3 shift keep every ReLU input at least 0.6 away from the kink
    return np.where(np.arange(channels) % 2 == 0, 3.0, -3.0)


def _probabilities_head(logits: Tensor) -> Tensor:
    labels = np.arange(logits.shape[0]) % logits.shape[1]
    return ops.probability_nll(ops.softmax(logits), labels)


def _fcn_block(x: Tensor, w: Tensor, b: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return ops.relu(ops.batchnorm1d(ops.conv1d(x, w, b), gamma, beta, training=True))


def _batchnorm_infer(rng: np.random.Generator, channels: int):
    running_mean = rng.standard_normal(channels)
    running_var = rng.uniform(0.5, 2.0, channels)

    def fn(x, gamma, beta):
        return ops.batchnorm1d(
            x, gamma, beta, training=False, running_mean=running_mean, running_var=running_var
        )

    return fn


def primitive_cases(seed: int = 0) -> Dict[str, List[tuple]]:
    """Build the gradient-check cases: name -> list of (fn, input arrays).

    Every primitive gets three random small shapes.
    """
    rng = np.random.default_rng(seed)
    normal = rng.standard_normal
    cases: Dict[str, List[tuple]] = {
        "matmul": [(ops.matmul, [normal((m, k)), normal((k, n))]) for m, k, n in [(4, 3, 2), (1, 5, 3), (3, 3, 3)]],
        "matmul_batched": [
            (ops.matmul, [normal((b, m, k)), normal((k, n))])
            for b, m, k, n in [(2, 3, 4, 2), (3, 1, 2, 2), (1, 4, 3, 5)]
        ],
        "add": [(ops.add, [normal(a), normal(b)]) for a, b in [((3, 4), (4,)), ((2, 3, 2), (2,)), ((5,), (5,))]],
        "scale": [(lambda a: ops.scale(a, 0.37), [normal(s)]) for s in [(3,), (2, 4), (2, 2, 3)]],
        "reshape": [(lambda a: ops.reshape(a, (-1,)), [normal(s)]) for s in [(2, 3), (4, 1, 2), (3, 3)]],
        "transpose": [(lambda a: ops.transpose(a, (0, 2, 1)), [normal(s)]) for s in [(2, 3, 4), (1, 2, 2), (3, 1, 5)]],
        "relu": [(ops.relu, [_away_from_zero(rng, s)]) for s in [(5,), (3, 4), (2, 3, 2)]],
        "softmax": [(ops.softmax, [normal(s)]) for s in [(2, 3), (4, 2), (2, 3, 5)]],
        "reduce_mean": [(lambda a: ops.reduce_mean(a, axis=1), [normal(s)]) for s in [(2, 3), (3, 4, 2), (1, 5)]],
        "global_avg_pool": [(ops.global_avg_pool, [normal(s)]) for s in [(2, 3, 4), (1, 1, 7), (3, 2, 5)]],
        "conv1d": [
            (ops.conv1d, [normal((b, ci, t)), normal((co, ci, k)), normal(co)])
            for b, ci, co, t, k in [(2, 3, 4, 9, 5), (1, 2, 2, 8, 8), (2, 1, 3, 6, 3)]
        ],
        "batchnorm1d_train": [
            (lambda x, g, b: ops.batchnorm1d(x, g, b, training=True), [normal((n, c, t)), normal(c), normal(c)])
            for n, c, t in [(2, 3, 4), (4, 2, 1), (1, 2, 6)]
        ],
        "batchnorm1d_infer": [
            (_batchnorm_infer(rng, c), [normal((n, c, t)), normal(c), normal(c)])
            for n, c, t in [(2, 3, 4), (1, 2, 3), (3, 1, 2)]
        ],
        "attention": [
            (ops.scaled_dot_attention, [normal((b, t, d)), normal((d, d // 4)), normal((d, d // 4)), normal((d, d))])
            for b, t, d in [(1, 4, 8), (2, 3, 4), (2, 1, 8)]
        ],
        "bce_head": [(_probabilities_head, [normal((n, 2))]) for n in (1, 4, 7)],
        "fcn_block": [
            (
                _fcn_block,
                [normal((b, ci, t)), normal((co, ci, k)), normal(co), rng.uniform(0.3, 0.6, co), _signed_shift(co)],
            )
            for b, ci, co, t, k in [(2, 3, 4, 8, 8), (2, 2, 3, 6, 5), (3, 1, 2, 5, 3)]
        ],
    }
    return cases


def run_all(seed: int = 0) -> List[GradCheckResult]:
    """Run every primitive case and return one result per (primitive, shape)."""
    results = []
    for name, cases in primitive_cases(seed).items():
        for case_index, (fn, inputs) in enumerate(cases):
            error = check_gradients(fn, inputs, seed=seed + case_index)
            results.append(GradCheckResult(name, [np.shape(a) for a in inputs], error))
    return results
