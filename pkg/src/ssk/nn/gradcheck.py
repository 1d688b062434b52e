"""Central finite-difference gradient checking."""

from collections.abc import Callable, Sequence

import numpy as np

from ssk.nn.autograd import Tape, Tensor

GradOp = Callable[[Tape, Sequence[Tensor]], Tensor]


def _evaluate(op: GradOp, inputs: Sequence[np.ndarray], training: bool) -> float:
    tape = Tape(training=training, grad=False)
    out = op(tape, [tape.constant(x) for x in inputs])
    return float(np.sum(out.value))


def finite_difference_check(
    op: GradOp,
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    floor: float = 1e-3,
    training: bool = True,
) -> float:
    """
    Compare tape gradients of ``sum(op(inputs))`` against central differences.

    Args:
        op: Callable building the op on a tape from one leaf per input
        inputs: Float arrays; each element is perturbed by ±step
        step: Finite-difference step
        floor: Lower bound on the denominator of the relative error
        training: Tape mode used for every evaluation

    Returns:
        Maximum over all input elements of |analytic - numeric| / max(|analytic|, |numeric|, floor)
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    tape = Tape(training=training)
    leaves = [tape.variable(x) for x in inputs]
    out = op(tape, leaves)
    total = out.sum() if out.value.size != 1 else out.reshape()
    tape.backward(total)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves]
    tape.free()

    worst = 0.0
    for i, x in enumerate(inputs):
        for j in np.ndindex(x.shape):
            original = x[j]
            x[j] = original + step
            f_plus = _evaluate(op, inputs, training)
            x[j] = original - step
            f_minus = _evaluate(op, inputs, training)
            x[j] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[i][j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
