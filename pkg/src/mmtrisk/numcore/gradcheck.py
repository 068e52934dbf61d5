"""Central finite-difference check of analytic gradients."""

import math

import numpy as np

from .tensor import Tensor, backward, no_grad


class NonFiniteError(ArithmeticError):
    """A non-finite value showed up while checking gradients."""


def _value(out):
    return out.item() if isinstance(out, Tensor) else float(out)


def finite_diff_check(f, params, step=1e-5):
    """Max relative error between backprop and central differences.

    ``f`` takes no arguments, reads the current values of ``params`` and
    returns a scalar (Tensor or float). Error per coordinate is
    ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.grad = None
    out = f()
    if isinstance(out, Tensor) and out.requires_grad:
        backward(out)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for pi, (p, a) in enumerate(zip(params, analytic)):
            flat = p.data.reshape(-1)
            ga = a.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                fp = _value(f())
                flat[j] = orig - step
                fm = _value(f())
                flat[j] = orig
                num = (fp - fm) / (2.0 * step)
                if not (math.isfinite(num) and math.isfinite(ga[j])):
                    raise NonFiniteError(
                        f"non-finite gradient at parameter {pi}, coordinate {j}: "
                        f"analytic={ga[j]}, numeric={num}"
                    )
                err = abs(ga[j] - num) / max(1e-12, abs(ga[j]) + abs(num))
                worst = max(worst, err)
    return worst
