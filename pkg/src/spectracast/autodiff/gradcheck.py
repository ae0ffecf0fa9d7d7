"""Central finite-difference check of reverse-mode gradients."""
import numpy as np

from ..errors import ContractError, NumericError
from .tensor import Tensor, no_grad


def grad_check(f, inputs, h=1e-5, max_coords=None, seed=0):
    """Return the max relative error between backward() and central differences.

    ``f(*inputs)`` must return a scalar tensor. Every input must be float64.
    The error at coordinate i is ``|analytic - numeric| / max(1, |numeric|)``
    with ``numeric = (f(x + h e_i) - f(x - h e_i)) / 2h``. When ``max_coords``
    is set, at most that many coordinates per input are sampled (seeded).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 inputs, got {t.dtype}")
        t.requires_grad = True
        t.grad = None

    loss = f(*inputs)
    if loss.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*inputs).data)
                flat[i] = orig - h
                fm = float(f(*inputs).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"non-finite function value while perturbing coordinate {i}")
                numeric = (fp - fm) / (2.0 * h)
                err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
