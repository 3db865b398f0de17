"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

from jigsaw.tensor import Tensor, backward


def numeric_grad(fn, arrays, h=1e-5, coords=None, rng=None):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. each array.

    ``coords`` limits the check to that many random coordinates per array.
    Returns list of (flat_indices, numeric_values).
    """
    rng = rng or np.random.default_rng(0)
    out = []
    for a in arrays:
        flat = a.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and flat.size > coords:
            idx = rng.choice(flat.size, coords, replace=False)
        vals = np.empty(idx.size)
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = fn(*arrays)
            flat[i] = old - h
            fm = fn(*arrays)
            flat[i] = old
            vals[n] = (fp - fm) / (2 * h)
        out.append((idx, vals))
    return out


def check_grad(build, arrays, rtol=1e-4, atol=1e-8, h=1e-5, coords=None):
    """Compare tape gradients of ``build(*tensors) -> scalar Tensor`` to central differences.

    Returns the worst relative error seen.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    backward(loss)
    analytic = [t.grad.reshape(-1) for t in tensors]

    def scalar(*arrs):
        return build(*[Tensor(x) for x in arrs]).item()

    work = [a.copy() for a in arrays]
    worst = 0.0
    for (idx, num), ana in zip(numeric_grad(scalar, work, h=h, coords=coords), analytic):
        a = ana[idx]
        err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), atol / rtol)
        worst = max(worst, float(err.max(initial=0.0)))
        np.testing.assert_allclose(a, num, rtol=rtol, atol=atol)
    return worst
