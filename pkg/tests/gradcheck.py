"""Central finite-difference oracle for gradient checks.

Everything here runs on float64 graphs so the oracle itself is trustworthy;
truncation error at step 1e-3 is ~1e-6 relative, well under the tolerances.
"""

import numpy as np

from convcap.tensor import Tensor


def rand_tensor(rng, shape, requires_grad=True, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=requires_grad, dtype=np.float64)


def fd_gradient(f, leaf: Tensor, h=1e-3):
    """Central differences of scalar f() with respect to every leaf element."""
    g = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return g


def max_rel_err(a, b):
    """Elementwise |a-b| / max(|a|, |b|, 1), maxed over the array."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float((np.abs(a - b) / denom).max())


def check_gradients(build_loss, leaves, tol=1e-4, h=1e-3):
    """Assert autodiff grads of build_loss() match finite differences.

    build_loss must construct a fresh graph from the given leaf tensors on
    every call and return the scalar loss Tensor.
    """
    loss = build_loss()
    for leaf in leaves:
        leaf.zero_grad()
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        assert leaf.grad is not None, "leaf did not receive a gradient"
        fd = fd_gradient(lambda: float(build_loss().data), leaf, h=h)
        err = max_rel_err(leaf.grad, fd)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return worst
