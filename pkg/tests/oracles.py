"""Independent numerical oracles used by the test suite.

The finite-difference checker here is the reference every analytic gradient
is compared against; it never touches the tape internals.
"""

import numpy as np

from t2l.tensor import Tensor, backward


def central_diff(f, x: np.ndarray, idx, step: float = 1e-5) -> float:
    """Central finite difference of scalar-valued f at one coordinate."""
    xp = x.copy()
    xm = x.copy()
    xp[idx] += step
    xm[idx] -= step
    return (f(xp) - f(xm)) / (2.0 * step)


def check_gradient(build_loss, leaves, n_coords=20, step=1e-5, rtol=1e-4, rng=None, floor=1e-6):
    """Compare tape gradients of ``build_loss(leaves)`` against central differences.

    ``build_loss`` maps a list of same-length numpy arrays to a scalar loss
    Tensor (rebuilding the graph from scratch each call). Coordinates are
    sampled per leaf. ``floor`` keeps the relative error meaningful where the
    gradient is below finite-difference roundoff noise. Returns the worst
    relative error seen.
    """
    rng = rng or np.random.default_rng(0)
    datas = [leaf.copy() for leaf in leaves]

    tensors = [Tensor(d, requires_grad=True) for d in datas]
    loss = build_loss(tensors)
    backward(loss)
    grads = [t.grad for t in tensors]

    worst = 0.0
    for li, data in enumerate(datas):
        if grads[li] is None:
            raise AssertionError(f"leaf {li} received no gradient")
        flat_n = data.size
        coords = rng.choice(flat_n, size=min(n_coords, flat_n), replace=False)
        for flat_idx in coords:
            idx = np.unravel_index(flat_idx, data.shape)

            def f(xnew, li=li, idx=idx):
                ds = [d.copy() for d in datas]
                ds[li] = xnew
                ts = [Tensor(d, requires_grad=True) for d in ds]
                return float(build_loss(ts).data)

            fd = central_diff(f, data, idx, step)
            an = grads[li][idx]
            denom = max(abs(fd), abs(an), floor)
            rel = abs(fd - an) / denom
            worst = max(worst, rel)
            assert rel < rtol, (
                f"gradient mismatch at leaf {li} coord {idx}: "
                f"analytic {an!r} vs finite-diff {fd!r} (rel {rel:.2e})"
            )
    return worst
