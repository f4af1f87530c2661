"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

from ghostcl.autodiff import Tensor, parameter


def numeric_grad(fn, arrays, step=1e-5):
    """d fn / d arrays[k] for every k, by central differences on float copies."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + step
            plus = fn(*arrays)
            a[idx] = orig - step
            minus = fn(*arrays)
            a[idx] = orig
            g[idx] = (plus - minus) / (2 * step)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    params = [parameter(a) for a in arrays]
    out = build(*params)
    out.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def max_rel_error(build, arrays, step=1e-5):
    def value(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    num = numeric_grad(value, arrays, step)
    ana = analytic_grad(build, arrays)
    worst = 0.0
    for n, a in zip(num, ana):
        scale = max(np.abs(n).max(), np.abs(a).max(), 1e-8)
        worst = max(worst, float(np.abs(n - a).max() / scale))
    return worst
