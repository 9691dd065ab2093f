"""Independent reference implementations used only by the tests.

None of these import the package; they restate each quantity from its
definition in the most direct (and slowest) form available.
"""
from __future__ import annotations

import mpmath
import numpy as np


def alpha_bar_mp(T: int, beta_start: float, beta_end: float, dps: int = 40) -> list:
    """ᾱ_t for a linear β schedule as an extended-precision running product."""
    mpmath.mp.dps = dps
    out, acc = [], mpmath.mpf(1)
    lo, hi = mpmath.mpf(beta_start), mpmath.mpf(beta_end)
    for i in range(T):
        beta = lo + (hi - lo) * i / (T - 1) if T > 1 else lo
        acc *= 1 - beta
        out.append(acc)
    return out


def reverse_mean(x_t: float, eps: float, beta: float, alpha_bar: float) -> float:
    """Posterior mean of one reverse step for a scalar, written out longhand."""
    alpha = 1.0 - beta
    return (1.0 / np.sqrt(alpha)) * (x_t - (1.0 - alpha) / np.sqrt(1.0 - alpha_bar) * eps)


def hsic_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA via centred Gram matrices: HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    k = h @ (x @ x.T) @ h
    l = h @ (y @ y.T) @ h
    hsic = lambda a, b: np.trace(a @ b) / (n - 1) ** 2
    return float(hsic(k, l) / np.sqrt(hsic(k, k) * hsic(l, l)))


def central_difference(f, param, index, h: float = 1e-6) -> float:
    """(f(w + h) - f(w - h)) / 2h for one scalar entry of ``param`` (in place)."""
    flat = param.data.view(-1)
    orig = flat[index].item()
    flat[index] = orig + h
    plus = f().item()
    flat[index] = orig - h
    minus = f().item()
    flat[index] = orig
    return (plus - minus) / (2 * h)


def avg_pool_reference(act: np.ndarray, p: int) -> np.ndarray:
    """Adaptive average pooling by explicit bin boundaries (floor/ceil rule)."""
    n, c, h, w = act.shape
    out = np.zeros((n, c, p, p))
    for i in range(p):
        h0, h1 = (i * h) // p, -((-(i + 1) * h) // p)
        for j in range(p):
            w0, w1 = (j * w) // p, -((-(j + 1) * w) // p)
            out[:, :, i, j] = act[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
    return out


def layer_walk_count(model) -> int:
    """Parameter count from each layer's shape hyper-parameters, not its tensors."""
    total = 0
    for mod in model.modules():
        name = type(mod).__name__
        if name in ("Conv1d", "Conv2d"):
            k = int(np.prod(mod.kernel_size))
            total += mod.out_channels * (mod.in_channels // mod.groups) * k
            total += mod.out_channels if mod.bias is not None else 0
        elif name == "Linear":
            total += mod.in_features * mod.out_features
            total += mod.out_features if mod.bias is not None else 0
        elif name == "GroupNorm":
            total += 2 * mod.num_channels if mod.affine else 0
        elif any(True for _ in mod.parameters(recurse=False)):
            raise TypeError(f"layer_walk_count has no rule for {name}")
    return total
