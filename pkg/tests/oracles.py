"""Independent reference implementations used by the tests.

Everything here is written with plain loops or closed forms and shares no
code with the package, so agreement is evidence of correctness.
"""
import math

import numpy as np


def conv2d_loop(x, k, stride=1, pad=0):
    n, c, h, w = x.shape
    o, c2, kh, kw = k.shape
    assert c == c2
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[b, ic, i * stride + u, j * stride + v] * k[oc, ic, u, v]
                    out[b, oc, i, j] = s
    return out


def linear_loop(x, w, b):
    n, d = x.shape
    m = w.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = b[j] + sum(x[i, t] * w[t, j] for t in range(d))
    return out


def numeric_grad(f, arr, index, h=1e-5):
    """Central difference of scalar f() with respect to arr[index] (arr modified in place)."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def gradcheck(build_loss, arrays, h=1e-5, max_points=None, rng=None):
    """Worst relative error between taped gradients and central differences.

    ``build_loss(arrays)`` must return (loss Tensor, list of leaf Tensors
    aligned with ``arrays``); the leaves must wrap the arrays without copying
    so that finite differences can poke them.
    """
    from taconv.tensor import backward, no_grad

    loss, leaves = build_loss(arrays)
    backward(loss)
    analytic = [lf.grad.copy() for lf in leaves]

    def value():
        with no_grad():
            return build_loss(arrays)[0].item()

    worst = 0.0
    for arr, g in zip(arrays, analytic):
        idx = list(np.ndindex(arr.shape))
        if max_points is not None and len(idx) > max_points:
            rng = rng or np.random.default_rng(0)
            idx = [idx[i] for i in rng.choice(len(idx), max_points, replace=False)]
        num = np.array([numeric_grad(value, arr, i, h) for i in idx])
        ana = np.array([g[i] for i in idx])
        worst = max(worst, rel_err(ana, num, floor=1e-6))
    return worst


def hermite_series(n, x):
    """Physicists' Hermite polynomial from the explicit sum."""
    return math.factorial(n) * sum((-1) ** m * (2 * x) ** (n - 2 * m) / (math.factorial(m) * math.factorial(n - 2 * m))
                                   for m in range(n // 2 + 1))


def rank_elimination(a, tol=1e-10):
    """Matrix rank by Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=np.float64)
    rows, cols = a.shape
    scale = np.max(np.abs(a)) or 1.0
    r = 0
    for c in range(cols):
        if r == rows:
            break
        p = r + int(np.argmax(np.abs(a[r:, c])))
        if abs(a[p, c]) <= tol * scale:
            continue
        a[[r, p]] = a[[p, r]]
        for i in range(r + 1, rows):
            a[i] -= a[i, c] / a[r, c] * a[r]
        r += 1
    return r


def bilinear_loop(img, rows, cols):
    """Zero-padded bilinear sample of a 2-D image at fractional (row, col) positions."""
    h, w = img.shape
    out = np.zeros(np.shape(rows))
    for idx in np.ndindex(np.shape(rows)):
        r, c = rows[idx], cols[idx]
        r0, c0 = math.floor(r), math.floor(c)
        acc = 0.0
        for dr in (0, 1):
            for dc in (0, 1):
                rr, cc = r0 + dr, c0 + dc
                wgt = (1 - abs(r - rr)) * (1 - abs(c - cc))
                if 0 <= rr < h and 0 <= cc < w:
                    acc += wgt * img[rr, cc]
        out[idx] = acc
    return out


def fgsm(model, images, labels, eps):
    """One signed-gradient step clipped to [0, 1], written without the attack code."""
    from taconv.tensor import Tensor, backward, softmax_cross_entropy

    x = Tensor(np.array(images, dtype=np.float64), requires_grad=True)
    saved = [(p, p.requires_grad) for p in model.parameters()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        backward(softmax_cross_entropy(model(x), labels))
    finally:
        for p, f in saved:
            p.requires_grad = f
    return np.clip(images + eps * np.sign(x.grad), 0.0, 1.0)


def blur_semigroup_error(blur, img, s1, s2):
    """Relative L2 gap between blur(blur(img, s1), s2) and blur(img, sqrt(s1^2 + s2^2))."""
    two = blur(blur(img, s1), s2)
    one = blur(img, math.hypot(s1, s2))
    return float(np.linalg.norm(two - one) / np.linalg.norm(one))
