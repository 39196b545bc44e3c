"""Independent oracles shared by the test modules."""

import itertools

import numpy as np


def numeric_grad(f, x, h=1e-2, pattern=None):
    """Central finite differences of scalar ``f`` w.r.t. every element of ``x``.

    ``x`` is perturbed in place and restored.  When ``pattern`` is given it
    must return the piecewise-linear regime of the last ``f`` call (ReLU
    masks, pool winners); elements whose regime changes within ``+-h`` are
    not differentiable over the stencil and come back as NaN.
    """
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    if pattern is not None:
        f()
        base = pattern()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f())
        kink = pattern is not None and not np.array_equal(pattern(), base)
        flat[i] = old - h
        fm = float(f())
        kink = kink or (pattern is not None and not np.array_equal(pattern(), base))
        flat[i] = old
        g.reshape(-1)[i] = np.nan if kink else (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """Max absolute deviation relative to the larger gradient magnitude.

    NaN entries of ``numeric`` (kink crossings) are skipped when comparing
    but the scale still comes from the whole analytic tensor.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    ok = ~np.isnan(n)
    scale = max(np.abs(a).max(initial=0), np.abs(n[ok]).max(initial=0), 1e-12)
    return float(np.abs(a[ok] - n[ok]).max(initial=0) / scale)


def regime(model):
    """ReLU masks and pool winners cached by the last train-mode forward."""
    from microcnn.layers import Conv2D, Dense, MaxPool2D

    parts = []
    for layer in model.layers:
        if isinstance(layer, (Conv2D, Dense)) and layer.activation == "relu":
            parts.append((layer._cache[-1] > 0).ravel().astype(np.intp))
        elif isinstance(layer, MaxPool2D):
            parts.append(layer._cache[1].ravel().astype(np.intp))
    return np.concatenate(parts) if parts else np.zeros(0, np.intp)


def naive_conv2d(x, w, b, stride):
    """Direct quadruple loop over the convolution definition, in float64."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    y = np.zeros((n, ho, wo, cout))
    for s, i, j, co in itertools.product(range(n), range(ho), range(wo), range(cout)):
        acc = float(b[co])
        for a, c, ci in itertools.product(range(kh), range(kw), range(cin)):
            acc += float(x[s, i * stride + a, j * stride + c, ci]) * float(w[a, c, ci, co])
        y[s, i, j, co] = acc
    return y


def naive_maxpool(x, size):
    """Window scan returning maxima and the first row-major argmax."""
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    y = np.zeros((n, ho, wo, c), dtype=x.dtype)
    idx = np.zeros((n, ho, wo, c), dtype=np.intp)
    for s, i, j, ch in itertools.product(range(n), range(ho), range(wo), range(c)):
        best, arg = None, 0
        for k in range(size * size):
            a, bb = divmod(k, size)
            v = x[s, i * size + a, j * size + bb, ch]
            if best is None or v > best:
                best, arg = v, k
        y[s, i, j, ch] = best
        idx[s, i, j, ch] = arg
    return y, idx


def splitmix64_scalar(seed, n):
    """Reference SplitMix64 with Python integers."""
    mask = (1 << 64) - 1
    state = seed & mask
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def adam_scalar(p, grads, alpha=0.001, beta1=0.9, beta2=0.999, eps=1e-7):
    """Adam recurrence on one Python float."""
    m = v = 0.0
    traj = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p = p - alpha * m_hat / (v_hat ** 0.5 + eps)
        traj.append(p)
    return traj


def separable_images(n=200, seed=11, size=64):
    """Alternating dark (0-100) and bright (155-255) noise images, labels 0/1."""
    from microcnn.data import LabeledImage
    from microcnn.tensor import Rng

    r = Rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        lo = 0 if label == 0 else 155
        px = np.floor(r.uniform((size, size, 3), lo, lo + 101)).astype(np.uint8)
        out.append(LabeledImage(px, label, f"{label}/{i}.png"))
    return out


def write_dataset(root, images, names=("bright", "dark")):
    """Store ``images`` as PNGs under ``root/<names[label]>/``."""
    from PIL import Image

    for i, im in enumerate(images):
        d = root / names[im.label]
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(im.pixels).save(d / f"{i:04d}.png", format="PNG")
    return root


# one line per acceptance criterion, printed in the terminal summary (see conftest.py)
ACCEPTANCE_LINES = []
