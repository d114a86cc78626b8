"""Independent oracles used across the test-suite."""
import math

import numpy as np
import torch


def fd_relative_error(fn, inputs, step=1e-4, seed=0):
    """Compare autograd against central differences of a random projection.

    ``fn`` maps the list of double tensors to one tensor; the scalar loss is
    ``sum(fn(inputs) * w)`` for fixed random ``w``.  Returns
    ``||g_autograd - g_fd|| / ||g_fd||`` over all inputs jointly.
    """
    gen = torch.Generator().manual_seed(seed)
    inputs = [t.detach().clone().double().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    w = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    loss = (out * w).sum()
    grads = torch.autograd.grad(loss, inputs)
    analytic, numeric = [], []
    with torch.no_grad():
        for t, g in zip(inputs, grads):
            flat = t.view(-1)
            fd = torch.empty_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + step
                lp = (fn(*inputs) * w).sum().item()
                flat[i] = old - step
                lm = (fn(*inputs) * w).sum().item()
                flat[i] = old
                fd[i] = (lp - lm) / (2 * step)
            analytic.append(g.reshape(-1))
            numeric.append(fd)
    a, n = torch.cat(analytic), torch.cat(numeric)
    return ((a - n).norm() / n.norm().clamp_min(1e-30)).item()


def bilinear_scalar(img, x, y):
    """Bilinear sample of a 2-D array at (x, y) with border replication."""
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    return ((1 - ax) * (1 - ay) * img[y0, x0] + ax * (1 - ay) * img[y0, x1]
            + (1 - ax) * ay * img[y1, x0] + ax * ay * img[y1, x1])


def deform_conv_bruteforce(x, base, residual, weight, bias, k, groups, modulated):
    """Loop-over-everything modulated deformable convolution (numpy)."""
    x, base, residual, weight = (np.asarray(a, dtype=np.float64) for a in (x, base, residual, weight))
    b, c, h, w = x.shape
    t = k * k
    r = k // 2
    taps = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    out = np.zeros((b, weight.shape[0], h, w))
    cg = c // groups
    for n in range(b):
        for i in range(h):
            for j in range(w):
                cols = np.zeros((c, t))
                for ch in range(c):
                    g = ch // cg
                    for ti, (dx, dy) in enumerate(taps):
                        base_idx = 2 * (g * t + ti)
                        sx = j + dx + base[n, 0, i, j] + residual[n, base_idx, i, j]
                        sy = i + dy + base[n, 1, i, j] + residual[n, base_idx + 1, i, j]
                        v = bilinear_scalar(x[n, ch], sx, sy)
                        if modulated:
                            raw = residual[n, 2 * groups * t + g * t + ti, i, j]
                            v *= 2.0 / (1.0 + math.exp(-raw))
                        cols[ch, ti] = v
                out[n, :, i, j] = weight.reshape(weight.shape[0], c * t) @ cols.reshape(-1)
                if bias is not None:
                    out[n, :, i, j] += np.asarray(bias)
    return out
