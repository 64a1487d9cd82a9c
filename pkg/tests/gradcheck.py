"""Central finite differences, kept independent of autograd."""
import numpy as np
import torch


def numeric_grad(f, tensors, h=1e-3):
    """d f() / d t for each tensor in ``tensors`` by central differences (f64)."""
    grads = []
    for t in tensors:
        g = np.zeros(t.shape)
        flat = t.data.view(-1)
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + h
            with torch.no_grad():
                up = float(f())
            flat[i] = old - h
            with torch.no_grad():
                down = float(f())
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(f, tensors):
    for t in tensors:
        t.grad = None
    f().backward()
    return [t.grad.detach().numpy().copy() for t in tensors]


def max_rel_error(f, tensors, h=1e-3):
    num = numeric_grad(f, tensors, h)
    ana = analytic_grad(f, tensors)
    worst = 0.0
    for a, n in zip(ana, num):
        scale = max(np.abs(n).max(), 1e-8)
        worst = max(worst, np.abs(a - n).max() / scale)
    return worst


def leaf(*shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return (scale * torch.randn(*shape, generator=g, dtype=torch.float64)).requires_grad_(True)
