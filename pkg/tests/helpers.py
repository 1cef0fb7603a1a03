"""Independent oracles for the test suite.

Everything here recomputes expectations from first principles (finite
differences of forward evaluations, brute-force enumeration, closed forms)
and never calls the gradient/attack paths it is used to check.
"""

import torch

from atlab import data, models


def fd_param_gradient(loss_of_vec, vec, h=1e-5):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    g = torch.zeros_like(vec)
    for i in range(vec.numel()):
        up, dn = vec.clone(), vec.clone()
        up[i] += h
        dn[i] -= h
        g[i] = (loss_of_vec(up) - loss_of_vec(dn)) / (2.0 * h)
    return g


def fd_input_gradient(loss_of_x, x, h=1e-6):
    """Central finite-difference gradient w.r.t. a (possibly batched) input tensor."""
    flat = x.reshape(-1)
    g = torch.zeros_like(flat)
    for i in range(flat.numel()):
        up, dn = flat.clone(), flat.clone()
        up[i] += h
        dn[i] -= h
        g[i] = (loss_of_x(up.reshape(x.shape)) - loss_of_x(dn.reshape(x.shape))) / (2.0 * h)
    return g.reshape(x.shape)


def fd_dense_hessian(loss_of_x, x, h=1e-3):
    """Dense Hessian from second central differences of the scalar loss."""
    d = x.numel()
    H = torch.zeros((d, d), dtype=torch.float64)
    flat = x.reshape(-1)
    for i in range(d):
        for j in range(i, d):
            pp, pm, mp, mm = (flat.clone() for _ in range(4))
            pp[i] += h; pp[j] += h
            pm[i] += h; pm[j] -= h
            mp[i] -= h; mp[j] += h
            mm[i] -= h; mm[j] -= h
            val = (loss_of_x(pp.reshape(x.shape)) - loss_of_x(pm.reshape(x.shape))
                   - loss_of_x(mp.reshape(x.shape)) + loss_of_x(mm.reshape(x.shape))) / (4 * h * h)
            H[i, j] = H[j, i] = val
    return H


def brute_force_kendall(a, b):
    """Tie-corrected tau-b by O(n^2) pair counting (vectorized over all pairs),
    sharing only the final division with the fast implementation."""
    import math

    import numpy as np

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = len(a)
    sa = np.sign(a[:, None] - a[None, :])
    sb = np.sign(b[:, None] - b[None, :])
    upper = np.triu_indices(n, k=1)
    prod = (sa[upper] * sb[upper]).astype(np.int64)
    concordant_minus_discordant = int(prod.sum())
    ties_a = int((sa[upper] == 0).sum())
    ties_b = int((sb[upper] == 0).sum())
    n0 = n * (n - 1) // 2
    denom_a, denom_b = n0 - ties_a, n0 - ties_b
    if denom_a == 0 or denom_b == 0:
        return float("nan")
    return concordant_minus_discordant / math.sqrt(denom_a * denom_b)


def linear_softmax_input_grad(W, b, x, y):
    """Closed form: grad_x CE = W^T (p - onehot(y)) for a linear-softmax model."""
    z = W @ x + b
    z = z - z.max()
    p = torch.exp(z) / torch.exp(z).sum()
    onehot = torch.zeros_like(p)
    onehot[y] = 1.0
    return W.t() @ (p - onehot)


def linear_softmax_input_hessian(W, b, x):
    """Closed form: Hessian_x CE = W^T (diag(p) - p p^T) W."""
    z = W @ x + b
    z = z - z.max()
    p = torch.exp(z) / torch.exp(z).sum()
    return W.t() @ (torch.diag(p) - torch.outer(p, p)) @ W


def relu_kink_margin(params, x):
    """Smallest |pre-activation| of an MLP at input x.

    Finite-difference Hessian stencils are only valid where the activation
    pattern is locally constant; samples with a small margin straddle a ReLU
    kink and must be excluded from curvature comparisons.
    """
    named = params.named()
    h = x.reshape(-1)
    margin = float("inf")
    for i in range(len(params.arch.widths)):
        pre = named[f"hidden{i}.weight"] @ h + named[f"hidden{i}.bias"]
        margin = min(margin, pre.abs().min().item())
        h = torch.relu(pre)
    return margin


def least_squares_accuracy(dataset):
    """Accuracy of a closed-form linear classifier (one-hot least squares)."""
    X = dataset.inputs.reshape(len(dataset), -1)
    X1 = torch.cat([X, torch.ones(len(dataset), 1, dtype=X.dtype)], dim=1)
    T = torch.zeros((len(dataset), dataset.class_count), dtype=X.dtype)
    T[torch.arange(len(dataset)), dataset.labels] = 1.0
    sol = torch.linalg.lstsq(X1, T).solution
    pred = (X1 @ sol).argmax(dim=1)
    return (pred == dataset.labels).double().mean().item()


def image_dataset(class_count=3, per_class=20, shape=(4, 4, 3), sigma=0.25,
                  separation=0.7, seed=0, split_tag="train"):
    dim = shape[0] * shape[1] * shape[2]
    return data.make_synthetic(class_count, per_class, dim, separation, seed=seed,
                               sigma=sigma, image_shape=shape, split_tag=split_tag)


def tiny_model(family, class_count=3, input_shape=(6,), widths=(), init_seed=0):
    return models.init_model(models.ArchSpec(family, class_count, input_shape,
                                             widths=widths, init_seed=init_seed))
