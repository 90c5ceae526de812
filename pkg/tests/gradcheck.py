"""Finite-difference checks: every differentiable op, and the joint loss of a small multi-task network."""

import numpy as np

from mtlseg import loss as L
from mtlseg import network as N
from mtlseg import tensor as T
from mtlseg.tensor import Tensor

H = 1e-5


def op_cases(seed):
    """``(name, loss_fn, params)`` for each op, projected onto a random direction."""
    rng = np.random.default_rng(seed)
    leaf = lambda a: Tensor(a, requires_grad=True)
    x = leaf(rng.normal(size=(3, 4)))
    pos = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
    # entries kept away from relu / abs / clip switch points
    away = leaf(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.2, 2.0, size=(3, 4)))
    w = rng.normal(size=(3, 4))
    proj = lambda t, v: T.reduce_sum(T.mul(t, v))
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(3,)))
    xl, W, bias = leaf(rng.normal(size=(2, 5))), leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=3))
    xc, wc, bc = leaf(rng.normal(size=(2, 2, 6, 6))), leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=3))
    pc = rng.normal(size=(2, 3, 6, 6))
    # distinct values keep the pooling argmax away from ties under perturbation
    xp, pw = leaf(rng.permutation(2 * 8 * 8).reshape(2, 8, 8) * 0.1), rng.normal(size=(2, 4, 4))
    xt, wt, bt = leaf(rng.normal(size=(2, 3, 3))), leaf(rng.normal(size=(2, 4, 2, 2))), leaf(rng.normal(size=4))
    tw = rng.normal(size=(4, 6, 6))
    c1, c2, cw = leaf(rng.normal(size=(1, 3, 3))), leaf(rng.normal(size=(2, 3, 3))), rng.normal(size=(3, 3, 3))
    return [
        ("exp", lambda: proj(T.exp(x), w), [x]),
        ("log", lambda: proj(T.log(pos), w), [pos]),
        ("abs", lambda: proj(T.abs_(away), w), [away]),
        ("relu", lambda: proj(T.relu(away), w), [away]),
        ("sigmoid", lambda: proj(T.sigmoid(x), w), [x]),
        ("softplus", lambda: proj(T.softplus(x), w), [x]),
        ("clip", lambda: proj(T.clip(T.mul(away, 0.5), -0.6, 0.6), w), [away]),
        ("neg", lambda: proj(T.neg(x), w), [x]),
        ("mean", lambda: T.reduce_mean(T.mul(x, x)), [x]),
        ("reshape", lambda: proj(T.reshape(x, (4, 3)), w.reshape(4, 3)), [x]),
        ("add/sub/mul", lambda: T.reduce_sum(T.mul(T.add(a, b), T.sub(a, b))), [a, b]),
        ("linear", lambda: T.reduce_sum(T.sigmoid(T.linear(xl, W, bias))), [xl, W, bias]),
        ("conv2d", lambda: proj(T.conv2d(xc, wc, bc, padding=1), pc), [xc, wc, bc]),
        ("max_pool2d", lambda: proj(T.max_pool2d(xp, 2)[0], pw), [xp]),
        ("transposed_conv2d", lambda: proj(T.transposed_conv2d(xt, wt, bt), tw), [xt, wt, bt]),
        ("concat_channels", lambda: proj(T.concat_channels(c1, c2), cw), [c1, c2]),
    ]


def op_rel_err(fn, params):
    for p in params:
        p.grad = None
    T.backward(fn())
    analytic = [p.grad.copy() for p in params]
    numeric = T.finite_diff_grad(lambda: fn().item(), params, H)
    return max(rel_err(a, n, 1e-8) for a, n in zip(analytic, numeric))


def toy_problem(seed, size=16, depth=2, base=2, batch=2):
    cfg = N.NetConfig(input_size=size, depth=depth, base_channels=base, seed=seed, area_scale_mm2=1.0)
    net = N.build(cfg)
    rng = np.random.default_rng(seed + 1000)
    # move the learned log-uncertainties off zero so both exp terms are exercised
    net.s1.data = rng.normal(size=1) * 0.5
    net.s2.data = rng.normal(size=1) * 0.5
    images = rng.normal(size=(batch, 1, size, size))
    masks = (rng.random((batch, 1, size, size)) < 0.4).astype(float)
    areas = rng.uniform(1.0, 5.0, size=batch)
    return net, images, masks, areas


def joint_loss_fn(net, images, masks, areas, form="precision", logits=True):
    def f():
        if logits:
            seg, area = net.forward_logits(images)
            l2 = L.ce_loss_logits(seg, masks)
        else:
            seg, area = net.forward_batch(images)
            l2 = L.ce_loss(seg, masks)
        l1 = L.mad_loss(area, areas)
        return L.joint_loss(l1, l2, L.LossState(net.s1, net.s2, form)).total_tensor
    return f


def rel_err(a, n, floor=1e-6):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


class GradReport:
    def __init__(self):
        self.worst = 0.0  # over coordinates where f is differentiable within +-H
        self.kinks = 0  # coordinates whose +-H window straddles a relu / max-pool switch
        self.checked = 0

    def __repr__(self):
        return f"GradReport(worst={self.worst:.3g}, kinks={self.kinks}, checked={self.checked})"


def check_network(net, f, coords_per_param=None, seed=0, tol=1e-4) -> GradReport:
    """Backward vs central differences for the parameters of ``net``.

    With ``coords_per_param`` only that many randomly chosen entries of each
    parameter tensor are perturbed (every tensor is still covered). A
    coordinate that misses the central estimate is counted as a kink only if
    its two one-sided differences disagree with each other and backward
    equals one of them (within ``10 * tol``, as a one-sided difference
    carries O(h) truncation error); anything else is recorded as an error.
    """
    net.zero_grad()
    T.backward(f())
    rng = np.random.default_rng(seed)
    rep = GradReport()
    f0 = f().item()
    for name, p in net.named_parameters():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        n = flat.size if coords_per_param is None else min(coords_per_param, flat.size)
        for i in rng.choice(flat.size, size=n, replace=False):
            old = flat[i]
            flat[i] = old + H
            up = f().item()
            flat[i] = old - H
            down = f().item()
            flat[i] = old
            rep.checked += 1
            central = (up - down) / (2 * H)
            err = rel_err(grad[i], central)
            if err < tol:
                rep.worst = max(rep.worst, err)
                continue
            right, left = (up - f0) / H, (f0 - down) / H
            if rel_err(right, left) > tol and min(rel_err(grad[i], right), rel_err(grad[i], left)) < 10 * tol:
                rep.kinks += 1
            else:
                rep.worst = max(rep.worst, err)
    return rep
