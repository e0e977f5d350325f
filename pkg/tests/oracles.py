"""Naive reference implementations used as test oracles."""

import numpy as np


def sq_dist(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def brute_fps(points, n_anchors):
    """Recompute every point's min distance to the chosen set from scratch each step."""
    pts = np.asarray(points, dtype=np.float64)
    d0 = sq_dist(pts, pts.mean(axis=0))
    chosen = [int(np.flatnonzero(d0 == d0.max())[0])]
    while len(chosen) < n_anchors:
        min_d = np.stack([sq_dist(pts, pts[j]) for j in chosen]).min(axis=0)
        chosen.append(int(np.flatnonzero(min_d == min_d.max())[0]))
    return np.array(chosen)


def brute_knn(points, anchor, k):
    """Full sort of (distance, index) pairs."""
    pts = np.asarray(points, dtype=np.float64)
    keyed = sorted((float(sq_dist(p, pts[anchor])), i) for i, p in enumerate(pts))
    return np.array([i for _, i in keyed[:k]])


def check_gradients(f, named, tolerance):
    """Run grad_check over ``named`` with key-projection biases set aside.

    Softmax is unchanged by adding the same amount to every score of a query,
    so a key bias never receives gradient. Its exact derivative is zero,
    which the relative metric cannot resolve below finite-difference noise;
    those coordinates are instead required to vanish in absolute terms.
    """
    from pointy.numerics import backward, grad_check, zero_grads

    structural = {k: v for k, v in named.items() if k.endswith("k.bias")}
    regular = {k: v for k, v in named.items() if k not in structural}
    report = grad_check(f, regular, step=1e-5)
    assert report.max_rel_err <= tolerance, report
    if structural:
        zero_grads(named.values())
        backward(f())
        for name, p in structural.items():
            assert np.abs(p.grad).max() <= 1e-12, name
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + 1e-5
                up = float(f().data)
                flat[i] = orig - 1e-5
                down = float(f().data)
                flat[i] = orig
                assert abs(up - down) / 2e-5 <= 1e-9, name
        zero_grads(named.values())
    return report


def primitive_gradient_cases():
    """name -> (objective, named parameters) for every differentiable primitive.

    Inputs are 64-bit and built away from ReLU kinks and max ties.
    """
    from pointy.numerics import (
        LayerNormLayer, LinearLayer, Tensor, cross_entropy, gelu, layer_norm, linear_forward,
        make_rng, matmul, max_, relu, softmax, sum_,
    )

    def leaf(x):
        return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)

    rng = make_rng(5)
    x = leaf(rng.normal(size=(3, 6)))
    w = rng.normal(size=(3, 6))
    ln = LayerNormLayer(leaf(rng.normal(size=6)), leaf(rng.normal(size=6)), 1e-5)
    lin = LinearLayer(leaf(rng.normal(size=(4, 6))), leaf(rng.normal(size=4)))
    labels = np.array([0, 3, 1])
    relu_in = leaf(np.where(np.abs(w) < 0.1, 0.5, w))  # away from the kink
    maxin = leaf(rng.permutation(18).reshape(3, 6) * 0.3 + rng.uniform(0, 0.01, size=(3, 6)))
    return {
        "gelu": (lambda: sum_(gelu(x) * Tensor(w)), {"x": x}),
        "relu": (lambda: sum_(relu(relu_in) * Tensor(w)), {"x": relu_in}),
        "softmax": (lambda: sum_(softmax(x, axis=1) * Tensor(w)), {"x": x}),
        "layer_norm": (lambda: sum_(layer_norm(x, ln) * Tensor(w)), {"x": x, "gamma": ln.gamma, "beta": ln.beta}),
        "linear": (lambda: sum_(gelu(linear_forward(x, lin))), {"x": x, "W": lin.weight, "b": lin.bias}),
        "cross_entropy": (lambda: cross_entropy(linear_forward(x, lin), labels), {"x": x, "W": lin.weight}),
        "max": (lambda: sum_(max_(maxin, axis=1) * Tensor(w[:, 0])), {"x": maxin}),
        "matmul": (lambda: sum_(matmul(x, Tensor(w.T)) * Tensor(w[:, :3])), {"x": x}),
    }
