"""Shared test utilities: finite differences and gradient projections."""

import numpy as np

from flowzip import autodiff as ad


def round_half_away_ref(x):
    # independent reference for the tie rule (ties away from zero)
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


def proj_loss(out: ad.Node, proj: np.ndarray) -> ad.Node:
    return ad.nsum(ad.mul(out, proj))


def check_gradient(build, params: dict, wrt: str, h: float = 1e-6, rtol: float = 1e-3,
                   atol: float = 1e-8):
    """Compare the tape gradient of a scalar loss against central differences.

    build(nodes) must return a scalar Node; params maps names to arrays.
    """
    nodes = {k: ad.Node(v, requires_grad=True) for k, v in params.items()}
    loss = build(nodes)
    ad.backward(loss)
    grad = nodes[wrt].grad
    assert grad is not None, f"no gradient reached {wrt}"

    base = params[wrt].astype(np.float64)
    num = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        for sign in (+1, -1):
            shifted = dict(params)
            pert = base.copy()
            pert[idx] += sign * h
            shifted[wrt] = pert
            snodes = {k: ad.Node(v) for k, v in shifted.items()}
            num[idx] += sign * float(build(snodes).value)
        num[idx] /= 2 * h
        it.iternext()
    err = np.abs(grad - num)
    scale = np.maximum(np.abs(num), atol / rtol)
    assert np.all(err <= rtol * scale + atol), (
        f"gradient mismatch for {wrt}: max rel err "
        f"{np.max(err / scale):.2e}"
    )
    return grad, num
