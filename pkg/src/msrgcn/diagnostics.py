"""Finite-difference gradient checks for the kernels and the full model."""

from __future__ import annotations

import numpy as np

from . import ndnn
from .graphcore import NEIGHBOR_RELATIONS, build_graph
from .model import (
    GraphBatch,
    ModelConfig,
    Variant,
    _rgcn_backward,
    _rgcn_forward,
    init_params,
    loss_and_grads,
    single_batch,
)


def perturbed_params(config: ModelConfig, rng: np.random.Generator) -> dict:
    """Initial parameters with biases, offsets and gains moved off their defaults."""
    params = init_params(config, rng)
    for name, p in params.items():
        if name.endswith("ln_gain"):
            params[name] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith((".b", "ln_offset", ".b1", ".b2")):
            params[name] = rng.normal(0.0, 0.3, p.shape)
    return params


def check_full_model(
    variant: Variant = Variant.FULL,
    grid=(3, 3),
    in_dim=8,
    d1=4,
    d2=4,
    n_images=1,
    seed=0,
    tol=1e-4,
    max_coords=None,
) -> ndnn.GradReport:
    rng = np.random.default_rng(seed)
    config = ModelConfig(in_dim=in_dim, d1=d1, d2=d2, variant=variant)
    params = perturbed_params(config, rng)
    graphs = [build_graph(*grid, variant.graph_variant) for _ in range(n_images)]
    feats = [rng.normal(size=(g.n_nodes, in_dim)) for g in graphs]
    batch = GraphBatch.from_graphs(graphs, feats) if n_images > 1 else single_batch(graphs[0], feats[0])
    labels = rng.integers(0, config.n_classes, size=n_images)
    weights = rng.uniform(0.5, 2.0, config.n_classes)
    _, grads, _ = loss_and_grads(batch, labels, params, config, weights)
    return ndnn.grad_check(
        lambda p: loss_and_grads(batch, labels, p, config, weights)[0],
        params,
        grads,
        tol=tol,
        max_coords=max_coords,
    )


def check_kernels(seed=0, tol=1e-6) -> dict[str, ndnn.GradReport]:
    """Gradient checks of each dense kernel against a random linear functional."""
    rng = np.random.default_rng(seed)
    out = {}

    x = rng.normal(size=(5, 4))
    W = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    u = rng.normal(size=(5, 3))
    dx, dW, db = ndnn.linear_grad(u, x, W)
    out["linear"] = ndnn.grad_check(
        lambda p: float((ndnn.linear(p["x"], p["W"], p["b"]) * u).sum()),
        {"x": x, "W": W, "b": b},
        {"x": dx, "W": dW, "b": db},
        tol=tol,
    )

    gain = rng.uniform(0.5, 1.5, 4)
    offset = rng.normal(size=4)
    u = rng.normal(size=(5, 4))
    _, cache = ndnn.layer_norm(x, gain, offset)
    dx, dg, do = ndnn.layer_norm_grad(u, cache)
    out["layer_norm"] = ndnn.grad_check(
        lambda p: float((ndnn.layer_norm(p["x"], p["gain"], p["offset"])[0] * u).sum()),
        {"x": x, "gain": gain, "offset": offset},
        {"x": dx, "gain": dg, "offset": do},
        tol=tol,
    )

    xr = rng.uniform(0.1, 1.0, size=(5, 4)) * rng.choice([-1.0, 1.0], size=(5, 4))
    out["relu"] = ndnn.grad_check(
        lambda p: float((ndnn.relu(p["x"]) * u).sum()),
        {"x": xr},
        {"x": ndnn.relu_grad(u, xr)},
        tol=tol,
    )

    s = ndnn.softmax(x)
    out["softmax"] = ndnn.grad_check(
        lambda p: float((ndnn.softmax(p["x"]) * u).sum()),
        {"x": x},
        {"x": ndnn.softmax_grad(u, s)},
        tol=tol,
    )

    logits = rng.normal(size=(5, 6))
    labels = rng.integers(0, 6, size=5)
    cw = rng.uniform(0.5, 2.0, 6)
    _, dl = ndnn.weighted_cross_entropy(logits, labels, cw)
    out["weighted_cross_entropy"] = ndnn.grad_check(
        lambda p: ndnn.weighted_cross_entropy(p["logits"], labels, cw)[0],
        {"logits": logits},
        {"logits": dl},
        tol=tol,
    )

    g = build_graph(3, 3)
    batch = single_batch(g, np.zeros((g.n_nodes, 4)))
    agg = batch.aggregator(NEIGHBOR_RELATIONS, False, "fixed")
    H = rng.normal(size=(g.n_nodes, 4))
    W_root = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    Ws = [rng.normal(size=(3, 4)) for _ in NEIGHBOR_RELATIONS]
    u = rng.normal(size=(g.n_nodes, 3))

    def layer(p):
        return _rgcn_forward(agg, p["H"], p["W_root"], p["b"], [p[f"W{i}"] for i in range(3)])

    _, cache = layer({"H": H, "W_root": W_root, "b": b, **{f"W{i}": w for i, w in enumerate(Ws)}})
    dH, dWr, db, dWs = _rgcn_backward(agg, u, cache, W_root)
    params = {"H": H, "W_root": W_root, "b": b, **{f"W{i}": w for i, w in enumerate(Ws)}}
    analytic = {"H": dH, "W_root": dWr, "b": db, **{f"W{i}": w for i, w in enumerate(dWs)}}
    out["rgcn_layer"] = ndnn.grad_check(lambda p: float((layer(p)[0] * u).sum()), params, analytic, tol=tol)
    return out
