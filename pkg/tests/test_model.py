import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import rgcn_loop

from msrgcn import ndnn
from msrgcn.diagnostics import check_full_model, perturbed_params
from msrgcn.graphcore import (
    NEIGHBOR_RELATIONS,
    SCALE_RELATIONS,
    GraphVariant,
    NodeRef,
    Relation,
    Scale,
    build_graph,
)
from msrgcn.model import (
    ALL_VARIANTS,
    AttentionHeatmap,
    GraphBatch,
    ModelConfig,
    Variant,
    backward,
    forward,
    heatmap,
    init_params,
    layer_plan,
    rgcn_layer,
    scale_features,
    single_batch,
)


def setup(variant=Variant.FULL, rows=3, cols=3, in_dim=8, seed=0, d1=4, d2=4):
    rng = np.random.default_rng(seed)
    config = ModelConfig(in_dim=in_dim, d1=d1, d2=d2, attention_dim=8, hidden_dim=8, variant=variant)
    g = build_graph(rows, cols, variant.graph_variant)
    x = rng.normal(size=(g.n_nodes, in_dim))
    return config, g, x, perturbed_params(config, rng)


def test_rgcn_hand_example():
    g = build_graph(1, 2)
    H = np.zeros((g.n_nodes, 2))
    H[g.node_index(NodeRef(Scale.S5, 0, 0))] = [1.0, 0.0]
    H[g.node_index(NodeRef(Scale.S5, 0, 1))] = [0.0, 1.0]
    W_rel = {r: 2 * np.eye(2) for r in NEIGHBOR_RELATIONS}
    out = rgcn_layer(g, H, np.eye(2), np.array([0.5, 0.5]), W_rel)
    np.testing.assert_allclose(out[0], [1.5, 0.5 + 2.0 / 3.0], atol=1e-12)


ORACLE_CASES = [
    (gv, group)
    for gv in (GraphVariant.full(), GraphVariant.global_edges(), GraphVariant.no_scale_edges())
    for group in ("n", "s")
] + [(GraphVariant.single(Scale.S5), "n"), (GraphVariant.single(Scale.S20), "n")]


@pytest.mark.parametrize("gv, group", ORACLE_CASES, ids=lambda v: str(v))
@pytest.mark.parametrize("mode", ["fixed", "incident", "shared"])
def test_rgcn_matches_loop_oracle(gv, group, mode):
    rng = np.random.default_rng(3)
    g = build_graph(3, 4, gv)
    rels = tuple(r for r in (NEIGHBOR_RELATIONS if group == "n" else SCALE_RELATIONS)
                 if r.src in g.scales and r.dst in g.scales)
    H = rng.normal(size=(g.n_nodes, 5))
    W_root, b = rng.normal(size=(3, 5)), rng.normal(size=3)
    W_rel = {r: rng.normal(size=(3, 5)) for r in rels}
    shared = mode == "shared"
    norm = "fixed" if shared else mode
    got = rgcn_layer(g, H, W_root, b, W_rel, rels, shared=shared, relation_norm=norm)
    want = rgcn_loop(g, H, W_root, b, W_rel, rels, shared=shared, relation_norm=norm)
    np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)


def test_rgcn_batch_equals_per_graph():
    rng = np.random.default_rng(0)
    graphs = [build_graph(2, 3), build_graph(3, 3), build_graph(1, 4)]
    feats = [rng.normal(size=(g.n_nodes, 4)) for g in graphs]
    batch = GraphBatch.from_graphs(graphs, feats)
    W_root, b = rng.normal(size=(2, 4)), rng.normal(size=2)
    W_rel = {r: rng.normal(size=(2, 4)) for r in NEIGHBOR_RELATIONS}
    out = rgcn_layer(batch, batch.features, W_root, b, W_rel)
    for i, (g, f) in enumerate(zip(graphs, feats)):
        np.testing.assert_allclose(batch.image_rows(out, i), rgcn_layer(g, f, W_root, b, W_rel), atol=1e-12)


def test_rgcn_rejects_foreign_relation():
    g = build_graph(2, 2, GraphVariant.single(Scale.S5))
    r = Relation(Scale.S10, Scale.S10)
    with pytest.raises(ValueError, match="not defined"):
        rgcn_layer(g, np.zeros((4, 2)), np.eye(2), np.zeros(2), {r: np.eye(2)})


def test_identity_weights_keep_input_on_isolated_nodes():
    config = ModelConfig(in_dim=4)
    params = init_params(config, np.random.default_rng(0))
    for name in ("s1l0", "s1l1"):
        params[f"{name}.W_root"] = np.eye(4)
        for r in NEIGHBOR_RELATIONS:
            params[f"{name}.W_{r.src}_{r.dst}"] = np.zeros((4, 4))
    g = build_graph(1, 1)
    x = np.random.default_rng(1).normal(size=(3, 4))
    trace = forward(g, x, params, config)
    np.testing.assert_array_equal(trace.steps["step1"], x)


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_attention_is_a_distribution(variant):
    config, g, x, params = setup(variant, 3, 4)
    a = forward(g, x, params, config).attention
    assert a.shape == (12,)
    assert (a > 0).all()
    assert abs(a.sum() - 1.0) < 1e-12


def test_single_location_attention_is_one():
    config, g, x, params = setup(Variant.FULL, 1, 1)
    trace = forward(g, x, params, config)
    assert trace.attention[0] == 1.0
    np.testing.assert_allclose(trace.pooled[0], trace.locations[0], atol=1e-15)


def test_batched_attention_normalizes_per_image():
    config, _, _, params = setup()
    rng = np.random.default_rng(5)
    graphs = [build_graph(2, 2), build_graph(3, 4), build_graph(1, 1)]
    batch = GraphBatch.from_graphs(graphs, [rng.normal(size=(g.n_nodes, 8)) for g in graphs])
    trace = forward(batch, None, params, config)
    sums = np.add.reduceat(trace.attention, batch.loc_offsets[:-1])
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)
    for i, g in enumerate(graphs):
        alone = forward(g, batch.image_rows(batch.features, i), params, config)
        np.testing.assert_allclose(trace.logits[i], alone.logits[0], atol=1e-10)


def perturb_location(g, x, row, col, rng):
    x = x.copy()
    for s in g.scales:
        x[g.node_index(NodeRef(s, row, col))] += rng.normal(size=x.shape[1])
    return x


def test_receptive_field_is_four_hops():
    config, g, x, params = setup(Variant.FULL, 7, 7)
    rng = np.random.default_rng(9)
    base = forward(g, x, params, config).steps["step3"]
    centre = [g.node_index(NodeRef(s, 3, 3)) for s in g.scales]
    for row in range(7):
        for col in range(7):
            dist = abs(row - 3) + abs(col - 3)
            moved = forward(g, perturb_location(g, x, row, col, rng), params, config).steps["step3"]
            changed = np.abs(moved[centre] - base[centre]).max()
            if dist > 4:
                assert changed == 0.0, (row, col)
            else:
                assert changed > 0.0, (row, col)


def test_field_of_view_counts_thirteen_locations():
    # after steps 1 and 2 a 20x node sees the closed 2-hop diamond of 5x nodes
    config, g, x, params = setup(Variant.FULL, 7, 7)
    rng = np.random.default_rng(2)
    base = forward(g, x, params, config).steps["step2"]
    centre = g.node_index(NodeRef(Scale.S20, 3, 3))
    influencing = set()
    for row in range(7):
        for col in range(7):
            x2 = x.copy()
            x2[g.node_index(NodeRef(Scale.S5, row, col))] += rng.normal(size=x.shape[1])
            if np.abs(forward(g, x2, params, config).steps["step2"][centre] - base[centre]).max() > 0:
                influencing.add((row, col))
    assert len(influencing) == 13
    assert influencing == {(r, c) for r in range(7) for c in range(7) if abs(r - 3) + abs(c - 3) <= 2}


def test_step_one_is_affine():
    config, g, x, params = setup()
    y = np.random.default_rng(4).normal(size=x.shape)
    f = lambda v: forward(g, v, params, config).steps["step1"]
    alpha, beta = 0.7, 0.3
    np.testing.assert_allclose(f(alpha * x + beta * y), alpha * f(x) + beta * f(y), atol=1e-9)


def test_step_one_is_linear_without_biases():
    config, g, x, params = setup()
    for name in ("s1l0.b", "s1l1.b"):
        params[name] = np.zeros_like(params[name])
    y = np.random.default_rng(4).normal(size=x.shape)
    f = lambda v: forward(g, v, params, config).steps["step1"]
    np.testing.assert_allclose(f(2.0 * x - 3.0 * y), 2.0 * f(x) - 3.0 * f(y), atol=1e-9)


def test_four_relu_variant_is_not_linear():
    config, g, x, params = setup(Variant.FOUR_RELU)
    f = lambda v: forward(g, v, params, config).steps["step1"]
    assert np.abs(f(-x) + f(x) - 2 * f(np.zeros_like(x))).max() > 1e-3


@settings(max_examples=15, deadline=None)
@given(st.permutations(list(range(12))))
def test_pooling_and_logits_are_permutation_invariant(perm):
    config, g, x, params = setup(Variant.FULL, 3, 4)
    trace = forward(g, x, params, config)
    from msrgcn.model import attention_pool, classify

    perm = np.array(perm)
    z, a, _ = attention_pool(trace.locations[perm], params["att.V"], params["att.w"], np.array([0, 12]))
    np.testing.assert_allclose(z, trace.pooled, atol=1e-12)
    np.testing.assert_allclose(a, trace.attention[perm], atol=1e-15)
    np.testing.assert_allclose(classify(z, params)[0], trace.logits, atol=1e-12)


def typed_from_homogeneous(params, hom_config):
    config = ModelConfig(**{**hom_config.to_dict(), "variant": "Full"})
    out = {}
    for spec in layer_plan(config):
        rels = NEIGHBOR_RELATIONS if spec.group == "n" else SCALE_RELATIONS
        for k in ("W_root", "b", "ln_gain", "ln_offset"):
            key = f"{spec.name}.{k}"
            if key in params:
                out[key] = params[key]
        for r in rels:
            out[f"{spec.name}.W_{r.src}_{r.dst}"] = 3.0 * params[f"{spec.name}.W_shared"]
    for k, v in params.items():
        if not k.startswith(("s1", "s2", "s3")):
            out[k] = v
    return {k: out[k] for k in init_params(config, np.random.default_rng(0))}, config


def test_homogeneous_equals_typed_with_tripled_shared_weights():
    # every node sees exactly one of the three neighbor relations and two of
    # the six cross-scale relations, so 1/3 (resp. 2/6) of 3W equals W
    hom_config, g, x, hom_params = setup(Variant.HOMOGENEOUS, 3, 4)
    typed_params, typed_config = typed_from_homogeneous(hom_params, hom_config)
    a = forward(g, x, hom_params, hom_config).logits
    b = forward(g, x, typed_params, typed_config).logits
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_zero_upstream_gives_zero_gradients():
    config, g, x, params = setup()
    trace = forward(g, x, params, config)
    grads = backward(trace, g, params, np.zeros_like(trace.logits))
    assert list(grads) == list(params)
    assert all(not v.any() for v in grads.values())


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_full_model_gradients(variant):
    rep = check_full_model(variant, grid=(2, 3), in_dim=4, d1=3, d2=3, n_images=2, seed=1)
    assert rep.passed, rep.errors


def test_forward_is_deterministic():
    config, g, x, params = setup()
    a = forward(g, x, params, config).logits
    b = forward(g, x, params, config).logits
    assert a.tobytes() == b.tobytes()


def test_init_is_seeded_and_layout_stable():
    config = ModelConfig()
    a = init_params(config, np.random.default_rng(7))
    b = init_params(config, np.random.default_rng(7))
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert list(a)[:4] == ["s1l0.W_root", "s1l0.b", "s1l0.W_5_5", "s1l0.W_10_10"]
    assert not a["s2.b"].any() and (a["s2.ln_gain"] == 1).all()


def test_variant_graph_mismatch_is_rejected():
    config, _, _, params = setup(Variant.FULL)
    g = build_graph(2, 2, GraphVariant.global_edges())
    with pytest.raises(ValueError, match="needs"):
        forward(g, np.zeros((12, 8)), params, config)


def test_layer_plans():
    names = lambda v: [s.name for s in layer_plan(ModelConfig(variant=v))]
    assert names(Variant.FULL) == ["s1l0", "s1l1", "s2", "s3l0", "s3l1"]
    assert names(Variant.WOSE) == ["s1l0", "s1l1", "s3l0", "s3l1"]
    assert names(Variant.SINGLE10) == ["s1l0", "s1l1", "s3l0", "s3l1"]
    assert names(Variant.ATTENTION) == []
    assert [s.activate for s in layer_plan(ModelConfig(variant=Variant.FOUR_RELU))][:2] == [True, True]
    assert ModelConfig(variant=Variant.SINGLE5).pooled_dim == 8
    assert ModelConfig(variant=Variant.ATTENTION).pooled_dim == 96


def test_scale_features_selects_block():
    x = np.arange(3 * 4 * 2, dtype=float).reshape(12, 2)
    np.testing.assert_array_equal(scale_features(GraphVariant.single(Scale.S10), x, 4), x[4:8])
    assert scale_features(GraphVariant.full(), x, 4) is x


def test_heatmap_examples():
    hm = AttentionHeatmap(np.array([[0.1, 0.2], [0.3, 0.4]]))
    np.testing.assert_allclose(hm.normalized, [[0, 1 / 3], [2 / 3, 1]], atol=1e-12)
    flat = AttentionHeatmap(np.full((3, 3), 1 / 9))
    assert not flat.normalized.any()


def test_heatmap_exports(tmp_path):
    config, g, x, params = setup(Variant.FULL, 2, 3)
    hm = heatmap(forward(g, x, params, config))
    assert hm.raw.shape == (2, 3)
    assert abs(hm.raw.sum() - 1) < 1e-12
    hm.save(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "row,col,raw,normalized" and len(lines) == 7
    assert float(lines[1].split(",")[2]) == hm.raw[0, 0]
    hm.save(tmp_path / "h.pgm")
    data = (tmp_path / "h.pgm").read_bytes()
    assert data.startswith(b"P5\n3 2\n255\n") and len(data) == len(b"P5\n3 2\n255\n") + 6
    with pytest.raises(ValueError):
        hm.save(tmp_path / "h.png")


def test_single_batch_matches_graph_order():
    g = build_graph(2, 2)
    x = np.arange(24.0).reshape(12, 2)
    np.testing.assert_array_equal(single_batch(g, x).features, x)
