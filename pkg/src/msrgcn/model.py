"""Relational graph convolution and the multi-scale MIL pipeline.

The pipeline runs on a :class:`GraphBatch`, the disjoint union of one or more
image graphs. Per-relation neighbor means are applied as one stacked sparse
matrix of shape ``(|R| * n, n)``, so a layer costs one sparse product and one
dense product regardless of how many relations it has.

Stages:

1. two affine RGCN layers over neighbor relations;
2. one RGCN layer over cross-scale relations, then layer norm and ReLU;
3. two RGCN layers over neighbor relations, each followed by layer norm and
   ReLU, reducing ``d -> d1 -> d2``;
4. per-location concatenation of the scale embeddings, attention pooling and
   a two-layer classifier.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import ndnn
from .graphcore import (
    SCALES,
    GraphKind,
    GraphVariant,
    MultiScaleGraph,
    Relation,
    Scale,
)

ModelParams = dict  # name -> float64 ndarray, in declaration order


class Variant(str, enum.Enum):
    FULL = "Full"
    SINGLE5 = "Single5"
    SINGLE10 = "Single10"
    SINGLE20 = "Single20"
    GE = "GE"
    WOSE = "WoSE"
    HOMOGENEOUS = "HomogeneousGCN"
    FOUR_RELU = "FourReLU"
    ATTENTION = "AttentionBaseline"

    def __str__(self) -> str:
        return self.value

    @property
    def graph_variant(self) -> GraphVariant:
        if self in _SINGLE:
            return GraphVariant.single(_SINGLE[self])
        if self is Variant.GE:
            return GraphVariant.global_edges()
        if self is Variant.WOSE:
            return GraphVariant.no_scale_edges()
        return GraphVariant.full()

    @property
    def scales(self) -> tuple[Scale, ...]:
        return self.graph_variant.scales


_SINGLE = {Variant.SINGLE5: Scale.S5, Variant.SINGLE10: Scale.S10, Variant.SINGLE20: Scale.S20}
ALL_VARIANTS = tuple(Variant)


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int = 32
    d1: int = 16
    d2: int = 8
    attention_dim: int = 64
    hidden_dim: int = 32
    n_classes: int = 6
    variant: Variant = Variant.FULL
    # "fixed": divide by the size of the layer's relation set.
    # "incident": divide by the number of relations that reach the node.
    relation_norm: str = "fixed"

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        for name in ("in_dim", "d1", "d2", "attention_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.relation_norm not in ("fixed", "incident"):
            raise ValueError(f"unknown relation_norm {self.relation_norm!r}")

    @property
    def pooled_dim(self) -> int:
        per_node = self.in_dim if self.variant is Variant.ATTENTION else self.d2
        return len(self.variant.scales) * per_node

    def to_dict(self) -> dict:
        out = asdict(self)
        out["variant"] = self.variant.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        return cls(**data)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    group: str  # "n" neighbor relations, "s" cross-scale relations
    in_dim: int
    out_dim: int
    activate: bool  # layer norm then ReLU after the affine RGCN


def layer_plan(config: ModelConfig) -> list[LayerSpec]:
    v = config.variant
    if v is Variant.ATTENTION:
        return []
    d = config.in_dim
    plan = [LayerSpec(f"s1l{i}", "n", d, d, v is Variant.FOUR_RELU) for i in range(2)]
    if v not in _SINGLE and v is not Variant.WOSE:
        plan.append(LayerSpec("s2", "s", d, d, True))
    plan.append(LayerSpec("s3l0", "n", d, config.d1, True))
    plan.append(LayerSpec("s3l1", "n", config.d1, config.d2, True))
    return plan


def relation_group(scales, group: str) -> tuple[Relation, ...]:
    if group == "n":
        return tuple(Relation(s, s) for s in scales)
    return tuple(Relation(a, b) for a in scales for b in scales if a != b)


def homogeneous(config: ModelConfig) -> bool:
    return config.variant is Variant.HOMOGENEOUS


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform matrices, zero biases and offsets, unit gains."""
    params: ModelParams = {}
    scales = config.variant.scales
    for spec in layer_plan(config):
        o, i = spec.out_dim, spec.in_dim
        params[f"{spec.name}.W_root"] = ndnn.glorot_uniform(rng, o, i)
        params[f"{spec.name}.b"] = np.zeros(o)
        if homogeneous(config):
            params[f"{spec.name}.W_shared"] = ndnn.glorot_uniform(rng, o, i)
        else:
            for r in relation_group(scales, spec.group):
                params[f"{spec.name}.W_{r.src}_{r.dst}"] = ndnn.glorot_uniform(rng, o, i)
        if spec.activate:
            params[f"{spec.name}.ln_gain"] = np.ones(o)
            params[f"{spec.name}.ln_offset"] = np.zeros(o)
    m = config.pooled_dim
    params["att.V"] = ndnn.glorot_uniform(rng, config.attention_dim, m)
    params["att.w"] = ndnn.glorot_uniform(rng, 1, config.attention_dim)[0]
    params["cls.W1"] = ndnn.glorot_uniform(rng, config.hidden_dim, m)
    params["cls.b1"] = np.zeros(config.hidden_dim)
    params["cls.W2"] = ndnn.glorot_uniform(rng, config.n_classes, config.hidden_dim)
    params["cls.b2"] = np.zeros(config.n_classes)
    return params


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(config, np.random.default_rng(0)).items()}


def message_weights(params: ModelParams, spec_name: str, relations, shared: bool) -> list[str]:
    if shared:
        return [f"{spec_name}.W_shared"]
    return [f"{spec_name}.W_{r.src}_{r.dst}" for r in relations]


# ---------------------------------------------------------------------------
# batching


@dataclass
class _Term:
    """Mean over one relation's in-neighbors: ``out[dst] += A @ H[src]``."""

    dst: slice
    src: slice
    A: sp.csr_matrix
    A_t: sp.spmatrix


@dataclass
class _Aggregator:
    terms: list[_Term]
    norm: np.ndarray | float  # scalar, or (n, 1) per destination node


@dataclass
class GraphBatch:
    """Disjoint union of image graphs.

    Batch nodes are scale-major: all S5 nodes of every image (image by image,
    row-major), then all S10 nodes, then S20. Each scale therefore occupies a
    contiguous slice of ``n_locations`` rows. For a single graph this is the
    graph's own node order.
    """

    graphs: list[MultiScaleGraph]
    features: np.ndarray  # (n_nodes, d) in batch order
    scales: tuple[Scale, ...]
    loc_offsets: np.ndarray  # (B + 1,) first location of each image
    _agg_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_locations(self) -> int:
        return int(self.loc_offsets[-1])

    @property
    def n_nodes(self) -> int:
        return len(self.scales) * self.n_locations

    @property
    def n_images(self) -> int:
        return len(self.graphs)

    @property
    def loc_nodes(self) -> np.ndarray:
        """``(n_locations, n_scales)`` batch node index of each location's nodes."""
        L = self.n_locations
        return np.arange(L)[:, None] + L * np.arange(len(self.scales))[None, :]

    def scale_slice(self, s: int) -> slice:
        return slice(s * self.n_locations, (s + 1) * self.n_locations)

    @classmethod
    def from_graphs(cls, graphs, features) -> GraphBatch:
        graphs = list(graphs)
        if not graphs:
            raise ValueError("empty batch")
        scales = graphs[0].scales
        if any(g.scales != scales for g in graphs):
            raise ValueError("all graphs in a batch must share the same scales")
        feats = [np.asarray(f, dtype=np.float64) for f in features]
        for g, f in zip(graphs, feats):
            if f.ndim != 2 or f.shape[0] != g.n_nodes:
                raise ValueError(f"feature matrix {f.shape} does not match a graph of {g.n_nodes} nodes")
        if len(graphs) == 1:
            x = feats[0]
        else:
            x = np.concatenate(
                [f[s * g.n_locations : (s + 1) * g.n_locations] for s in range(len(scales)) for g, f in zip(graphs, feats)]
            )
        loc_offsets = np.cumsum([0] + [g.n_locations for g in graphs])
        return cls(graphs, x, scales, loc_offsets)

    def image_rows(self, H: np.ndarray, image: int) -> np.ndarray:
        """Rows of batch-ordered ``H`` belonging to ``image``, in that graph's order."""
        lo, hi = self.loc_offsets[image], self.loc_offsets[image + 1]
        L = self.n_locations
        return np.concatenate([H[s * L + lo : s * L + hi] for s in range(len(self.scales))])

    def aggregator(self, relations: tuple[Relation, ...], shared: bool, relation_norm: str) -> _Aggregator:
        key = (relations, shared, relation_norm)
        if key not in self._agg_cache:
            if shared:
                agg = self._shared_aggregator(relations)
            else:
                agg = self._typed_aggregator(relations, relation_norm)
            self._agg_cache[key] = agg
        return self._agg_cache[key]

    def _typed_aggregator(self, relations, relation_norm) -> _Aggregator:
        L = self.n_locations
        offsets = self.loc_offsets[:-1]
        terms = []
        touched = np.zeros(self.n_nodes)
        for r in relations:
            a, b = self.scales.index(r.src), self.scales.index(r.dst)
            parts = [g.local_coo(r) for g in self.graphs]
            shift = np.repeat(offsets, [len(p[0]) for p in parts])
            rows = np.concatenate([p[0] for p in parts]) + shift
            cols = np.concatenate([p[1] for p in parts]) + shift
            vals = np.concatenate([p[2] for p in parts])
            # per-graph triplets are sorted by destination and offsets increase,
            # so rows are already in CSR order
            indptr = np.zeros(L + 1, dtype=np.int64)
            np.cumsum(np.bincount(rows, minlength=L), out=indptr[1:])
            A = sp.csr_matrix((vals, cols, indptr), shape=(L, L))
            terms.append(_Term(self.scale_slice(b), self.scale_slice(a), A, A.T))
            touched[b * L + np.unique(rows)] += 1
        if relation_norm == "incident":
            norm = (1.0 / np.maximum(touched, 1.0))[:, None]
        else:
            norm = 1.0 / len(relations)
        return _Aggregator(terms, norm)

    def _shared_aggregator(self, relations) -> _Aggregator:
        L = self.n_locations
        n = self.n_nodes
        offsets = self.loc_offsets[:-1].tolist()
        rows, cols, vals = [], [], []
        for g, off in zip(self.graphs, offsets):
            dst, src, w = g.mean_coo(tuple(relations))
            # graph index s * n_loc + l  ->  batch index s * L + off + l
            rows.append((dst // g.n_locations) * L + off + dst % g.n_locations)
            cols.append((src // g.n_locations) * L + off + src % g.n_locations)
            vals.append(w)
        A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        full = slice(0, n)
        return _Aggregator([_Term(full, full, A, A.T)], 1.0)


def single_batch(graph: MultiScaleGraph, features) -> GraphBatch:
    return GraphBatch.from_graphs([graph], [features])


# ---------------------------------------------------------------------------
# RGCN layer


def _term_norm(norm, term):
    return norm if np.isscalar(norm) else norm[term.dst]


def _rgcn_forward(agg: _Aggregator, H, W_root, b, W_msgs):
    out = H @ W_root.T + b
    Ms = []
    for term, W in zip(agg.terms, W_msgs):
        M = agg_product(term.A, H[term.src])
        Ms.append(M)
        out[term.dst] += _term_norm(agg.norm, term) * (M @ W.T)
    return out, (H, Ms, W_msgs)


def _rgcn_backward(agg: _Aggregator, G, cache, W_root, input_grad=True):
    H, Ms, W_msgs = cache
    dH = G @ W_root if input_grad else None
    dW_msgs = []
    for term, W, M in zip(agg.terms, W_msgs, Ms):
        Gs = _term_norm(agg.norm, term) * G[term.dst]
        dW_msgs.append(Gs.T @ M)
        if input_grad:
            dH[term.src] += agg_product(term.A_t, Gs @ W)
    return dH, G.T @ H, G.sum(axis=0), dW_msgs


def agg_product(A: sp.csr_matrix, X: np.ndarray) -> np.ndarray:
    return np.asarray(A @ X)


def rgcn_layer(
    graph: MultiScaleGraph | GraphBatch,
    H,
    W_root,
    b,
    W_rel: dict,
    relations=None,
    shared: bool = False,
    relation_norm: str = "fixed",
):
    """One relational graph convolution.

    ``W_rel`` maps each relation of the layer to its message matrix. In shared
    (homogeneous) mode it holds one matrix under any key, and all edges of
    ``relations`` are pooled into a single relation-blind neighbor mean.
    """
    batch = graph if isinstance(graph, GraphBatch) else single_batch(graph, H)
    H = np.asarray(H, dtype=np.float64)
    W_root = np.asarray(W_root, dtype=np.float64)
    if relations is None:
        relations = tuple(W_rel)
    relations = tuple(relations)
    if H.shape != (batch.n_nodes, W_root.shape[1]):
        raise ValueError(f"embedding shape {H.shape} does not fit {batch.n_nodes} nodes x {W_root.shape[1]}")
    for r in relations:
        if r.src not in batch.scales or r.dst not in batch.scales:
            raise ValueError(f"relation {r} is not defined on a graph with scales {batch.scales}")
    msgs = list(W_rel.values())[:1] if shared else [np.asarray(W_rel[r], dtype=np.float64) for r in relations]
    for W in msgs:
        if W.shape != W_root.shape:
            raise ValueError(f"message weight {W.shape} differs from root weight {W_root.shape}")
    agg = batch.aggregator(relations, shared, relation_norm)
    return _rgcn_forward(agg, H, W_root, np.asarray(b, dtype=np.float64), msgs)[0]


# ---------------------------------------------------------------------------
# attention pooling


def attention_pool(H_loc, V, w, loc_offsets):
    """Softmax attention over each image's locations.

    Returns ``(z, a, cache)`` with ``z`` of shape ``(B, M)``.
    """
    starts = loc_offsets[:-1]
    counts = np.diff(loc_offsets)
    U = np.tanh(H_loc @ V.T)
    s = U @ w
    s_max = np.repeat(np.maximum.reduceat(s, starts), counts)
    e = np.exp(s - s_max)
    a = e / np.repeat(np.add.reduceat(e, starts), counts)
    z = np.add.reduceat(a[:, None] * H_loc, starts, axis=0)
    return z, a, (H_loc, U, a, counts, starts)


def attention_pool_backward(dz, cache, V, w):
    H_loc, U, a, counts, starts = cache
    dz_loc = np.repeat(dz, counts, axis=0)
    dH = a[:, None] * dz_loc
    da = (dz_loc * H_loc).sum(axis=1)
    ds = a * (da - np.repeat(np.add.reduceat(a * da, starts), counts))
    dw = U.T @ ds
    dpre = ds[:, None] * w[None, :] * (1.0 - U * U)
    dV = dpre.T @ H_loc
    dH += dpre @ V
    return dH, dV, dw


def classify(z, params):
    h_pre = z @ params["cls.W1"].T + params["cls.b1"]
    h = ndnn.relu(h_pre)
    logits = h @ params["cls.W2"].T + params["cls.b2"]
    return logits, (z, h_pre, h)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class ForwardTrace:
    steps: dict[str, np.ndarray]  # node embeddings after each stage
    locations: np.ndarray  # (n_locations, M) concatenated per-location embeddings
    attention: np.ndarray  # (n_locations,)
    pooled: np.ndarray  # (B, M)
    logits: np.ndarray  # (B, K)
    batch: GraphBatch = field(repr=False)
    config: ModelConfig = field(default_factory=ModelConfig, repr=False)
    _caches: list = field(default_factory=list, repr=False)

    @property
    def probabilities(self) -> np.ndarray:
        return ndnn.softmax(self.logits)


def _check_variant(batch: GraphBatch, config: ModelConfig):
    want = config.variant.graph_variant
    for g in batch.graphs:
        if g.variant != want:
            raise ValueError(f"variant {config.variant} needs {want} graphs, got {g.variant}")
    if batch.features.shape[1] != config.in_dim:
        raise ValueError(f"features have dim {batch.features.shape[1]}, config expects {config.in_dim}")


def forward(graph, features, params: ModelParams, config: ModelConfig) -> ForwardTrace:
    """Run the pipeline. ``graph`` is a graph (with ``features``) or a batch."""
    if isinstance(graph, GraphBatch):
        batch = graph
    else:
        batch = single_batch(graph, features)
    _check_variant(batch, config)
    shared = homogeneous(config)
    caches = []
    steps = {"input": batch.features}
    H = batch.features
    for spec in layer_plan(config):
        rels = relation_group(batch.scales, spec.group)
        agg = batch.aggregator(rels, shared, config.relation_norm)
        msgs = [params[k] for k in message_weights(params, spec.name, rels, shared)]
        H, rcache = _rgcn_forward(agg, H, params[f"{spec.name}.W_root"], params[f"{spec.name}.b"], msgs)
        lcache = pre = None
        if spec.activate:
            H_ln, lcache = ndnn.layer_norm(H, params[f"{spec.name}.ln_gain"], params[f"{spec.name}.ln_offset"])
            pre = H_ln
            H = ndnn.relu(H_ln)
        caches.append((spec, agg, rcache, lcache, pre))
        steps[spec.name] = H
    for stage in ("s1l1", "s2", "s3l1"):
        if stage in steps:
            steps[{"s1l1": "step1", "s2": "step2", "s3l1": "step3"}[stage]] = steps[stage]

    H_loc = np.concatenate([H[batch.scale_slice(s)] for s in range(len(batch.scales))], axis=1)
    z, a, pcache = attention_pool(H_loc, params["att.V"], params["att.w"], batch.loc_offsets)
    logits, ccache = classify(z, params)
    return ForwardTrace(steps, H_loc, a, z, logits, batch, config, [caches, pcache, ccache])


def backward(trace: ForwardTrace, graph, params: ModelParams, dlogits) -> dict:
    """Parameter gradients given ``dlogits = dL/dlogits`` of shape ``(B, K)``.

    ``graph`` is accepted for symmetry with :func:`forward`; the batch recorded
    in ``trace`` is used.
    """
    batch = trace.batch
    layer_caches, pcache, (z, h_pre, h) = trace._caches
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(trace.logits.shape)
    grads = {}
    grads["cls.W2"] = dlogits.T @ h
    grads["cls.b2"] = dlogits.sum(axis=0)
    dh_pre = ndnn.relu_grad(dlogits @ params["cls.W2"], h_pre)
    grads["cls.W1"] = dh_pre.T @ z
    grads["cls.b1"] = dh_pre.sum(axis=0)
    dz = dh_pre @ params["cls.W1"]

    dH_loc, grads["att.V"], grads["att.w"] = attention_pool_backward(dz, pcache, params["att.V"], params["att.w"])
    n_scales = len(batch.scales)
    width = dH_loc.shape[1] // n_scales
    dH = np.zeros((batch.n_nodes, width))
    for s in range(n_scales):
        dH[batch.scale_slice(s)] = dH_loc[:, s * width : (s + 1) * width]

    shared = homogeneous(trace.config)
    for depth, (spec, agg, rcache, lcache, pre) in reversed(list(enumerate(layer_caches))):
        name = spec.name
        if spec.activate:
            dH = ndnn.relu_grad(dH, pre)
            dH, grads[f"{name}.ln_gain"], grads[f"{name}.ln_offset"] = ndnn.layer_norm_grad(dH, lcache)
        dH, grads[f"{name}.W_root"], grads[f"{name}.b"], dW_msgs = _rgcn_backward(
            agg, dH, rcache, params[f"{name}.W_root"], input_grad=depth > 0
        )
        rels = relation_group(batch.scales, spec.group)
        for key, g in zip(message_weights(params, name, rels, shared), dW_msgs):
            grads[key] = g
    return {k: grads[k] for k in params}


def loss_and_grads(batch: GraphBatch, labels, params: ModelParams, config: ModelConfig, class_weights):
    trace = forward(batch, None, params, config)
    loss, dlogits = ndnn.weighted_cross_entropy(trace.logits, np.asarray(labels), class_weights)
    return loss, backward(trace, batch, params, dlogits), trace


# ---------------------------------------------------------------------------
# heatmaps


@dataclass
class AttentionHeatmap:
    raw: np.ndarray  # (grid_rows, grid_cols), sums to 1

    @property
    def normalized(self) -> np.ndarray:
        lo, hi = self.raw.min(), self.raw.max()
        if hi - lo <= 0:
            return np.zeros_like(self.raw)
        return (self.raw - lo) / (hi - lo)

    def to_csv(self) -> str:
        raw, norm = self.raw.tolist(), self.normalized.tolist()
        lines = ["row,col,raw,normalized"]
        for r, (raw_row, norm_row) in enumerate(zip(raw, norm)):
            for c, (v, n) in enumerate(zip(raw_row, norm_row)):
                lines.append(f"{r},{c},{v!r},{n!r}")
        return "\n".join(lines) + "\n"

    def to_pgm(self) -> bytes:
        rows, cols = self.raw.shape
        pixels = np.round(self.normalized * 255).astype(np.uint8)
        return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()

    def save(self, path) -> None:
        path = str(path)
        if path.endswith(".csv"):
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(self.to_csv())
        elif path.endswith(".pgm"):
            with open(path, "wb") as fh:
                fh.write(self.to_pgm())
        else:
            raise ValueError(f"heatmap output must end in .csv or .pgm: {path}")


def heatmap(trace: ForwardTrace, graph=None, image: int = 0) -> AttentionHeatmap:
    """Attention weights of one image of the batch laid out on its grid."""
    batch = trace.batch
    g = batch.graphs[image] if graph is None or isinstance(graph, GraphBatch) else graph
    lo, hi = batch.loc_offsets[image], batch.loc_offsets[image + 1]
    return AttentionHeatmap(trace.attention[lo:hi].reshape(g.grid_rows, g.grid_cols).copy())


def scale_features(graph_variant: GraphVariant, full_features: np.ndarray, n_locations: int) -> np.ndarray:
    """Rows of a 3-scale feature matrix needed by a graph of ``graph_variant``."""
    if graph_variant.kind is not GraphKind.SINGLE_SCALE:
        return full_features
    s = SCALES.index(graph_variant.scale)
    return full_features[s * n_locations : (s + 1) * n_locations]
