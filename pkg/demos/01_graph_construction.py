"""Building multi-scale patch graphs.

An image tiled into a grid gets one node per magnification at every grid
location. Same-scale nodes link to their 4-connected neighbors and nodes at
one location link across scales.
"""

from msrgcn.graphcore import (
    NEIGHBOR_RELATIONS,
    SCALE_RELATIONS,
    GraphVariant,
    NodeRef,
    Relation,
    Scale,
    build_graph,
    khop,
    neighbors,
)

g = build_graph(4, 4)
print("nodes:", g.n_nodes)
print("same-scale edges:", g.n_edges(NEIGHBOR_RELATIONS))
print("cross-scale edges:", g.n_edges(SCALE_RELATIONS))

# in-neighbors of a corner node, and the cross-scale partner of an interior node
corner = NodeRef(Scale.S20, 0, 0)
print(neighbors(g, corner, Relation(Scale.S20, Scale.S20)))
print(neighbors(g, NodeRef(Scale.S20, 2, 1), Relation(Scale.S5, Scale.S20)))

# two hops inside one scale reach a diamond of 12 nodes
big = build_graph(5, 5)
print("2-hop neighborhood:", len(khop(big, NodeRef(Scale.S10, 2, 2), NEIGHBOR_RELATIONS, 2)))

# the ablation graphs
for variant in (GraphVariant.single(Scale.S5), GraphVariant.global_edges(), GraphVariant.no_scale_edges()):
    gv = build_graph(5, 5, variant)
    print(f"{str(variant):<18} nodes={gv.n_nodes:3d} edges={gv.n_edges():4d}")
