"""One relational graph convolution by hand and by the library.

Each node adds a root transform of itself to the mean of its in-neighbors'
transformed features, with one weight matrix per edge type. The per-relation
sum is divided by the number of relations used by the layer.
"""

import numpy as np

from msrgcn.graphcore import NEIGHBOR_RELATIONS, NodeRef, Scale, build_graph
from msrgcn.model import rgcn_layer

g = build_graph(1, 2)
H = np.zeros((g.n_nodes, 2))
H[g.node_index(NodeRef(Scale.S5, 0, 0))] = [1.0, 0.0]
H[g.node_index(NodeRef(Scale.S5, 0, 1))] = [0.0, 1.0]

W_root = np.eye(2)
W_rel = {r: 2.0 * np.eye(2) for r in NEIGHBOR_RELATIONS}
b = np.array([0.5, 0.5])

out = rgcn_layer(g, H, W_root, b, W_rel)
# node (5x, 0, 0) has one 5x neighbor; three neighbor relations share the mean
by_hand = b + W_root @ H[0] + (W_rel[NEIGHBOR_RELATIONS[0]] @ H[1]) / 3
print("library:", out[0])
print("by hand:", by_hand)

# the homogeneous variant pools all edges into one relation-blind mean
shared = rgcn_layer(g, H, W_root, b, {"any": np.eye(2)}, NEIGHBOR_RELATIONS, shared=True)
print("shared weights:", shared[0])
