"""Multi-scale relational graph convolution for multiple instance learning on patch grids."""

from .graphcore import (
    GraphVariant,
    MultiScaleGraph,
    NodeRef,
    Relation,
    Scale,
    build_graph,
    khop,
    neighbors,
)
from .model import (
    ForwardTrace,
    GraphBatch,
    ModelConfig,
    Variant,
    backward,
    forward,
    heatmap,
    init_params,
    rgcn_layer,
)

__version__ = "0.1.0"
