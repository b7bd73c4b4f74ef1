"""k-hop neighborhood aggregation networks and a standard GNN baseline, in numpy."""

from .graph import Graph, GraphError
from .gnn import GnnModel
from .khop import KHopModel

__all__ = ["Graph", "GraphError", "GnnModel", "KHopModel"]
__version__ = "0.1.0"
