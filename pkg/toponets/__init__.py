"""TopoNets: sum-product networks over topological semantic maps."""

__version__ = "1.0.0"
