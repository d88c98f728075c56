"""Exception hierarchy shared by every TopoNets module."""

from typing import Optional


class TopoNetsError(Exception):
    """Base class for all errors raised by the package."""


class StructureError(TopoNetsError):
    """Malformed network structure (cycles, dangling child ids, bad tables)."""


class SpnInputError(TopoNetsError):
    """Invalid arguments: evidence, weights, configs."""


class ImpossibleEvidenceError(TopoNetsError):
    """Evidence has zero probability under the network."""


class SpnFormatError(TopoNetsError):
    def __init__(self, message: str, node_index: Optional[int] = None):
        if node_index is not None:
            message = f"node {node_index}: {message}"
        super().__init__(message)
        self.node_index = node_index


class TrainingDivergedError(TopoNetsError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class PruneError(TopoNetsError):
    def __init__(self, node_id: int):
        super().__init__(f"pruning would leave sum node {node_id} without children")
        self.node_id = node_id


class GridError(TopoNetsError):
    """Degenerate or malformed occupancy grid."""


class MapError(TopoNetsError):
    """Semantic map invariant violations and bad map operations."""


class MapFormatError(MapError):
    def __init__(self, message: str, place_id: Optional[int] = None,
                 schema_version: Optional[int] = None):
        if place_id is not None:
            message = f"place {place_id}: {message}"
        super().__init__(message)
        self.place_id = place_id
        self.schema_version = schema_version


class UntrainedModelError(TopoNetsError):
    """Inference requested on a model that has not been trained."""


class TemplateDataError(TopoNetsError):
    def __init__(self, template: str, message: str = "no matching map parts"):
        super().__init__(f"template {template!r}: {message}")
        self.template = template


class ExperimentError(TopoNetsError):
    """Command-level failures (bad splits, existing output, engine mismatch)."""
