"""Pydantic schemas for every JSON document the package reads or writes."""

import enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SPN_FORMAT = "toponets-spn"
SPN_VERSION = 1
GRID_FORMAT = "toponets-polar-grid"
GRID_VERSION = 1
MAP_FORMAT = "toponets-semantic-map"
MAP_SCHEMA_VERSION = 1


class NodeKindName(str, enum.Enum):
    INDICATOR = "indicator"
    SUM = "sum"
    PRODUCT = "product"


class PlaceKind(str, enum.Enum):
    PLACE = "place"
    PLACEHOLDER = "placeholder"


class Decision(str, enum.Enum):
    KNOWN = "known"
    NOVEL = "novel"


class Task(str, enum.Enum):
    CLASSIFY = "classify"
    PLACEHOLDERS = "placeholders"
    NOVELTY = "novelty"
    ALL = "all"


class Engine(str, enum.Enum):
    TOPONET = "toponet"
    MRF = "mrf"
    LOCAL = "local"


# SPN model files

class SpnVariable(BaseModel):
    index: int = Field(ge=0)
    cardinality: int = Field(ge=2)


class SpnNodeRecord(BaseModel):
    id: int = Field(ge=0)
    kind: NodeKindName
    children: List[int] = []
    weights: List[float] = []
    variable: Optional[int] = None
    value: Optional[int] = None

    @model_validator(mode="after")
    def check_kind_fields(self):
        if self.kind == NodeKindName.INDICATOR:
            if self.children:
                raise ValueError("indicator nodes have no children")
            if self.variable is None or self.value is None:
                raise ValueError("indicator nodes need variable and value")
        else:
            if not self.children:
                raise ValueError(f"{self.kind.value} node needs children")
        if self.kind == NodeKindName.SUM and len(self.weights) != len(self.children):
            raise ValueError("sum weight count must equal child count")
        return self


class SpnDocument(BaseModel):
    format: str = SPN_FORMAT
    version: int = SPN_VERSION
    variables: List[SpnVariable]
    nodes: List[SpnNodeRecord]
    root: int = Field(ge=0)

    @field_validator("format")
    @classmethod
    def check_format(cls, value):
        if value != SPN_FORMAT:
            raise ValueError(f"unexpected format {value!r}")
        return value


# Polar grids and semantic maps

class PolarGridDocument(BaseModel):
    format: str = GRID_FORMAT
    version: int = GRID_VERSION
    dims: Tuple[int, int]
    radius: float = Field(gt=0)
    radial_edges: List[float]
    cells: List[int]

    @model_validator(mode="after")
    def check_cells(self):
        if len(self.cells) != self.dims[0] * self.dims[1]:
            raise ValueError(f"expected {self.dims[0] * self.dims[1]} cells, got {len(self.cells)}")
        if any(c not in (0, 1, 2) for c in self.cells):
            raise ValueError("cell codes must be 0, 1 or 2")
        if len(self.radial_edges) != self.dims[1] + 1:
            raise ValueError("radial_edges must have radial_cells + 1 entries")
        return self


class MapNode(BaseModel):
    id: int = Field(ge=0)
    kind: PlaceKind
    label: Optional[int] = None
    grid: Optional[List[int]] = None
    grid_ref: Optional[str] = None


class MapDocument(BaseModel):
    format: str = MAP_FORMAT
    schema_version: int = MAP_SCHEMA_VERSION
    class_set: str
    nodes: List[MapNode]
    edges: List[Tuple[int, int]] = []


# Datasets, manifests and configs

class LabeledSampleRecord(BaseModel):
    evidence: Dict[int, List[bool]]
    label: int = Field(default=0, ge=0)
    weight: float = Field(default=1.0, gt=0)


class CorpusEntry(BaseModel):
    floor: int
    path: str
    sha256: str
    places: int
    placeholders: int = 0


class CorpusManifest(BaseModel):
    class_setup: int
    seed: int
    maps: List[CorpusEntry]
    splits: List[str] = []


class TemplateShape(BaseModel):
    name: str
    slots: int = Field(ge=1)
    edges: List[Tuple[int, int]] = []


class TemplateEntry(BaseModel):
    shape: TemplateShape
    path: str
    sha256: str
    samples: int
    trained: bool = True
    place_model: Optional[str] = None


class ModelManifest(BaseModel):
    class_setup: int
    class_names: List[str]
    place_model: str
    place_model_sha256: str
    templates: List[TemplateEntry]
    pairwise: Optional[List[List[float]]] = None
    config: dict = {}


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    split: str = "456-7"
    class_setup: int = 6
    n_decompositions: int = Field(default=40, ge=1)
    seed: int = 0
    output_dir: str = "runs"
    floors: List[int] = [4, 5, 6, 7]
    swaps: Optional[int] = None
    corruption: float = Field(default=0.3, ge=0, le=1)
    placeholders: float = Field(default=0.2, ge=0, lt=1)
    structure: dict = {}
    training: dict = {}
    generator: dict = {}

    @field_validator("class_setup")
    @classmethod
    def check_class_setup(cls, value):
        if value not in (6, 10):
            raise ValueError("class setup must be 6 or 10")
        return value

    @model_validator(mode="after")
    def check_split(self):
        train, test = parse_split(self.split)
        if set(train) & set(test):
            raise ValueError(f"split {self.split!r} trains and tests on the same floor")
        return self

    @property
    def swap_count(self) -> int:
        if self.swaps is not None:
            return self.swaps
        return 10 if self.class_setup == 6 else 30


def parse_split(split: str) -> Tuple[List[int], List[int]]:
    """``"456-7"`` -> train floors [4, 5, 6], test floors [7]."""
    try:
        train, test = split.split("-")
        return [int(c) for c in train], [int(c) for c in test]
    except ValueError:
        raise ValueError(f'bad split {split!r}; expected digits-digits like "456-7"') from None


# Inference results

class PlacePrediction(BaseModel):
    place_id: int
    posterior: List[float]
    mpe_class: int


class NoveltyResult(BaseModel):
    total_ll: float
    per_place_ll: float
    threshold: Optional[float] = None
    decision: Optional[Decision] = None


class BpDiagnostics(BaseModel):
    converged: bool
    iterations: int
    residual: float


class InferenceRequest(BaseModel):
    map: MapDocument
    n_decompositions: int = Field(default=40, ge=1)
    seed: int = 0
    threshold: Optional[float] = None


class InferenceResponse(BaseModel):
    places: List[PlacePrediction] = []
    novelty: Optional[NoveltyResult] = None
