"""
Robot-centric polar occupancy grids and the per-place SPN.

A polar grid has 56 angular by 21 radial cells. Cell ``(a, r)`` is variable
``a * 21 + r`` (angular-major). Angular column ``a`` covers
``[a, a + 1) * 2pi / 56`` counter-clockwise from the robot's +x axis. Radial
bands grow geometrically outwards from an innermost depth of 0.12 m to the
5 m radius. View ``v`` (a 45 degree sector) is columns ``7v .. 7v + 6``,
hence variables ``147v .. 147v + 146``.
"""

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.optimize import brentq
from scipy.special import logsumexp, softmax

from toponets.errors import GridError, ImpossibleEvidenceError, SpnInputError, UntrainedModelError
from toponets.inference import forward
from toponets.learn import (DenseGenerator, HybridConfig, HybridResult, LabeledSample, LayerAnnotation,
                            StructureConfig, hybrid_train)
from toponets.models import GRID_FORMAT, GRID_VERSION, PolarGridDocument
from toponets.serialization import load_spn, save_spn
from toponets.spn import Evidence, Spn, SpnBuilder, VarId, check_validity, evidence_matrix

logger = logging.getLogger(__name__)

ANGULAR_CELLS = 56
RADIAL_CELLS = 21
CELLS_PER_PLACE = ANGULAR_CELLS * RADIAL_CELLS
NUM_VIEWS = 8
VIEW_COLUMNS = ANGULAR_CELLS // NUM_VIEWS
VARS_PER_VIEW = VIEW_COLUMNS * RADIAL_CELLS
RADIUS_M = 5.0
INNER_DEPTH_M = 0.12
SUPERSAMPLING = 4

GRID_MAGIC = b"TPNGRD"
GRID_BINARY_VERSION = 1


class CellState(enum.IntEnum):
    FREE = 0
    OCCUPIED = 1
    UNKNOWN = 2


# Majority ties resolve in this order.
_TIE_ORDER = (CellState.OCCUPIED, CellState.UNKNOWN, CellState.FREE)


@lru_cache(maxsize=8)
def radial_edges(radius: float = RADIUS_M, cells: int = RADIAL_CELLS,
                 inner: float = INNER_DEPTH_M) -> np.ndarray:
    """Band boundaries: depths ``inner * q**i`` summing to ``radius``."""
    if inner * cells >= radius:
        raise GridError("innermost depth too large for a growing progression")
    ratio = brentq(lambda q: inner * (q ** cells - 1) / (q - 1) - radius, 1 + 1e-9, 2.0)
    edges = np.concatenate([[0.0], np.cumsum(inner * ratio ** np.arange(cells))])
    edges[-1] = radius
    edges.setflags(write=False)
    return edges


def cell_variable(angular: int, radial: int) -> int:
    return angular * RADIAL_CELLS + radial


def view_variables(view: int) -> range:
    return range(view * VARS_PER_VIEW, (view + 1) * VARS_PER_VIEW)


def place_variables(offset: int = 0) -> Tuple[VarId, ...]:
    return tuple(VarId(offset + k, 3) for k in range(CELLS_PER_PLACE))


@dataclass(frozen=True, eq=False)
class PolarGrid:
    cells: np.ndarray
    radius_m: float = RADIUS_M

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.int8)
        if cells.shape != (ANGULAR_CELLS, RADIAL_CELLS):
            raise GridError(f"polar grid must be {ANGULAR_CELLS}x{RADIAL_CELLS}, got {cells.shape}")
        if np.any((cells < 0) | (cells > 2)):
            raise GridError("cell codes must be 0 (free), 1 (occupied) or 2 (unknown)")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def unknown(cls) -> "PolarGrid":
        return cls(np.full((ANGULAR_CELLS, RADIAL_CELLS), CellState.UNKNOWN, dtype=np.int8))

    @classmethod
    def from_flat(cls, codes: Sequence[int], radius_m: float = RADIUS_M) -> "PolarGrid":
        codes = np.asarray(codes, dtype=np.int8)
        if codes.size != CELLS_PER_PLACE:
            raise GridError(f"expected {CELLS_PER_PLACE} cells, got {codes.size}")
        return cls(codes.reshape(ANGULAR_CELLS, RADIAL_CELLS), radius_m)

    @property
    def flat(self) -> np.ndarray:
        return self.cells.ravel()

    def evidence_masks(self, offset: int = 0, unknown: str = "observe") -> dict:
        """Indicator masks for the grid's variables starting at ``offset``.

        ``unknown="observe"`` treats Unknown as the third observed value;
        ``"marginalize"`` leaves Unknown cells unconstrained.
        """
        if unknown not in ("observe", "marginalize"):
            raise SpnInputError(f"unknown-cell policy must be 'observe' or 'marginalize', got {unknown!r}")
        one_hot = np.eye(3, dtype=bool)[self.flat]
        if unknown == "marginalize":
            one_hot[self.flat == CellState.UNKNOWN] = True
        return {offset + k: one_hot[k] for k in range(CELLS_PER_PLACE)}

    def evidence(self, offset: int = 0, unknown: str = "observe") -> Evidence:
        return Evidence(self.evidence_masks(offset, unknown))

    def rotated(self, views: int) -> "PolarGrid":
        """Rotate counter-clockwise by whole 45 degree views."""
        return PolarGrid(np.roll(self.cells, views * VIEW_COLUMNS, axis=0), self.radius_m)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolarGrid):
            return NotImplemented
        return self.radius_m == other.radius_m and np.array_equal(self.cells, other.cells)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class View:
    index: int
    cells: np.ndarray

    @property
    def columns(self) -> range:
        return range(self.index * VIEW_COLUMNS, (self.index + 1) * VIEW_COLUMNS)


def split_views(grid: PolarGrid) -> List[View]:
    return [View(v, grid.cells[v * VIEW_COLUMNS:(v + 1) * VIEW_COLUMNS].copy()) for v in range(NUM_VIEWS)]


def concat_views(views: Sequence[View], radius_m: float = RADIUS_M) -> PolarGrid:
    ordered = sorted(views, key=lambda v: v.index)
    if [v.index for v in ordered] != list(range(NUM_VIEWS)):
        raise GridError("need exactly one view per index 0..7")
    return PolarGrid(np.concatenate([v.cells for v in ordered], axis=0), radius_m)


# -- cartesian -> polar -----------------------------------------------------------

def cartesian_to_polar(local_grid: np.ndarray, resolution: float, radius: float = RADIUS_M) -> PolarGrid:
    """Majority-vote polar grid from a square robot-centred metric grid.

    ``local_grid[i, j]`` covers ``x in [(j - W/2) * res, (j + 1 - W/2) * res)``
    and ``y in [(i - H/2) * res, ...)``. Every polar cell is supersampled at
    4x4 interior points; points off the source grid count as Unknown.
    """
    grid = np.asarray(local_grid)
    if grid.ndim != 2 or grid.shape[0] == 0 or grid.shape[1] == 0:
        raise GridError(f"local grid must be a nonempty 2-D array, got shape {grid.shape}")
    if resolution <= 0:
        raise GridError("resolution must be positive")
    if np.any((grid < 0) | (grid > 2)):
        raise GridError("cell codes must be 0, 1 or 2")
    edges = radial_edges(radius)
    inner_depth = edges[1] - edges[0]
    if resolution > inner_depth:
        raise GridError(f"resolution {resolution} m is coarser than the innermost band ({inner_depth:.3f} m)")

    frac = (np.arange(SUPERSAMPLING) + 0.5) / SUPERSAMPLING
    step = 2 * np.pi / ANGULAR_CELLS
    theta = (np.arange(ANGULAR_CELLS)[:, None] + frac[None, :]) * step          # (A, s)
    rho = edges[:-1, None] + frac[None, :] * np.diff(edges)[:, None]            # (R, s)
    x = rho[None, :, None, :] * np.cos(theta)[:, None, :, None]                # (A, R, s, s)
    y = rho[None, :, None, :] * np.sin(theta)[:, None, :, None]
    h, w = grid.shape
    col = np.floor(x / resolution + w / 2).astype(np.int64)
    row = np.floor(y / resolution + h / 2).astype(np.int64)
    inside = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    samples = np.full(x.shape, CellState.UNKNOWN, dtype=np.int8)
    samples[inside] = grid[row[inside], col[inside]]
    samples = samples.reshape(ANGULAR_CELLS, RADIAL_CELLS, -1)
    counts = np.stack([(samples == state).sum(axis=-1) for state in _TIE_ORDER], axis=-1)
    winner = np.asarray(_TIE_ORDER, dtype=np.int8)[np.argmax(counts, axis=-1)]
    return PolarGrid(winner, radius)


# -- grid files ------------------------------------------------------------------

def grid_to_document(grid: PolarGrid) -> PolarGridDocument:
    return PolarGridDocument(dims=(ANGULAR_CELLS, RADIAL_CELLS), radius=grid.radius_m,
                             radial_edges=[float(e) for e in radial_edges(grid.radius_m)],
                             cells=[int(c) for c in grid.flat])


def grid_from_document(doc: PolarGridDocument) -> PolarGrid:
    if doc.format != GRID_FORMAT or doc.version != GRID_VERSION:
        raise GridError(f"unsupported grid file {doc.format!r} v{doc.version}")
    if tuple(doc.dims) != (ANGULAR_CELLS, RADIAL_CELLS):
        raise GridError(f"unsupported grid dims {doc.dims}")
    return PolarGrid.from_flat(doc.cells, doc.radius)


def pack_grid(grid: PolarGrid) -> bytes:
    """``TPNGRD`` | uint8 version | uint16 angular | uint16 radial | float64 radius
    | cells at 2 bits each, cell ``k`` in bits ``2 * (k % 4)`` of byte ``k // 4``."""
    codes = grid.flat.astype(np.uint8)
    padded = np.zeros(-(-len(codes) // 4) * 4, dtype=np.uint8)
    padded[:len(codes)] = codes
    quads = padded.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    header = (GRID_MAGIC + np.array([GRID_BINARY_VERSION], "<u1").tobytes()
              + np.array([ANGULAR_CELLS, RADIAL_CELLS], "<u2").tobytes()
              + np.array([grid.radius_m], "<f8").tobytes())
    return header + packed.astype(np.uint8).tobytes()


def unpack_grid(payload: bytes) -> PolarGrid:
    head = len(GRID_MAGIC)
    if payload[:head] != GRID_MAGIC:
        raise GridError("not a packed polar grid")
    if len(payload) < head + 13:
        raise GridError("truncated grid header")
    if payload[head] != GRID_BINARY_VERSION:
        raise GridError(f"unsupported packed grid version {payload[head]}")
    dims = tuple(int(d) for d in np.frombuffer(payload[head + 1:head + 5], "<u2"))
    if dims != (ANGULAR_CELLS, RADIAL_CELLS):
        raise GridError(f"unsupported grid dims {dims}")
    radius = float(np.frombuffer(payload[head + 5:head + 13], "<f8")[0])
    body = np.frombuffer(payload[head + 13:], dtype=np.uint8)
    if len(body) * 4 < CELLS_PER_PLACE:
        raise GridError("truncated grid body")
    codes = np.stack([(body >> shift) & 3 for shift in (0, 2, 4, 6)], axis=1).ravel()[:CELLS_PER_PLACE]
    return PolarGrid.from_flat(codes, radius)


def save_grid(grid: PolarGrid, path: Union[str, Path]) -> Path:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(grid_to_document(grid).model_dump_json())
    else:
        path.write_bytes(pack_grid(grid))
    return path


def load_grid(path: Union[str, Path]) -> PolarGrid:
    path = Path(path)
    if path.suffix == ".json":
        try:
            return grid_from_document(PolarGridDocument.model_validate_json(path.read_text()))
        except ValidationError as exc:
            raise GridError(f"{path}: {exc.errors()[0]['msg']}") from exc
    return unpack_grid(path.read_bytes())


# -- the place network -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LocalPosterior:
    log_likelihoods: np.ndarray
    posterior: np.ndarray

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.posterior))


@dataclass(frozen=True, eq=False)
class PlaceModel:
    """Per-class place networks under one class-mixing root.

    Node layout: every class sub-network (views, then place-level mixture,
    then class root) precedes the root, which is the last node.
    """

    spn: Spn
    class_roots: Tuple[int, ...]
    trained: bool = False
    structure: StructureConfig = field(default_factory=StructureConfig)

    @property
    def num_classes(self) -> int:
        return len(self.class_roots)

    @property
    def annotation(self) -> LayerAnnotation:
        bottom = np.ones(self.spn.num_nodes, dtype=bool)
        bottom[self.spn.root] = False
        return LayerAnnotation(self.class_roots, bottom, bottom_trained=self.trained)


def build_place_model(num_classes: int, structure_cfg: StructureConfig = StructureConfig()) -> PlaceModel:
    """One independently drawn structure per class, sharing the indicator leaves."""
    if num_classes not in (6, 10):
        raise SpnInputError(f"class setup must be 6 or 10, got {num_classes}")
    builder = SpnBuilder(place_variables())
    indicators = {}
    m = structure_cfg.num_mixtures_per_scope
    class_roots = []
    for c in range(num_classes):
        rng = np.random.default_rng([structure_cfg.rng_seed, c])
        gen = DenseGenerator(builder, structure_cfg, rng, indicators)
        views = [gen.generate(list(view_variables(v)), m, depth=0) for v in range(NUM_VIEWS)]
        products = []
        for d in range(structure_cfg.num_decompositions_per_level):
            pairing = [np.arange(m) if d == 0 else rng.permutation(m) for _ in range(NUM_VIEWS)]
            products.extend(builder.product([views[v][pairing[v][j]] for v in range(NUM_VIEWS)])
                            for j in range(m))
        w = rng.uniform(0.5, 1.5, size=len(products))
        class_roots.append(builder.sum(products, w / w.sum()))
    root = builder.sum(class_roots, [1.0 / num_classes] * num_classes)
    spn = builder.build(root)
    check_validity(spn)
    logger.info("place model: %d classes, %d nodes, %d edges", num_classes, spn.num_nodes, spn.num_edges)
    return PlaceModel(spn, tuple(class_roots), False, structure_cfg)


def place_samples(grids: Sequence[PolarGrid], labels: Sequence[int],
                  unknown: str = "observe") -> List[LabeledSample]:
    return [LabeledSample(g.evidence(unknown=unknown), int(y)) for g, y in zip(grids, labels)]


def train_place_model(model: PlaceModel, grids: Sequence[PolarGrid], labels: Sequence[int],
                      cfg: HybridConfig = HybridConfig()) -> Tuple[PlaceModel, HybridResult]:
    """Discriminative per-class sub-networks, then the generative class-mixing root."""
    if len(grids) != len(labels) or not grids:
        raise SpnInputError("need one label per grid and at least one grid")
    annotation = replace(model.annotation, bottom_trained=False)
    result = hybrid_train(model.spn, annotation, place_samples(grids, labels), cfg)
    return replace(model, spn=result.spn, trained=True), result


def class_log_likelihoods(model: PlaceModel, grids: Sequence[PolarGrid],
                          unknown: str = "observe") -> np.ndarray:
    """``log P(X | Y = c)`` per grid and class, shape ``(len(grids), C)``."""
    if not model.trained:
        raise UntrainedModelError("place model has not been trained")
    if not grids:
        return np.zeros((0, model.num_classes))
    evidences = [g.evidence(unknown=unknown) for g in grids]
    with np.errstate(divide="ignore"):
        log_lambda = np.log(evidence_matrix(model.spn, evidences).astype(np.float64))
    values = forward(model.spn, log_lambda)
    return values[list(model.class_roots)].T.copy()


def posterior_from_log_likelihoods(ll: np.ndarray) -> np.ndarray:
    ll = np.asarray(ll, dtype=np.float64)
    if not np.any(np.isfinite(ll)):
        raise ImpossibleEvidenceError("every class gives the grid zero probability")
    return softmax(ll - logsumexp(ll))


def classify_local(model: PlaceModel, grid: PolarGrid, unknown: str = "observe") -> LocalPosterior:
    """Class posterior from local evidence with a uniform class prior."""
    ll = class_log_likelihoods(model, [grid], unknown)[0]
    return LocalPosterior(ll, posterior_from_log_likelihoods(ll))


def classify_local_batch(model: PlaceModel, grids: Sequence[PolarGrid],
                         unknown: str = "observe") -> List[LocalPosterior]:
    return [LocalPosterior(ll, posterior_from_log_likelihoods(ll))
            for ll in class_log_likelihoods(model, grids, unknown)]


# -- files -------------------------------------------------------------------------

def save_place_model(model: PlaceModel, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_spn(model.spn, directory / "place_model.spn")
    meta = {"class_roots": list(model.class_roots), "trained": model.trained,
            "structure": model.structure.__dict__}
    (directory / "place_model.json").write_text(json.dumps(meta, sort_keys=True, indent=2))
    return directory / "place_model.spn"


def load_place_model(directory: Union[str, Path]) -> PlaceModel:
    directory = Path(directory)
    meta = json.loads((directory / "place_model.json").read_text())
    spn = load_spn(directory / "place_model.spn")
    return PlaceModel(spn, tuple(meta["class_roots"]), meta["trained"],
                      StructureConfig.from_dict(meta["structure"]))
