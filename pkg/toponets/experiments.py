"""
Experiment commands: corpus generation, training, evaluation, benchmarks, swaps.

Every command is reproducible from its ``ExperimentConfig``: all
randomness comes from seeds derived from ``config.seed``. Reports embed
the resolved config; wall-clock timings go to a separate file.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from toponets.config import get_settings
from toponets.errors import ExperimentError, MapError
from toponets.inference import forward
from toponets.learn import HybridConfig, StructureConfig, write_trace
from toponets.metrics import accuracy, majority_class, roc_sweep, summarize
from toponets.models import Engine, ExperimentConfig, Task, parse_split
from toponets.mrf import BpConfig, PairwisePotential, build_mrf, learn_pairwise, loopy_bp, mrf_tasks
from toponets.place_model import build_place_model, classify_local_batch, class_log_likelihoods, train_place_model
from toponets.semmap import (GeneratorConfig, SemanticMap, corrupt_geometry, crop_map, generate_corpus,
                             generate_environment, hide_places, load_catalogue, load_corpus, load_map, save_map,
                             swap_classes)
from toponets.toponet import (ToponetConfig, ToponetModel, build_toponet, classify_places, infer_placeholders,
                              instantiate, load_toponet, map_indicators, model_digest, novelty_score,
                              read_manifest, save_toponet, train_toponet, write_manifest)

logger = logging.getLogger(__name__)

BENCH_SIZES = (105, 155)
# GPU reference timings per size; reported alongside, never checked
REFERENCE_SECONDS = {105: 0.36, 155: 0.49}
CPU_BUDGET_SECONDS = 10.0


def load_config(path: Optional[Union[str, Path]] = None, **overrides) -> ExperimentConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.model_validate(data)


def generator_config(cfg: ExperimentConfig) -> GeneratorConfig:
    data = dict(cfg.generator)
    data.setdefault("class_setup", cfg.class_setup)
    data.setdefault("rng_seed", cfg.seed)
    return GeneratorConfig.from_dict(data)


def corpus_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "corpus"


def model_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "models" / cfg.split


def report_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "reports" / cfg.split


# -- gen ---------------------------------------------------------------------------------

def cmd_gen(cfg: ExperimentConfig, force: bool = False, workers: Optional[int] = None):
    out = corpus_dir(cfg)
    if out.exists() and any(out.iterdir()) and not force:
        raise ExperimentError(f"{out} is not empty; pass --force to overwrite")
    workers = workers or get_settings().workers
    return generate_corpus(generator_config(cfg), out, cfg.floors, workers=workers)


# -- train ---------------------------------------------------------------------------------

def split_maps(cfg: ExperimentConfig, maps: Dict[int, SemanticMap]) -> Tuple[List[SemanticMap], List[SemanticMap]]:
    train_floors, test_floors = parse_split(cfg.split)
    for floor in train_floors + test_floors:
        if floor not in maps:
            raise ExperimentError(f"floor {floor} of split {cfg.split!r} is not in the corpus")
    for floor, semantic_map in maps.items():
        if semantic_map.catalogue.setup != cfg.class_setup:
            raise ExperimentError(f"floor {floor} uses the {semantic_map.class_set} setup, "
                                  f"config asks for {cfg.class_setup}")
    return [maps[f] for f in train_floors], [maps[f] for f in test_floors]


def cmd_train(cfg: ExperimentConfig, corpus: Optional[Path] = None, output: Optional[Path] = None) -> Path:
    """Place network, template networks and pairwise potentials for the training floors."""
    _, maps = load_corpus(corpus or corpus_dir(cfg))
    train_maps, _ = split_maps(cfg, maps)
    out = Path(output or model_dir(cfg))
    out.mkdir(parents=True, exist_ok=True)
    training = dict(cfg.training)
    structure = StructureConfig.from_dict({"rng_seed": cfg.seed, **cfg.structure})
    place_cfg = HybridConfig.from_dict(training.get("place"))
    toponet_cfg = ToponetConfig.from_dict({"seed": cfg.seed, **training.get("toponet", {})})

    grids = [m.geometry[p] for m in train_maps for p in m.places]
    labels = [m.labels[p] for m in train_maps for p in m.places]
    place_model, history = train_place_model(build_place_model(cfg.class_setup, structure), grids, labels, place_cfg)
    write_trace(history.warm_start_trace, out / "place_warm_start.csv")
    write_trace(history.discriminative_trace, out / "place_discriminative.csv")
    write_trace(history.generative_trace, out / "place_generative.csv")

    catalogue = load_catalogue(cfg.class_setup)
    model = build_toponet(place_model, catalogue.names, cfg=toponet_cfg)
    model = train_toponet(model, train_maps, toponet_cfg)
    pairwise = learn_pairwise(train_maps, catalogue.num_classes, training.get("pairwise_smoothing", 1.0))
    manifest = save_toponet(model, out)
    manifest.pairwise = pairwise.matrix.tolist()
    write_manifest(manifest, out)
    logger.info("models for split %s written to %s (digest %s)", cfg.split, out, model_digest(out)[:12])
    return out


# -- eval ----------------------------------------------------------------------------------

class Engines:
    """Trained models behind the three engines."""

    def __init__(self, model: ToponetModel, pairwise: Optional[PairwisePotential], bp: BpConfig):
        self.model = model
        self.pairwise = pairwise
        self.bp = bp

    @classmethod
    def load(cls, directory: Path, bp: BpConfig = BpConfig()) -> "Engines":
        manifest = read_manifest(directory)
        pairwise = PairwisePotential(np.array(manifest.pairwise)) if manifest.pairwise else None
        return cls(load_toponet(directory), pairwise, bp)

    @property
    def place_model(self):
        return self.model.place_model

    def check(self, engine: Engine, cfg: ExperimentConfig):
        if self.model.num_classes != cfg.class_setup:
            raise ExperimentError(f"models use {self.model.num_classes} classes, config asks for {cfg.class_setup}")
        if engine == Engine.MRF and self.pairwise is None:
            raise ExperimentError("the mrf engine needs pairwise potentials in the model manifest")

    def classify(self, engine: Engine, semantic_map: SemanticMap, cfg: ExperimentConfig, seed: int) -> Dict[int, int]:
        if engine == Engine.LOCAL:
            posteriors = classify_local_batch(self.place_model, [semantic_map.geometry[p] for p in semantic_map.places])
            return {p: post.predicted for p, post in zip(semantic_map.places, posteriors)}
        if engine == Engine.MRF:
            outputs = self._mrf(semantic_map)
            return {n: p.mpe_class for n, p in outputs.classification.items()}
        inst = instantiate(self.model, semantic_map, cfg.n_decompositions, seed)
        return {n: p.mpe_class for n, p in classify_places(inst, semantic_map).items()}

    def placeholders(self, engine: Engine, semantic_map: SemanticMap, cfg: ExperimentConfig, seed: int,
                     majority: int) -> Dict[int, int]:
        if engine == Engine.LOCAL:
            return {n: majority for n in semantic_map.placeholders}
        if engine == Engine.MRF:
            outputs = self._mrf(semantic_map)
            return {n: p.mpe_class for n, p in outputs.placeholders.items()}
        inst = instantiate(self.model, semantic_map, cfg.n_decompositions, seed)
        return {n: p.mpe_class for n, p in infer_placeholders(inst, semantic_map).items()}

    def novelty(self, engine: Engine, semantic_map: SemanticMap, cfg: ExperimentConfig, seed: int) -> float:
        if engine == Engine.LOCAL:
            ll = class_log_likelihoods(self.place_model, [semantic_map.geometry[p] for p in semantic_map.places])
            per_place = np.logaddexp.reduce(ll, axis=1) - np.log(ll.shape[1])
            return float(per_place.mean())
        if engine == Engine.MRF:
            return self._mrf(semantic_map).novelty.per_place_ll
        inst = instantiate(self.model, semantic_map, cfg.n_decompositions, seed)
        return novelty_score(inst, semantic_map).per_place_ll

    def _mrf(self, semantic_map: SemanticMap):
        mrf = build_mrf(semantic_map, self.place_model, self.pairwise)
        return mrf_tasks(mrf, loopy_bp(mrf, self.bp), semantic_map)


def _class_pairs(semantic_map: SemanticMap, count: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
    present = sorted({semantic_map.labels[p] for p in semantic_map.places})
    if len(present) < 2:
        raise ExperimentError("a swap needs at least two classes in the map")
    return [tuple(int(c) for c in rng.choice(present, size=2, replace=False)) for _ in range(count)]


def _parallel(fn, items: Sequence, workers: int) -> List:
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def evaluate_maps(engines: Engines, test_maps: Sequence[SemanticMap], train_maps: Sequence[SemanticMap],
                  cfg: ExperimentConfig, tasks: Sequence[Task], engine_list: Sequence[Engine],
                  workers: int = 1) -> Tuple[pd.DataFrame, Dict[str, dict], Dict[str, float]]:
    """Accuracy records per (engine, task, map), ROC per engine and timings."""
    majority = majority_class(m.labels[p] for m in train_maps for p in m.places)
    records, roc, timings = [], {}, {}
    for engine in engine_list:
        engines.check(engine, cfg)
        started = time.perf_counter()
        if Task.CLASSIFY in tasks:
            def run_classify(args):
                k, semantic_map = args
                corrupted, _ = corrupt_geometry(semantic_map, cfg.corruption, cfg.seed + k)
                return accuracy(engines.classify(engine, corrupted, cfg, cfg.seed + k), corrupted.labels)
            for k, acc in enumerate(_parallel(run_classify, list(enumerate(test_maps)), workers)):
                records.append({"engine": engine.value, "task": Task.CLASSIFY.value, "map": k, "accuracy": acc})
        if Task.PLACEHOLDERS in tasks:
            def run_placeholders(args):
                k, semantic_map = args
                hidden = hide_places(semantic_map, cfg.placeholders, cfg.seed + k)
                predicted = engines.placeholders(engine, hidden, cfg, cfg.seed + k, majority)
                return accuracy(predicted, hidden.labels), accuracy({n: majority for n in predicted}, hidden.labels)
            for k, (acc, base) in enumerate(_parallel(run_placeholders, list(enumerate(test_maps)), workers)):
                records.append({"engine": engine.value, "task": Task.PLACEHOLDERS.value, "map": k, "accuracy": acc})
                records.append({"engine": "majority", "task": Task.PLACEHOLDERS.value, "map": k, "accuracy": base})
        if Task.NOVELTY in tasks:
            pairs = []
            rng = np.random.default_rng(cfg.seed)
            for k, semantic_map in enumerate(test_maps):
                for i, (a, b) in enumerate(_class_pairs(semantic_map, cfg.swap_count, rng)):
                    size = int(rng.integers(max(2, semantic_map.num_places // 2), semantic_map.num_places + 1))
                    known = crop_map(semantic_map, size, cfg.seed + 1000 * k + i)
                    try:
                        novel = swap_classes(known, a, b)
                    except MapError:
                        novel = swap_classes(semantic_map, a, b)
                        known = semantic_map
                    pairs.append((known, novel))
            flat = [m for pair in pairs for m in pair]
            scores = _parallel(lambda m: engines.novelty(engine, m, cfg, cfg.seed), flat, workers)
            known_scores, novel_scores = scores[0::2], scores[1::2]
            curve = roc_sweep(known_scores, novel_scores)
            roc[engine.value] = {
                "auc": curve.auc,
                "points": curve.points(),
                "known": known_scores,
                "novel": novel_scores,
                "paired_lower": float(np.mean(np.asarray(novel_scores) < np.asarray(known_scores))),
            }
            if engine == Engine.MRF:
                roc[engine.value]["note"] = "Bethe approximation of log Z"
        timings[engine.value] = time.perf_counter() - started
    # majority rows repeat per engine; keep one copy
    frame = pd.DataFrame(records, columns=["engine", "task", "map", "accuracy"]).drop_duplicates()
    return frame.reset_index(drop=True), roc, timings


def cmd_eval(cfg: ExperimentConfig, task: Task = Task.ALL, engine: Optional[Engine] = None,
             corpus: Optional[Path] = None, models: Optional[Path] = None,
             output: Optional[Path] = None, workers: Optional[int] = None) -> dict:
    """Run the selected engines on the test floors; writes ``report.json`` and ``report.csv``."""
    _, maps = load_corpus(corpus or corpus_dir(cfg))
    train_maps, test_maps = split_maps(cfg, maps)
    engines = Engines.load(Path(models or model_dir(cfg)))
    tasks = [Task.CLASSIFY, Task.PLACEHOLDERS, Task.NOVELTY] if task == Task.ALL else [task]
    engine_list = [engine] if engine else [Engine.TOPONET, Engine.MRF, Engine.LOCAL]
    records, roc, timings = evaluate_maps(engines, test_maps, train_maps, cfg, tasks, engine_list,
                                          workers or get_settings().workers)
    table = summarize(records.dropna(subset=["accuracy"]))
    report = {
        "config": cfg.model_dump(mode="json"),
        "split": cfg.split,
        "tables": table.to_dict(orient="records"),
        "records": records.to_dict(orient="records"),
        "roc": roc,
    }
    out = Path(output or report_dir(cfg))
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=float))
    table.to_csv(out / "report.csv", index=False, float_format="%.6f")
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
    return report


# -- bench ---------------------------------------------------------------------------------

def bench_map(cfg: ExperimentConfig, size: int, seed: int) -> SemanticMap:
    """A generated map cropped to exactly ``size`` places."""
    rooms = max(1, size // 2)
    gen = replace(generator_config(cfg), rooms_per_floor=(rooms, rooms + 10))
    for attempt in range(20):
        semantic_map = generate_environment(gen, floor=1000 + attempt)
        if semantic_map.num_places >= size:
            return crop_map(semantic_map, size, seed)
    raise ExperimentError(f"could not generate a map with {size} places")


def cmd_bench(cfg: ExperimentConfig, models: Optional[Path] = None, sizes: Sequence[int] = BENCH_SIZES,
              repeats: int = 10, output: Optional[Path] = None) -> dict:
    """Median wall time of instantiate plus one full evaluation per map size."""
    model = load_toponet(Path(models or model_dir(cfg)))
    results = []
    for size in sizes:
        semantic_map = bench_map(cfg, size, cfg.seed)
        times = []
        for r in range(repeats):
            started = time.perf_counter()
            inst = instantiate(model, semantic_map, cfg.n_decompositions, cfg.seed + r)
            forward(inst.spn, map_indicators(inst, semantic_map))
            times.append(time.perf_counter() - started)
        median = float(np.median(times))
        results.append({
            "size": size,
            "n_decompositions": cfg.n_decompositions,
            "median_seconds": median,
            "times": times,
            "within_budget": median <= CPU_BUDGET_SECONDS,
            "budget_seconds": CPU_BUDGET_SECONDS,
            "reference_seconds": REFERENCE_SECONDS.get(size),
        })
        logger.info("bench %d places: median %.3fs over %d runs", size, median, repeats)
    report = {"config": cfg.model_dump(mode="json"), "sizes": results}
    out = Path(output or report_dir(cfg))
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


# -- swap ----------------------------------------------------------------------------------

def resolve_class(semantic_map: SemanticMap, value: Union[int, str]) -> int:
    if isinstance(value, int) or str(value).isdigit():
        return int(value)
    return semantic_map.catalogue.index(str(value))


def cmd_swap(map_path: Path, class_a: Union[int, str], class_b: Union[int, str], output: Path) -> Path:
    semantic_map = load_map(map_path)
    swapped = swap_classes(semantic_map, resolve_class(semantic_map, class_a), resolve_class(semantic_map, class_b))
    return save_map(swapped, output)
