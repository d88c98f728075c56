"""
Command-line surface: ``gen``, ``train``, ``eval``, ``bench``, ``swap``, ``serve``.

Output verbosity follows ``TOPONETS_LOG_LEVEL``. Exit code 0 only on full success.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from toponets.config import configure_logging, get_settings
from toponets.errors import TopoNetsError
from toponets.experiments import cmd_bench, cmd_eval, cmd_gen, cmd_swap, cmd_train, load_config
from toponets.models import Engine, Task

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="experiment config JSON (default: built-in defaults)")
    parser.add_argument("--split", help='leave-one-floor-out split, e.g. "456-7" (default: 456-7)')
    parser.add_argument("--class-setup", type=int, choices=(6, 10), help="number of classes (default: 6)")
    parser.add_argument("--seed", type=int, help="master seed (default: TOPONETS_SEED or 0)")
    parser.add_argument("--output-dir", help="run directory (default: runs)")
    parser.add_argument("-n", "--n-decompositions", type=int, help="decompositions per map (default: 40)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toponets", description="Topological semantic mapping with SPNs")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic multi-floor corpus")
    _common(gen)
    gen.add_argument("--force", action="store_true", help="overwrite a non-empty corpus directory")
    gen.add_argument("--workers", type=int, help="generator threads (default: TOPONETS_WORKERS)")

    train = sub.add_parser("train", help="train place, template and pairwise models for one split")
    _common(train)
    train.add_argument("--corpus", type=Path, help="corpus directory (default: <output-dir>/corpus)")
    train.add_argument("--models", type=Path, help="model directory (default: <output-dir>/models/<split>)")

    ev = sub.add_parser("eval", help="run the inference tasks on the test floor")
    _common(ev)
    ev.add_argument("--task", choices=[t.value for t in Task], default=Task.ALL.value)
    ev.add_argument("--engine", choices=[e.value for e in Engine], help="single engine (default: all three)")
    ev.add_argument("--corpus", type=Path)
    ev.add_argument("--models", type=Path)
    ev.add_argument("--report", type=Path, help="report directory (default: <output-dir>/reports/<split>)")
    ev.add_argument("--workers", type=int, help="per-map threads (default: TOPONETS_WORKERS)")

    bench = sub.add_parser("bench", help="time instantiation plus one evaluation")
    _common(bench)
    bench.add_argument("--models", type=Path)
    bench.add_argument("--sizes", type=int, nargs="+", default=[105, 155], help="map sizes (default: 105 155)")
    bench.add_argument("--repeats", type=int, default=10, help="runs per size (default: 10)")
    bench.add_argument("--report", type=Path)

    swap = sub.add_parser("swap", help="exchange the geometry of two classes in a map file")
    swap.add_argument("map", type=Path)
    swap.add_argument("class_a", help="class name or index")
    swap.add_argument("class_b", help="class name or index")
    swap.add_argument("-o", "--output", type=Path, required=True)

    serve = sub.add_parser("serve", help="run the HTTP inference service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _config(args):
    return load_config(
        args.config,
        split=args.split,
        class_setup=args.class_setup,
        seed=args.seed if args.seed is not None else (None if args.config else get_settings().seed),
        output_dir=args.output_dir,
        n_decompositions=args.n_decompositions,
    )


def run(args) -> int:
    if args.command == "serve":
        import uvicorn
        uvicorn.run("toponets.main:app", host=args.host, port=args.port)
        return EXIT_OK
    if args.command == "swap":
        out = cmd_swap(args.map, args.class_a, args.class_b, args.output)
        print(f"✅ swapped map written to {out}")
        return EXIT_OK

    cfg = _config(args)
    if args.command == "gen":
        manifest = cmd_gen(cfg, force=args.force, workers=args.workers)
        print(f"✅ {len(manifest.maps)} floors generated, splits: {', '.join(manifest.splits)}")
    elif args.command == "train":
        out = cmd_train(cfg, args.corpus, args.models)
        print(f"✅ models for split {cfg.split} written to {out}")
    elif args.command == "eval":
        report = cmd_eval(cfg, Task(args.task), Engine(args.engine) if args.engine else None,
                          args.corpus, args.models, args.report, args.workers)
        for row in report["tables"]:
            print(f"📊 {row['engine']:>8} {row['task']:<13} {100 * row['mean']:6.2f}% ± {100 * row['std']:.2f}")
        for engine, roc in report["roc"].items():
            print(f"📈 {engine:>8} novelty AUC {roc['auc']:.3f}")
    elif args.command == "bench":
        report = cmd_bench(cfg, args.models, args.sizes, args.repeats, args.report)
        status = EXIT_OK
        for row in report["sizes"]:
            mark = "✅" if row["within_budget"] else "⚠️ "
            print(f"{mark} {row['size']} places: median {row['median_seconds']:.3f}s "
                  f"(budget {row['budget_seconds']:.0f}s)")
            if not row["within_budget"]:
                status = EXIT_FAILURE
        return status
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except ValidationError as exc:
        error = exc.errors()[0]
        print(f"❌ bad config: {error['msg']} at {'.'.join(str(p) for p in error['loc'])}")
        return EXIT_USAGE
    except TopoNetsError as exc:
        print(f"❌ {exc}")
        return EXIT_FAILURE
    except KeyboardInterrupt:
        print("\n⚠️  interrupted")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
