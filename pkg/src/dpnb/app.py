"""
Main application entry point for dpnb.

This module contains the command-line entry point: argument parsing,
logging setup, and the ``ingest``, ``train``, ``evaluate``, ``sweep`` and
``export-similarity`` subcommands.
"""

import argparse
import asyncio
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from . import __version__
from .config import (
    DatasetConfig,
    RunConfig,
    apply_overrides,
    read_config_document,
    save_config,
    validate_config,
)
from .services.core import SimilarityMatrix, denominator_profile, train_rmse
from .services.errors import ConfigurationError, DpnbError
from .services.evaluation import (
    EvalReport,
    build_cells,
    expand_sweep,
    fit_model,
    run_cells,
    run_cv_async,
)
from .services.ingest import parse_movielens, preprocess
from .services.run_logger import log_run_transcript
from .services.storage import StorageService
from .utils.seeding import SeedStreams


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

console = Console()


def setup_logging(debug: bool = False) -> None:
    """Rich console logging on stderr; DEBUG with ``--debug``."""
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def attach_log_file(run_dir: Path) -> None:
    """Also write the full log to ``dpnb.log`` in the run directory."""
    handler = logging.FileHandler(Path(run_dir) / "dpnb.log", mode="w")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)


def resolve_threads(flag: Optional[int], configured: Optional[int]) -> int:
    """Parallelism degree: flag, then ``DPNB_THREADS``, then config, then CPU count."""
    if flag is not None:
        return flag
    env = os.environ.get("DPNB_THREADS")
    if env:
        try:
            threads = int(env)
        except ValueError:
            raise ConfigurationError(f"DPNB_THREADS must be an integer, got '{env}'")
        if threads < 1:
            raise ConfigurationError(f"DPNB_THREADS must be positive, got {threads}")
        return threads
    return configured or os.cpu_count() or 1


def _csv_list(kind: type) -> Any:
    def parse(text: str) -> List[Any]:
        return [kind(part) for part in text.split(",") if part.strip()]

    return parse


def setup_argument_parser() -> argparse.ArgumentParser:
    """Set up command-line argument parser."""
    parser = argparse.ArgumentParser(
        prog="dpnb",
        description="dpnb - differentially private neighborhood-based recommenders",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  dpnb ingest u.data --format ml100k --out data/ml100k
  dpnb train --data data/ml100k --model dpsgd-pnbm --epsilon 1
  dpnb evaluate --config runs.toml --seeds 0,1,2
  dpnb sweep --config sweep.toml --resume
  dpnb export-similarity runs/dpsgd-pnbm-abc/similarity.bin out.csv --top-n 100
        """,
    )
    parser.add_argument("--debug", "-d", action="store_true", help="Enable debug logging")
    parser.add_argument("--version", "-v", action="version", version=f"dpnb {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    ingest = subparsers.add_parser("ingest", help="Preprocess a MovieLens file into a dataset cache")
    ingest.add_argument("path", type=Path, help="Ratings file (u.data or ratings.dat)")
    ingest.add_argument("--format", choices=["ml100k", "ml1m"], default="ml100k")
    ingest.add_argument("--min-ratings", type=int, default=20, help="Drop users with fewer ratings")
    ingest.add_argument("--tau", type=int, default=200, help="Cap on ratings per user")
    ingest.add_argument("--seed", type=int, default=0, help="Root seed of the subsampling")
    ingest.add_argument("--out", type=Path, required=True, help="Dataset cache directory")

    for name, help_text in (
        ("train", "Train one model on the full dataset"),
        ("evaluate", "Cross-validate one model"),
        ("sweep", "Cross-validate a grid of models and budgets"),
    ):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", "-c", type=Path, help="Run configuration (JSON or TOML)")
        sub.add_argument("--data", type=Path, help="Dataset cache directory or ratings file")
        sub.add_argument("--format", choices=["ml100k", "ml1m", "cache"], help="Format of --data")
        sub.add_argument("--model", "-m", help="Model name (overrides config)")
        sub.add_argument("--epsilon", type=float, help="Privacy budget (private models only)")
        sub.add_argument("--seeds", type=_csv_list(int), help="Comma-separated root seeds")
        sub.add_argument("--output", "-o", type=Path, help="Parent directory of run directories")
        if name != "train":
            sub.add_argument("--folds", type=int, help="Fold count k")
            sub.add_argument("--threads", "-j", type=int, help="Parallel workers")
            sub.add_argument("--neighbor-limits", type=_csv_list(int), help="Comma-separated top-N values")
        if name == "train":
            sub.add_argument("--top-n", type=int, help="Also export a CSV of each row's top-N entries")
        if name == "evaluate":
            sub.add_argument(
                "--profile-denominators",
                action="store_true",
                help="Report the distribution of prediction denominators instead of cross-validating",
            )
            sub.add_argument("--similarity", type=Path, help="Similarity file to profile")
        if name == "sweep":
            sub.add_argument("--models", type=_csv_list(str), help="Comma-separated model names")
            sub.add_argument("--epsilons", type=_csv_list(float), help="Budgets for the sweep")
            sub.add_argument(
                "--epsilon-per-rating", type=_csv_list(float), help="DPPS budgets as multiples of tau"
            )
            sub.add_argument("--resume", action="store_true", help="Skip cells finished by an earlier run")

    export = subparsers.add_parser("export-similarity", help="Convert or truncate a similarity file")
    export.add_argument("input", type=Path, help="Similarity file (.bin or CSV triples)")
    export.add_argument("output", type=Path, help="Destination (.bin or .csv)")
    export.add_argument("--top-n", type=int, help="Keep each row's N largest |s_ij|")
    export.add_argument("--symmetrize", action="store_true", help="Average S with its transpose")
    export.add_argument("--items", type=int, help="Item count M when reading CSV triples")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Configuration file first, then command-line overrides."""
    document: Dict[str, Any] = read_config_document(args.config) if args.config else {}
    overrides: Dict[str, Any] = {}
    if args.data is not None:
        overrides["dataset.path"] = str(args.data)
        overrides["dataset.format"] = args.format or ("cache" if args.data.is_dir() else "ml100k")
    elif args.format is not None:
        overrides["dataset.format"] = args.format
    if args.model is not None:
        overrides["model.name"] = args.model
    if args.epsilon is not None:
        overrides["privacy"] = args.epsilon
    if args.seeds is not None:
        overrides["cv.seeds"] = args.seeds
    if getattr(args, "folds", None) is not None:
        overrides["cv.k"] = args.folds
    if args.output is not None:
        overrides["output.directory"] = str(args.output)
    if args.debug:
        overrides["debug"] = True
    for flag, key in (("models", "models"), ("epsilons", "epsilons"), ("epsilon_per_rating", "epsilon_per_rating")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[f"sweep.{key}"] = value
    if getattr(args, "neighbor_limits", None) is not None:
        section = "sweep" if args.command == "sweep" else "cv"
        overrides[f"{section}.neighbor_limits"] = args.neighbor_limits
    return validate_config(apply_overrides(document, overrides))


async def load_run_dataset(config: RunConfig, storage: StorageService) -> Any:
    """Dataset of a run: a cache directory, or a raw MovieLens file preprocessed on the fly."""
    dataset = config.dataset
    if dataset.format == "cache":
        return await storage.load_dataset(dataset.path)
    records = parse_movielens(dataset.path, dataset.format)
    seed = SeedStreams(config.cv.seeds[0]).child_seed("ingest")
    return preprocess(records, dataset.min_ratings, dataset.tau, seed=seed)


def print_summary(title: str, rows: Dict[str, Any]) -> None:
    table = Table(title=title, show_header=False)
    table.add_column("key", style="bold")
    table.add_column("value")
    for key, value in rows.items():
        table.add_row(key, f"{value:g}" if isinstance(value, float) else str(value))
    console.print(table)


def print_frame(title: str, frame: pd.DataFrame) -> None:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column))
    for row in frame.itertuples(index=False):
        table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
    console.print(table)


async def cmd_ingest(args: argparse.Namespace) -> int:
    DatasetConfig(format=args.format, path=args.path, min_ratings=args.min_ratings, tau=args.tau)
    records = parse_movielens(args.path, args.format)
    seed = SeedStreams(args.seed).child_seed("ingest")
    data = preprocess(records, args.min_ratings, args.tau, seed=seed)
    storage = StorageService(args.out)
    await storage.save_dataset(data, args.out, args.seed, args.min_ratings)
    print_summary(
        f"Dataset cache {args.out}",
        {
            "N (users)": data.n_users,
            "M (items)": data.n_items,
            "ratings": data.n_ratings,
            "phi": data.phi,
            "r_min": data.rating_scale[0],
            "r_max": data.rating_scale[1],
            "tau": args.tau,
        },
    )
    return EXIT_OK


async def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    model = config.effective_model()
    storage = StorageService(config.output.directory)
    run_dir = storage.run_dir(config)
    attach_log_file(run_dir)
    save_config(config, run_dir)

    data = await load_run_dataset(config, storage)
    seed = config.cv.seeds[0]
    trained = fit_model(data, model, seed)

    await storage.export_similarity(trained.similarity, run_dir / "similarity.bin")
    if args.top_n is not None:
        await storage.export_similarity(trained.similarity, run_dir / "similarity.csv", top_n=args.top_n)

    fit_rmse = train_rmse(trained.similarity, data)
    record: Dict[str, Any] = {
        "model": model.name,
        "epsilon": model.epsilon,
        "seed": seed,
        "dataset": data.summary(),
        "dataset_fingerprint": data.fingerprint(),
        "train_rmse": fit_rmse,
        "wall_time_s": trained.wall_time_s,
        "privacy": trained.run_record or None,
    }
    await storage.save_json(run_dir / "run.json", record)
    if "ledger" in trained.run_record:
        await storage.save_frame(run_dir / "ledger.csv", pd.DataFrame(trained.run_record["ledger"]))
    log_run_transcript(
        run_dir,
        model.name,
        config.model_dump(mode="json"),
        data.summary(),
        trained.run_record or None,
        {"train_rmse": fit_rmse, "wall_time_s": trained.wall_time_s},
    )

    summary: Dict[str, Any] = {"run directory": run_dir, "train RMSE": fit_rmse}
    if trained.run_record:
        summary["granularity"] = trained.run_record["granularity"]
        if "drift_scale" in trained.run_record:
            summary["B"] = trained.run_record["B"]
            summary["epsilon/4B"] = trained.run_record["drift_scale"]
        summary["statement"] = trained.run_record["statement"]
    print_summary(f"Trained {model.name}", summary)
    return EXIT_OK


async def _profile_denominators(args: argparse.Namespace, config: RunConfig, storage: StorageService) -> int:
    data = await load_run_dataset(config, storage)
    if args.similarity is not None:
        S = await storage.load_similarity(args.similarity, data.n_items)
    else:
        beta = config.model.dpsgd.rescale
        initial = SimilarityMatrix.initialize(
            data.n_items, SeedStreams(config.cv.seeds[0]).generator("init", "full")
        )
        S = SimilarityMatrix(initial.values * beta, beta=beta)
    denominators, summary = denominator_profile(S, data)
    floor = config.model.dpsgd.denominator_floor
    summary["below_floor_fraction"] = float(np.mean(denominators < floor)) if len(denominators) else 0.0
    run_dir = storage.run_dir(config, prefix="profile")
    await storage.save_json(run_dir / "denominators.json", {"floor": floor, "summary": summary})
    print_summary(f"Prediction denominators (C = {floor:g})", summary)
    return EXIT_OK


async def cmd_evaluate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    storage = StorageService(config.output.directory)
    if args.profile_denominators:
        return await _profile_denominators(args, config, storage)

    model = config.effective_model()
    run_dir = storage.run_dir(config)
    attach_log_file(run_dir)
    save_config(config, run_dir)
    data = await load_run_dataset(config, storage)
    threads = resolve_threads(args.threads, config.threads)

    report = await run_cv_async(
        data, model, config.cv.k, config.cv.seeds, config.cv.neighbor_limits or None, threads
    )
    await storage.save_report(report, run_dir, data.max_ratings_per_user, config.output.record_timing)
    print_frame(f"{model.name}: {config.cv.k}-fold CV, {len(config.cv.seeds)} seeds", report.aggregates())
    return EXIT_OK


async def cmd_sweep(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    if config.sweep is None:
        raise ConfigurationError("sweep needs a [sweep] section or --models")
    storage = StorageService(config.output.directory)
    run_dir = storage.run_dir(config, prefix="sweep")
    attach_log_file(run_dir)
    save_config(config, run_dir)
    data = await load_run_dataset(config, storage)
    threads = resolve_threads(args.threads, config.threads)

    models = expand_sweep(config.model, config.sweep, data.max_ratings_per_user)
    cells = [
        cell
        for model in models
        for cell in build_cells(model, config.cv.k, config.cv.seeds, config.sweep.neighbor_limits)
    ]
    finished: Dict[str, Any] = {}
    if args.resume:
        for cell in cells:
            rows = await storage.load_cell(run_dir, cell.key())
            if rows is not None:
                finished[cell.key()] = rows
        logger.info(f"Resuming sweep: {len(finished)} of {len(cells)} cells already finished")
    pending = [cell for cell in cells if cell.key() not in finished]

    async def store(cell: Any, outcome: Any) -> None:
        if not isinstance(outcome, BaseException):
            await storage.save_cell(run_dir, cell.key(), outcome)

    outcomes = await run_cells(data, pending, threads, on_done=store)
    for cell, outcome in zip(pending, outcomes):
        finished[cell.key()] = outcome

    report = EvalReport()
    failures = []
    for cell in cells:
        outcome = finished[cell.key()]
        if isinstance(outcome, BaseException):
            failures.append((cell, outcome))
        else:
            report.extend(outcome)

    await storage.save_report(report, run_dir, data.max_ratings_per_user, config.output.record_timing)
    if failures:
        await storage.save_json(
            run_dir / "failures.json",
            [{"cell": cell.describe(), "error": str(error)} for cell, error in failures],
        )
        logger.error(f"{len(failures)} of {len(cells)} cells failed, see {run_dir / 'failures.json'}")
    else:
        report.check_complete(config.cv.k, len(config.cv.seeds))
    print_frame(f"Sweep over {len(models)} model configurations", report.aggregates())
    return EXIT_FAILURE if failures else EXIT_OK


async def cmd_export_similarity(args: argparse.Namespace) -> int:
    storage = StorageService(args.output.parent)
    S = await storage.load_similarity(args.input, args.items)
    await storage.export_similarity(S, args.output, top_n=args.top_n, symmetrize=args.symmetrize)
    print_summary("Exported similarity", {"input": args.input, "output": args.output, "M": S.n_items})
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "export-similarity": cmd_export_similarity,
}


async def async_main(args: argparse.Namespace) -> int:
    """Async main function; maps errors onto exit codes."""
    try:
        return await COMMANDS[args.command](args)
    except (ValidationError, ConfigurationError, FileNotFoundError) as e:
        logger.error(f"Configuration error: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DpnbError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        if args.debug:
            import traceback

            traceback.print_exc()
        return EXIT_FAILURE


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    parser = setup_argument_parser()
    args = parser.parse_args(argv)
    setup_logging(args.debug)

    try:
        return asyncio.run(async_main(args))
    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
