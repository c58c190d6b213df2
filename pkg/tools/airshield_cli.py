#!/usr/bin/env python3
"""
AirShield CLI
=============

Runs the poisoning / detection / explanation experiment stage by stage or
end to end. Every stage reads the artifacts of earlier stages from the run
directory (--out) and writes its own there.

Usage:
    python tools/airshield_cli.py [--verbose] <command> [--config FILE] [--seed N] [--out DIR]

Examples:
    # Whole offline pipeline with the reference settings
    python tools/airshield_cli.py run-experiment --config configs/reference_experiment.json

    # Stage by stage into one run directory
    python tools/airshield_cli.py emulate --config configs/offline_quick.json --out runs/quick
    python tools/airshield_cli.py train-regressor --config configs/offline_quick.json --out runs/quick
    python tools/airshield_cli.py attack --config configs/offline_quick.json --out runs/quick

    # LLM verdicts against a chat-completions endpoint (key from AIRSHIELD_API_KEY)
    python tools/airshield_cli.py classify-llm --backend remote --out runs/quick

Exit codes: 0 on success, 2 for configuration errors, 10-18 for the failing
stage (emulate 10 ... explain 18), 1 for anything unexpected.
"""

import logging
import os
import sys
from pathlib import Path
from typing import Callable, Optional

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.core.errors import AirShieldError, ConfigError  # noqa: E402
from src.core.pipeline import ExperimentRun, run_experiment  # noqa: E402
from src.utils.config import ExperimentConfig, GatewayConfig, load_environment, load_experiment_config  # noqa: E402

console = Console()
logger = logging.getLogger("airshield")


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=verbose, show_path=verbose)],
        force=True,
    )


def _load_config(config_path: Optional[str], seed: Optional[int], backend: Optional[str] = None) -> ExperimentConfig:
    load_environment()
    config = load_experiment_config(config_path) if config_path else ExperimentConfig()
    if seed is not None:
        config = config.with_master_seed(seed)
    if backend is not None:
        gateway = config.gateway or GatewayConfig()
        config = config.model_copy(update={"gateway": gateway.model_copy(update={"backend": backend})})
    return config


def _execute(action: Callable[[], object]) -> object:
    """Run a command body, mapping errors to exit codes"""
    try:
        return action()
    except AirShieldError as e:
        console.print(f"[bold red]❌ {e}[/bold red] (code: {e.code})")
        sys.exit(e.exit_code)
    except Exception as e:  # noqa: BLE001
        logger.exception(f"❌ Unexpected failure: {e}")
        sys.exit(1)


def _run(config_path, seed, out, backend=None) -> ExperimentRun:
    try:
        config = _load_config(config_path, seed, backend)
    except ConfigError as e:
        console.print(f"[bold red]❌ {e}[/bold red]")
        sys.exit(e.exit_code)
    return ExperimentRun(config, out)


def _metrics_table(title: str, rows) -> Table:
    table = Table(title=title)
    table.add_column("source")
    for column in ("Precision", "Recall", "F1-score"):
        table.add_column(column, justify="right")
    for source, metrics in rows:
        table.add_row(source, f"{metrics['macro_precision']:.4f}", f"{metrics['macro_recall']:.4f}", f"{metrics['macro_f1']:.4f}")
    return table


def common_options(func):
    func = click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory (defaults to report_dir from the config)")(func)
    func = click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Override the master seed")(func)
    func = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Experiment config (JSON)")(func)
    return func


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def cli(verbose: bool):
    """AirShield: FGSM poisoning, detection and LLM explanation of wireless telemetry"""
    _configure_logging(verbose)


@cli.command()
@common_options
def emulate(config_path, seed, out):
    """Generate the synthetic scene (records.csv)"""
    run = _run(config_path, seed, out)
    records = _execute(run.emulate)
    console.print(f"✅ {len(records)} records -> {run.path('records.csv')}")


@cli.command("train-regressor")
@common_options
def train_regressor(config_path, seed, out):
    """Fit the path-loss regressor (regressor.json)"""
    run = _run(config_path, seed, out)
    _execute(run.train_regressor)
    metrics = run.sections["regression"]
    console.print(f"✅ {metrics['family']} regressor: test MSE {metrics['test']['mse']:.4g}, R² {metrics['test']['r_squared']:.4f}")


@cli.command()
@common_options
def attack(config_path, seed, out):
    """Poison the records with FGSM (labeled.csv, degradation.json)"""
    run = _run(config_path, seed, out)
    _execute(run.attack)
    report = run.sections["degradation"]
    table = Table(title="Degradation (fixed model)")
    for column in ("metric", "clean", "poisoned", "change %"):
        table.add_column(column, justify="right")
    table.add_row("MSE", f"{report['mse_clean']:.6g}", f"{report['mse_poisoned']:.6g}", f"{report['delta_mse_pct']:+.2f}")
    table.add_row("R²", f"{report['r2_clean']:.6g}", f"{report['r2_poisoned']:.6g}", f"{report['delta_r2_pct']:+.2f}")
    console.print(table)


@cli.command()
@common_options
def attribute(config_path, seed, out):
    """Shapley attributions (attributions.csv, global_importance.csv)"""
    run = _run(config_path, seed, out)
    summary = _execute(run.attribute)
    table = Table(title=f"Global importance ({summary['data']} rows, {summary['method']})")
    table.add_column("rank", justify="right")
    table.add_column("feature")
    table.add_column("mean |φ| (dB)", justify="right")
    for rank, (name, value) in enumerate(summary["mean_abs_shapley"].items(), start=1):
        table.add_row(str(rank), name, f"{value:.4g}")
    console.print(table)


@cli.command("train-detector")
@common_options
def train_detector(config_path, seed, out):
    """Split the labeled rows and train the detector (detector.json)"""
    run = _run(config_path, seed, out)
    detector = _execute(run.train_detector)
    console.print(f"✅ {detector.kind.value} detector, training loss {detector.training_loss:.4f}")


@cli.command()
@common_options
def evaluate(config_path, seed, out):
    """Score the detector on the test split (detector_metrics.json)"""
    run = _run(config_path, seed, out)
    summary = _execute(run.evaluate)
    console.print(_metrics_table("Detector", [(summary["kind"], summary["metrics"])]))


@cli.command("export-sft")
@common_options
def export_sft(config_path, seed, out):
    """Write instruction-tuning datasets (sft_train.jsonl, sft_test.jsonl)"""
    run = _run(config_path, seed, out)
    counts = _execute(run.export_sft)
    console.print(f"✅ SFT examples: {counts['train']} train, {counts['test']} test")


@cli.command("classify-llm")
@common_options
@click.option("--backend", type=click.Choice(["mock", "remote"]), default=None, help="Override the gateway backend")
def classify_llm(config_path, seed, out, backend):
    """Ask the LLM endpoint for verdicts on the test split (llm_metrics.json)"""
    run = _run(config_path, seed, out, backend)
    if run.config.gateway is None:
        console.print("⚠️ No gateway configured; pass --backend mock|remote")
        sys.exit(0)
    if run.config.gateway.backend == "remote" and not os.getenv("AIRSHIELD_API_KEY"):
        logger.warning("⚠️ AIRSHIELD_API_KEY is not set; requests go out without a bearer token")
    evaluation = _execute(run.classify_llm)
    console.print(_metrics_table("LLM verdicts", [(run.config.gateway.backend, evaluation.metrics.as_dict())]))
    console.print(f"Unparseable: {evaluation.unparseable_count}, transport failures: {evaluation.transport_failures}")


@cli.command()
@common_options
@click.option("--backend", type=click.Choice(["mock", "remote"]), default=None, help="Override the gateway backend")
def explain(config_path, seed, out, backend):
    """Run the three explanation prompts on one incident (explanations.md)"""
    run = _run(config_path, seed, out, backend)
    if run.config.gateway is None:
        console.print("⚠️ No gateway configured; pass --backend mock|remote")
        sys.exit(0)
    transcripts = _execute(run.explain)
    if transcripts:
        console.print(f"✅ {len(transcripts)} explanation sections -> {run.path('explanations.md')}")


@cli.command()
@common_options
def report(config_path, seed, out):
    """Assemble report.json / report.md from the artifacts in the run directory"""
    run = _run(config_path, seed, out)
    incident = _execute(run.report)
    console.print(f"✅ Report -> {run.path('report.md')} ({len(incident.artifacts)} artifacts)")


@cli.command("run-experiment")
@common_options
def run_experiment_command(config_path, seed, out):
    """Run every stage and write report.json / report.md"""
    try:
        config = _load_config(config_path, seed)
    except ConfigError as e:
        console.print(f"[bold red]❌ {e}[/bold red]")
        sys.exit(e.exit_code)
    report = _execute(lambda: run_experiment(config, out))
    rows = [(f"detector ({report.detector['kind']})", report.detector["metrics"])]
    if report.llm.get("status") != "skipped":
        rows.append((f"LLM ({report.llm['backend']})", report.llm["metrics"]))
    console.print(_metrics_table("Detection", rows))
    console.print(f"MSE change under attack: {report.degradation['delta_mse_pct']:+.2f}%")


if __name__ == "__main__":
    cli()
