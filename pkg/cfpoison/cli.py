"""CLI commands for cfpoison."""

import dataclasses
import json
import logging
import os
from pathlib import Path
from typing import Annotated, Callable, Optional

import numpy as np
import pandas as pd
from cyclopts import App, Parameter
from rich.panel import Panel
from rich.table import Table

from .classifiers import save_model
from .config import build_experiment_config, load_config_document, resolve_seed, wdn_settings
from .data import kfold, load_dataset
from .defense import run_defense
from .evaluation import (
    FoldSplit,
    counterfactual_poison,
    explain_fold,
    poison_fold,
    prepare_fold,
    run_ablation,
    run_experiment,
)
from .metrics import f1_score
from .models import (
    SCHEMA_VERSION,
    CfPoisonError,
    CliInvocation,
    CommandResult,
    ConfigError,
    DataValidationError,
    ExperimentConfig,
    ExperimentReport,
    PoisonSet,
)
from .poison import poisoned_training_set
from .recourse import cost, write_counterfactuals
from .report import FORMATS, emit_report, load_report, write_json, write_sparsity_svg
from .utils import (
    console,
    derive_seed,
    parse_list,
    print_error,
    print_header,
    print_success,
    setup_logging,
    sha256_file,
)
from .wdn import case_study

__version__ = "0.1.0"

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
SUBCOMMANDS = ("train", "explain", "poison", "flip", "defend", "evaluate", "ablation", "wdn-demo", "report")

# Purpose key shared with the evaluation runner for defense seeds
_KEY_DEFENSE = 104

# Application setup
app = App(
    name="cfpoison",
    help_format="rich",
    help="""
[bold cyan]cfpoison[/] - Counterfactual recourse under data poisoning

Train classifiers, compute counterfactual explanations, craft poison that raises the
[yellow]cost of recourse[/], screen it with [green]sanitization defenses[/] and evaluate
everything over folds and budgets.

[dim]Examples:[/]
  cfpoison train -c exp.yaml -o out/             Train on fold 0 and save the model
  cfpoison poison -c exp.yaml --poison-out p.json
  cfpoison defend -c exp.yaml --poison-in p.json Screen a saved poison set
  cfpoison evaluate -c exp.yaml -o out/ -b 0.05,0.1
  cfpoison wdn-demo --seed 3 -o wdn/             Sensor-network case study
""",
    version=__version__,
)


@dataclasses.dataclass
class _Run:
    """State of one subcommand run, echoed into the manifest"""

    inv: CliInvocation
    out: Path
    config: Optional[dict] = None
    seed: Optional[int] = None
    seed_source: Optional[str] = None
    outputs: list[Path] = dataclasses.field(default_factory=list)

    def override(self, key: str, default=None):
        value = self.inv.overrides.get(key)
        return default if value is None else value

    def path(self, name: str) -> Path:
        """Output path; relative names land in the output directory"""
        path = Path(name)
        return path if path.is_absolute() else self.out / path

    def wrote(self, *paths: Path):
        self.outputs.extend(Path(p) for p in paths)


def _budgets(value) -> Optional[tuple[float, ...]]:
    if value is None:
        return None
    try:
        budgets = parse_list(value, float) if isinstance(value, str) else [float(v) for v in value]
    except ValueError as e:
        raise ConfigError(f"budgets must be numbers: {value}") from e
    return tuple(budgets)


def _formats(run: _Run, default=FORMATS) -> list[str]:
    value = run.override("formats", default)
    formats = parse_list(value) if isinstance(value, str) else list(value)
    unknown = [f for f in formats if f not in FORMATS]
    if unknown:
        raise ConfigError(f"unknown format '{unknown[0]}' (use {', '.join(FORMATS)})")
    return formats


def _workers(run: _Run) -> int:
    workers = int(run.override("workers", os.cpu_count() or 1))
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    return workers


def _experiment(run: _Run) -> ExperimentConfig:
    """Load, validate and resolve the experiment config of a run"""
    doc, _ = load_config_document(run.inv.config_path)
    inner = doc["experiment"] if isinstance(doc.get("experiment"), dict) else doc
    seed, source = resolve_seed(run.override("seed"), inner.get("seed"))
    cfg = build_experiment_config(doc, seed)
    budgets = _budgets(run.override("budgets"))
    if budgets is not None:
        try:
            cfg = dataclasses.replace(cfg, budgets=budgets)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
    run.config, run.seed, run.seed_source = cfg.to_dict(), cfg.seed, source
    return cfg


def _first_fold(cfg: ExperimentConfig) -> FoldSplit:
    ds = load_dataset(cfg.dataset, cfg.seed)
    return prepare_fold(cfg, ds, kfold(ds, cfg.folds, cfg.seed), 0)


def _records_table(title: str, report: ExperimentReport) -> Table:
    table = Table(title=title)
    table.add_column("Metric", style="cyan")
    table.add_column("Budget", justify="right")
    table.add_column("Median", justify="right")
    table.add_column("p", justify="right")
    table.add_column("", style="yellow")
    for record in report.records:
        if record.fold != -1:
            continue
        table.add_row(
            record.metric,
            f"{record.budget:g}",
            f"{record.median:.4g}",
            f"{record.p_value:.3g}",
            record.stars,
        )
    return table


# --------------------------------------------------------------------------- subcommands


def _cmd_train(run: _Run) -> str:
    cfg = _experiment(run)
    print_header("training", cfg.classifier.kind, color="cyan")
    split = _first_fold(cfg)
    predictions = split.model.predict(split.test.features)
    accuracy = float(np.mean(predictions == split.test.labels))
    summary = {
        "schema_version": SCHEMA_VERSION,
        "kind": cfg.classifier.kind,
        "fold": split.fold,
        "train_size": split.train.n,
        "test_size": split.test.n,
        "accuracy": accuracy,
        "f1": f1_score(predictions, split.test.labels),
    }
    model_path = run.path("model.json")
    save_model(split.model, model_path)
    run.wrote(model_path, write_json(summary, run.path("train.json")))
    return f"Trained {cfg.classifier.kind} on {split.train.n} rows (test accuracy {accuracy:.3f})"


def _cmd_explain(run: _Run) -> str:
    cfg = _experiment(run)
    print_header("explaining", cfg.cf_method, color="magenta")
    split = _first_fold(cfg)
    _, cfs = explain_fold(cfg, split)
    path = run.path("counterfactuals.jsonl")
    write_counterfactuals(path, cfs)
    run.wrote(path)
    valid = [cf for cf in cfs if cf.valid]
    median = float(np.median([cost(cfg.cost, cf.delta) for cf in valid])) if valid else float("nan")
    return f"{len(valid)} of {len(cfs)} counterfactuals valid (median cost {median:.4g})"


def _cmd_poison(run: _Run) -> str:
    cfg = _experiment(run)
    if cfg.poison_mode != "counterfactual":
        raise ConfigError("poison crafts counterfactual-based instances; use 'flip' for label flipping")
    budget = cfg.budgets[0]
    print_header("poisoning", f"{cfg.target.level} target", [f"budget {budget:g}"], color="red")
    split = _first_fold(cfg)
    poison = counterfactual_poison(cfg, split.train, split.model, split.target, budget)
    path = run.path(run.override("poison_out", "poison.json"))
    path.parent.mkdir(parents=True, exist_ok=True)
    run.wrote(write_json(poison.to_dict(), path))
    return f"{len(poison)} poisonous instances ({poison.failures} failed)"


def _cmd_flip(run: _Run) -> str:
    cfg = dataclasses.replace(_experiment(run), poison_mode="label_flip")
    budget = cfg.budgets[0]
    print_header("flipping", "labels", [f"budget {budget:g}"], color="red")
    split = _first_fold(cfg)
    flipped, indices, _ = poison_fold(cfg, split.train, split.model, split.target, budget)
    frame = pd.DataFrame(flipped.features, columns=list(flipped.feature_names))
    frame["label"] = flipped.labels
    if flipped.sensitive is not None:
        frame["sensitive"] = flipped.sensitive
    frame["flipped"] = np.isin(np.arange(flipped.n), indices).astype(int)
    path = run.path("flipped.csv")
    frame.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    run.wrote(path)
    return f"Flipped {len(indices)} of {flipped.n} training labels"


def _read_poison(path: Path) -> PoisonSet:
    if not path.exists():
        raise DataValidationError(f"poison set not found: {path}")
    try:
        with open(path) as f:
            return PoisonSet.from_dict(json.load(f))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataValidationError(f"malformed poison set {path}: {e}") from e


def _cmd_defend(run: _Run) -> str:
    cfg = _experiment(run)
    split = _first_fold(cfg)
    poison_in = run.override("poison_in")
    if poison_in:
        poison = _read_poison(Path(poison_in))
        screened = poisoned_training_set(split.train, poison)
        indices = np.arange(split.train.n, screened.n)
    else:
        screened, indices, _ = poison_fold(cfg, split.train, split.model, split.target, cfg.budgets[0])

    methods = cfg.defenses or (cfg.defense.method,)
    print_header("screening", f"{screened.n} rows", list(methods), color="green")
    table = Table(title="Detection")
    table.add_column("Defense", style="green")
    table.add_column("Flagged", justify="right")
    table.add_column("Recall", justify="right")
    table.add_column("Precision", justify="right")
    for method in methods:
        spec = dataclasses.replace(
            cfg.defense, method=method, seed=derive_seed(cfg.seed, _KEY_DEFENSE, 0, 0)
        )
        report = run_defense(spec, split.test, screened, indices)
        run.wrote(write_json(report.to_dict(), run.path(f"detection_{method}.json")))
        precision = f"{report.precision:.3f}" if report.precision_defined else "-"
        table.add_row(method, str(int(report.flags.sum())), f"{report.recall:.3f}", precision)
    console.print(table)
    return f"Screened {len(indices)} poisonous rows with {len(methods)} defense(s)"


def _cmd_evaluate(run: _Run) -> str:
    cfg = _experiment(run)
    formats = _formats(run)
    print_header("evaluating", cfg.classifier.kind, [f"{b:g}" for b in cfg.budgets], color="cyan")
    report = run_experiment(cfg, _workers(run), meta={"seed_source": run.seed_source})
    run.wrote(*emit_report(report, formats, run.out, "report"))
    console.print(_records_table("Pooled over folds", report))
    return f"Evaluated {cfg.folds} folds x {len(cfg.budgets)} budget(s)"


def _cmd_ablation(run: _Run) -> str:
    cfg = _experiment(run)
    formats = _formats(run)
    print_header("ablation", "source sampling", ["boundary_weighted", "uniform"], color="cyan")
    reports = run_ablation(cfg, _workers(run), meta={"seed_source": run.seed_source})
    for name, report in reports.items():
        run.wrote(*emit_report(report, formats, run.out, f"ablation_{name}"))
        console.print(_records_table(name, report))
    return "Ablation finished"


def _scenario_files(run: _Run, name: str, index: int, scenario) -> None:
    stem = f"scenario_{name}_{index}"
    columns = [f"sensor_{j}" for j in range(scenario.sensors)]
    frame = pd.DataFrame(scenario.readings, columns=columns)
    frame.index.name = "step"
    csv_path = run.path(f"{stem}.csv")
    frame.to_csv(csv_path, float_format="%.12g", lineterminator="\n")
    faults = {
        "seed": scenario.seed,
        "params": scenario.params,
        "faults": [dataclasses.asdict(f) for f in scenario.faults],
    }
    run.wrote(csv_path, write_json(faults, run.path(f"{stem}.faults.json")))


def _cmd_wdn_demo(run: _Run) -> str:
    overrides: dict = {}
    config_seed = None
    if run.inv.config_path:
        doc, _ = load_config_document(run.inv.config_path)
        overrides = dict(doc.get("wdn") or {})
        config_seed = doc.get("seed")
    budgets = _budgets(run.override("budgets"))
    if budgets:
        overrides["budget"] = budgets[0]
    settings = wdn_settings(overrides)
    seed, source = resolve_seed(run.override("seed"), config_seed)
    run.config, run.seed, run.seed_source = {"wdn": settings}, seed, source
    formats = _formats(run)

    print_header("case study", "virtual sensors", [f"seed {seed}"], color="blue")
    result = case_study(seed, settings)
    for name, scenarios in result.scenarios.items():
        for index, scenario in enumerate(scenarios):
            _scenario_files(run, name, index, scenario)
    report_formats = [f for f in formats if f != "svg"]
    run.wrote(*emit_report(result.report, report_formats, run.out, "wdn_report"))
    run.wrote(write_json({"schema_version": SCHEMA_VERSION, "alarms": result.alarms}, run.path("wdn_alarms.json")))
    run.wrote(write_json(result.poison.to_dict(), run.path("wdn_poison.json")))
    if "svg" in formats:
        run.wrote(
            write_sparsity_svg(result.clean_sparsity, result.poisoned_sparsity, run.path("wdn_sparsity.svg"))
        )
    console.print(_records_table("Case study", result.report))
    return f"{len(result.poison)} poisonous rows, {len(result.alarms)} explained alarms"


def _cmd_report(run: _Run) -> str:
    source = run.override("input") or run.inv.config_path
    if not source:
        raise ConfigError("report needs an input report JSON (--input)")
    report = load_report(Path(source))
    run.config, run.seed, run.seed_source = report.config, report.seed, "report"
    formats = _formats(run, default=("csv", "svg"))
    stem = Path(source).stem
    run.wrote(*emit_report(report, formats, run.out, stem))
    return f"Re-emitted {stem} as {', '.join(formats)}"


# Registry of subcommand handlers
COMMANDS: dict[str, Callable[[_Run], str]] = {
    "train": _cmd_train,
    "explain": _cmd_explain,
    "poison": _cmd_poison,
    "flip": _cmd_flip,
    "defend": _cmd_defend,
    "evaluate": _cmd_evaluate,
    "ablation": _cmd_ablation,
    "wdn-demo": _cmd_wdn_demo,
    "report": _cmd_report,
}


def write_manifest(run: _Run, result: CommandResult, error_kind: Optional[str] = None) -> Path:
    """Write manifest.json listing every output with its content hash"""
    files = []
    for path in sorted(set(run.outputs)):
        if not path.exists():
            continue
        try:
            name = path.resolve().relative_to(run.out.resolve()).as_posix()
        except ValueError:
            name = str(path)
        files.append(
            {"path": name, "sha256": sha256_file(path), "volatile": name.endswith(".timing.json")}
        )
    doc = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "subcommand": run.inv.subcommand,
        "status": "ok" if result.success else "error",
        "exit_code": result.exit_code,
        "error": None if result.success else {"kind": error_kind, "message": result.message},
        "seed": run.seed,
        "seed_source": run.seed_source,
        "config": run.config,
        "files": files,
    }
    path = run.out / MANIFEST_NAME
    write_json(doc, path)
    return path


def execute(inv: CliInvocation) -> CommandResult:
    """
    Run one subcommand and write its manifest.

    Validation errors exit with 1 and runtime failures with 2; the manifest is written on
    failure too whenever the output directory can be created.
    """
    run = _Run(inv, Path(inv.out_dir))
    error_kind = None
    try:
        handler = COMMANDS.get(inv.subcommand)
        if handler is None:
            raise ConfigError(f"unknown subcommand '{inv.subcommand}' (use {', '.join(SUBCOMMANDS)})")
        run.out.mkdir(parents=True, exist_ok=True)
        message = handler(run)
        result = CommandResult(True, message, 0, [str(p) for p in run.outputs])
    except CfPoisonError as e:
        error_kind = e.kind
        result = CommandResult(False, str(e), 1 if e.kind == "validation" else 2)
    except (OSError, ValueError, ArithmeticError) as e:
        error_kind = "runtime"
        result = CommandResult(False, f"{type(e).__name__}: {e}", 2)

    if not result.success:
        print_error(error_kind, result.message)
    try:
        run.out.mkdir(parents=True, exist_ok=True)
        manifest = write_manifest(run, result, error_kind)
        result.outputs.append(str(manifest))
    except OSError as e:
        logger.warning("Could not write manifest: %s", e)
    return result


def dispatch(inv: CliInvocation) -> int:
    """Exit code of a subcommand run"""
    return execute(inv).exit_code


def _invoke(
    subcommand: str,
    config: Optional[str],
    out: str,
    verbose: bool,
    **overrides,
):
    setup_logging(verbose)
    inv = CliInvocation(
        subcommand=subcommand,
        config_path=config,
        out_dir=out,
        overrides={key: value for key, value in overrides.items() if value is not None},
    )
    result = execute(inv)
    if not result.success:
        raise SystemExit(result.exit_code)
    print_success(result.message)
    console.print(Panel(f"[green]{len(result.outputs)} file(s) written to {out}[/]", style="green"))


# --------------------------------------------------------------------------- commands

ConfigOpt = Annotated[
    Optional[str],
    Parameter(
        name=["--config", "-c"],
        help="Experiment config, YAML or JSON (default: $CFPOISON_CONFIG or ./cfpoison.yaml)",
    ),
]
OutOpt = Annotated[str, Parameter(name=["--out", "-o"], help="Output directory")]
SeedOpt = Annotated[
    Optional[int],
    Parameter(name=["--seed", "-s"], help="Global seed (overrides config and $CFPOISON_SEED)"),
]
BudgetsOpt = Annotated[
    Optional[str],
    Parameter(name=["--budgets", "-b"], help="Comma-separated poison budgets (fractions)"),
]
FormatsOpt = Annotated[
    Optional[str],
    Parameter(name=["--formats", "-f"], help="Comma-separated report formats: json,csv,svg"),
]
WorkersOpt = Annotated[
    Optional[int],
    Parameter(name=["--workers", "-w"], help="Worker processes (default: available cores)"),
]
VerboseOpt = Annotated[bool, Parameter(name=["--verbose", "-v"], help="Debug logging")]


@app.command
def train(
    *,
    config: ConfigOpt = None,
    out: OutOpt = ".",
    seed: SeedOpt = None,
    verbose: VerboseOpt = False,
):
    """
    Train the configured classifier on fold 0.

    Writes model.json (full-precision model document) and train.json.
    """
    _invoke("train", config, out, verbose, seed=seed)


@app.command
def explain(
    *,
    config: ConfigOpt = None,
    out: OutOpt = ".",
    seed: SeedOpt = None,
    verbose: VerboseOpt = False,
):
    """Explain fold-0 test rows predicted as the target class (counterfactuals.jsonl)."""
    _invoke("explain", config, out, verbose, seed=seed)


@app.command
def poison(
    *,
    config: ConfigOpt = None,
    out: OutOpt = ".",
    seed: SeedOpt = None,
    budgets: BudgetsOpt = None,
    poison_out: Annotated[
        Optional[str],
        Parameter(name=["--poison-out"], help="Where to write the poison set (default: poison.json)"),
    ] = None,
    verbose: VerboseOpt = False,
):
    """
    Craft poisonous instances for fold 0 at the first budget.

    [dim]Examples:[/]
      cfpoison poison -c exp.yaml -o out/ --poison-out p.json
    """
    _invoke("poison", config, out, verbose, seed=seed, budgets=budgets, poison_out=poison_out)


@app.command
def flip(
    *,
    config: ConfigOpt = None,
    out: OutOpt = ".",
    seed: SeedOpt = None,
    budgets: BudgetsOpt = None,
    verbose: VerboseOpt = False,
):
    """Label-flipping baseline: write the flipped fold-0 training set (flipped.csv)."""
    _invoke("flip", config, out, verbose, seed=seed, budgets=budgets)


@app.command
def defend(
    *,
    config: ConfigOpt = None,
    out: OutOpt = ".",
    seed: SeedOpt = None,
    budgets: BudgetsOpt = None,
    poison_in: Annotated[
        Optional[str],
        Parameter(name=["--poison-in"], help="Poison set to screen (default: craft one)"),
    ] = None,
    verbose: VerboseOpt = False,
):
    """
    Screen a poisoned fold-0 training set with the configured defenses.

    The threshold is calibrated on the unpoisoned test fold.

    [dim]Examples:[/]
      cfpoison defend -c exp.yaml --poison-in out/p.json -o out/
    """
    _invoke("defend", config, out, verbose, seed=seed, budgets=budgets, poison_in=poison_in)


@app.command
def evaluate(
    *,
    config: ConfigOpt = None,
    out: OutOpt = ".",
    seed: SeedOpt = None,
    budgets: BudgetsOpt = None,
    formats: FormatsOpt = None,
    workers: WorkersOpt = None,
    verbose: VerboseOpt = False,
):
    """
    Run the clean vs poisoned protocol over all folds and budgets.

    [dim]Examples:[/]
      cfpoison evaluate -c exp.yaml -o out/
      cfpoison evaluate -c exp.yaml -o out/ -b 0,0.05,0.1 -w 4
    """
    _invoke(
        "evaluate", config, out, verbose, seed=seed, budgets=budgets, formats=formats, workers=workers
    )


@app.command
def ablation(
    *,
    config: ConfigOpt = None,
    out: OutOpt = ".",
    seed: SeedOpt = None,
    budgets: BudgetsOpt = None,
    formats: FormatsOpt = None,
    workers: WorkersOpt = None,
    verbose: VerboseOpt = False,
):
    """Re-run the evaluation with boundary-weighted and with uniform source sampling."""
    _invoke(
        "ablation", config, out, verbose, seed=seed, budgets=budgets, formats=formats, workers=workers
    )


@app.command
def wdn_demo(
    *,
    config: ConfigOpt = None,
    out: OutOpt = ".",
    seed: SeedOpt = None,
    budgets: BudgetsOpt = None,
    formats: FormatsOpt = None,
    verbose: VerboseOpt = False,
):
    """
    Sensor-network case study: poison a virtual-sensor detector through its alarm explanations.

    Writes scenario CSVs with fault sidecars, the case-study report, per-alarm details and a
    sparsity comparison figure.
    """
    _invoke("wdn-demo", config, out, verbose, seed=seed, budgets=budgets, formats=formats)


@app.command
def report(
    *,
    input_path: Annotated[
        Optional[str], Parameter(name=["--input", "-i"], help="Canonical report JSON")
    ] = None,
    out: OutOpt = ".",
    formats: FormatsOpt = None,
    verbose: VerboseOpt = False,
):
    """Re-emit CSV/SVG from an existing report JSON."""
    _invoke("report", None, out, verbose, input=input_path, formats=formats)


def main():
    """Entry point for the CLI"""
    app()


if __name__ == "__main__":
    main()
