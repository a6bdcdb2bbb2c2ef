"""Command-line entry point: ``graphprompt <command> ...``.

Exit codes: 0 success, 1 equivalence check failed, 2 validation error,
3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Literal, Optional

import click
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from graphprompt.errors import NumericError
from graphprompt.gnn import HeadSpec, build_model, load_checkpoint, save_checkpoint
from graphprompt.graph import generate_synthetic_dataset, load_dataset, load_graph, load_spec, save_dataset
from graphprompt.prompt import fit_prompt, load_prompt, save_prompt, solve_prompt, verify_equivalence
from graphprompt.report import plot_single_curve, write_comparison_report
from graphprompt.tuning import (Strategy, TrainConfig, compare_strategies, edge_prediction_auc,
                                prepare_model, pretrain_edge_prediction, strategy_param_counts, train)

log = logging.getLogger("graphprompt")

EXIT_FAILED_CHECK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 1, 2, 3, 4


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    kind: Literal["gin", "gcn"] = "gin"
    layers: int = Field(2, ge=1)
    hidden: int = Field(16, ge=1)
    out_dim: Optional[int] = Field(None, ge=1)
    update: Literal["linear", "mlp"] = "mlp"
    bias: bool = True
    readout: Literal["sum", "mean"] = "sum"
    activation: Literal["relu", "none"] = "relu"
    epsilon: float = 0.0
    seed: int = 0


class TrainSection(_Strict):
    learning_rate: float = Field(0.01, gt=0)
    epochs: int = Field(50, ge=0)
    batch_size: int = Field(32, ge=1)
    seed: int = 0
    loss: Literal["bce", "mse"] = "bce"
    eval_every: int = Field(1, ge=1)
    metric: Literal["auc", "accuracy"] = "auc"
    backtracking: bool = False

    def to_config(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class PathsSection(_Strict):
    data: Optional[str] = None
    checkpoint: Optional[str] = None
    out_checkpoint: Optional[str] = None
    out_curve: Optional[str] = None
    out_prompt: Optional[str] = None
    out_csv: Optional[str] = None


class RunConfig(_Strict):
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    pretrain: Optional[TrainSection] = None
    strategy: Optional[str] = None
    strategies: Optional[list[str]] = None
    seeds: int = Field(5, ge=1)
    workers: int = Field(1, ge=1)
    paths: PathsSection = PathsSection()


def read_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc.msg})") from exc
    return RunConfig.model_validate(raw)


def _pick(flag, fallback, what: str) -> str:
    value = flag or fallback
    if not value:
        raise click.UsageError(f"missing {what}")
    return value


def guarded(fn):
    """Map library exceptions to exit codes with a one-line diagnostic."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            # non-finite values are detected and reported as exit code 3
            with np.errstate(over="ignore", invalid="ignore"):
                return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except ValidationError as exc:
            first = exc.errors()[0]
            where = ".".join(str(p) for p in first["loc"])
            _die(EXIT_VALIDATION, f"invalid config at '{where}': {first['msg']}")
        except NumericError as exc:
            _die(EXIT_NUMERIC, str(exc))
        except OSError as exc:
            _die(EXIT_IO, f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc))
        except (ValueError, KeyError, TypeError) as exc:
            msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
            _die(EXIT_VALIDATION, str(msg))

    return wrapper


def _die(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool):
    """Graph prompt feature tuning toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n", "n_graphs", type=int, default=200, show_default=True)
@click.option("--rule", type=click.Choice(["triangle-motif", "community-pair"]), default="triangle-motif",
              show_default=True)
@click.option("--dim", type=int, default=8, show_default=True, help="Node feature dimension F.")
@click.option("--out", required=True, help="Output JSON-lines dataset.")
@guarded
def gen_data(seed, n_graphs, rule, dim, out):
    """Generate a synthetic graph-classification dataset."""
    ds = generate_synthetic_dataset(seed, n_graphs, rule, dim)
    save_dataset(ds, out)
    pos = sum(g.label for g in ds.graphs)
    click.echo(f"wrote {len(ds)} graphs (F={ds.feature_dim}, {pos} positive) to {out}")


@main.command()
@click.option("--config", "config_path", help="RunConfig JSON.")
@click.option("--data", help="Dataset (JSON lines).")
@click.option("--out-checkpoint", help="Where to write the pre-trained model.")
@guarded
def pretrain(config_path, data, out_checkpoint):
    """Edge-prediction pre-training of a fresh backbone."""
    cfg = read_config(config_path)
    ds = load_dataset(_pick(data, cfg.paths.data, "--data"))
    out = _pick(out_checkpoint, cfg.paths.out_checkpoint, "--out-checkpoint")
    m = cfg.model
    model = build_model(ds.feature_dim, m.hidden, m.layers, m.kind, m.update, m.bias, m.readout,
                        m.activation, HeadSpec(), m.epsilon, m.out_dim, m.seed)
    tcfg = (cfg.pretrain or cfg.train).to_config()
    trained = pretrain_edge_prediction(model, ds, tcfg)
    save_checkpoint(trained, out)
    held_out = ds.subset("test") or ds.graphs
    try:
        before = edge_prediction_auc(model, held_out, tcfg.seed)
        after = edge_prediction_auc(trained, held_out, tcfg.seed)
        click.echo(f"edge AUC (held-out) before={before:.4f} after={after:.4f}")
    except ValueError:
        pass
    click.echo(f"wrote checkpoint to {out}")


@main.command()
@click.option("--config", "config_path")
@click.option("--checkpoint")
@click.option("--data")
@click.option("--strategy", "strategy_name", help="ft | gpf | partial-k | mlp-k | linear-probe")
@click.option("--out-curve", help="Per-epoch MetricCurve CSV; a PNG is written beside it.")
@click.option("--out-prompt", help="Learned prompt (GPF only).")
@click.option("--out-checkpoint", help="Optional tuned model checkpoint.")
@guarded
def tune(config_path, checkpoint, data, strategy_name, out_curve, out_prompt, out_checkpoint):
    """Tune a pre-trained checkpoint on a downstream dataset."""
    cfg = read_config(config_path)
    backbone = load_checkpoint(_pick(checkpoint, cfg.paths.checkpoint, "--checkpoint"))
    ds = load_dataset(_pick(data, cfg.paths.data, "--data"))
    strategy = Strategy.parse(_pick(strategy_name, cfg.strategy, "--strategy"))
    out_curve = _pick(out_curve, cfg.paths.out_curve, "--out-curve")
    tcfg = cfg.train.to_config()
    result = train(prepare_model(backbone, strategy, seed=tcfg.seed), strategy, ds, tcfg)
    result.curve.write_csv(out_curve)
    plot_single_curve(result.curve, Path(out_curve).with_suffix(".png"), strategy.name)
    out_prompt = out_prompt or cfg.paths.out_prompt
    if out_prompt:
        if result.prompt is None:
            raise click.UsageError(f"--out-prompt needs the gpf strategy, not {strategy.name}")
        save_prompt(result.prompt, out_prompt)
    if out_checkpoint:
        save_checkpoint(result.model, out_checkpoint)
    final = result.curve.final
    click.echo(f"strategy={strategy.name} epochs={final.epoch} train_loss={final.train_loss:.6g} "
               f"train_{tcfg.metric}={final.train_metric:.4f} test_{tcfg.metric}={final.test_metric:.4f}")


@main.command()
@click.option("--graph", "graph_path", required=True)
@click.option("--spec", "spec_path", required=True)
@click.option("--checkpoint", required=True)
@click.option("--out-prompt", required=True)
@guarded
def solve(graph_path, spec_path, checkpoint, out_prompt):
    """Closed-form prompt reproducing a graph transformation (single-layer linear GIN)."""
    model = load_checkpoint(checkpoint)
    p = solve_prompt(load_graph(graph_path), load_spec(spec_path), model)
    save_prompt(p, out_prompt)
    click.echo("p* = [" + ", ".join(f"{v:.12g}" for v in p.values) + "]")


@main.command()
@click.option("--graph", "graph_path", required=True)
@click.option("--spec", "spec_path", required=True)
@click.option("--checkpoint", required=True)
@click.option("--prompt", "prompt_path", required=True)
@click.option("--tol", type=float, default=1e-9, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Print the full report as JSON.")
@guarded
def verify(graph_path, spec_path, checkpoint, prompt_path, tol, as_json):
    """Compare f(A, X + p) against f(spec(A, X))."""
    report = verify_equivalence(load_checkpoint(checkpoint), load_graph(graph_path),
                                load_spec(spec_path), load_prompt(prompt_path), tol)
    click.echo(json.dumps(report.to_dict()) if as_json else report.summary())
    if not report.passed:
        sys.exit(EXIT_FAILED_CHECK)


@main.command()
@click.option("--graph", "graph_path", required=True)
@click.option("--spec", "spec_path", required=True)
@click.option("--checkpoint", required=True)
@click.option("--steps", type=int, default=10_000, show_default=True)
@click.option("--lr", type=float, default=1.0, show_default=True, help="Largest step tried.")
@click.option("--target-residual", type=float, default=0.0, show_default=True)
@click.option("--no-backtracking", is_flag=True)
@click.option("--out-prompt", required=True)
@guarded
def fit(graph_path, spec_path, checkpoint, steps, lr, target_residual, no_backtracking, out_prompt):
    """Fit a prompt by gradient descent (any backbone)."""
    result = fit_prompt(load_checkpoint(checkpoint), load_graph(graph_path), load_spec(spec_path),
                        steps, lr, target_residual, not no_backtracking)
    save_prompt(result.prompt, out_prompt)
    click.echo(f"steps={result.steps} initial_residual={result.initial_residual:.6e} "
               f"residual={result.residual:.6e}")


@main.command()
@click.option("--checkpoint", required=True)
@click.option("--strategy", "strategy_names", default="ft,gpf", show_default=True,
              help="Comma-separated strategies.")
@guarded
def params(checkpoint, strategy_names):
    """Trainable/total parameter accounting per strategy."""
    model = load_checkpoint(checkpoint)
    full_trainable, _ = strategy_param_counts(model, Strategy("ft"))
    for name in strategy_names.split(","):
        s = Strategy.parse(name)
        trainable, total = strategy_param_counts(model, s)
        click.echo(f"strategy={s.name} trainable={trainable} total={total} "
                   f"ratio_to_ft={trainable / full_trainable:.4%}")


@main.command()
@click.option("--config", "config_path")
@click.option("--checkpoint")
@click.option("--data")
@click.option("--strategies", default=None, help="Comma-separated, e.g. ft,gpf,partial-1,mlp-3,linear-probe")
@click.option("--seeds", type=int, default=None, help="Seeds per strategy.")
@click.option("--workers", type=int, default=None)
@click.option("--out-csv")
@guarded
def compare(config_path, checkpoint, data, strategies, seeds, workers, out_csv):
    """Train several strategies over several seeds; write CSVs and figures."""
    cfg = read_config(config_path)
    backbone = load_checkpoint(_pick(checkpoint, cfg.paths.checkpoint, "--checkpoint"))
    ds = load_dataset(_pick(data, cfg.paths.data, "--data"))
    names = strategies.split(",") if strategies else (cfg.strategies or
                                                      ["ft", "gpf", "partial-1", "mlp-3", "linear-probe"])
    out_csv = _pick(out_csv, cfg.paths.out_csv, "--out-csv")
    result = compare_strategies(backbone, ds, [Strategy.parse(n) for n in names], cfg.train.to_config(),
                                seeds or cfg.seeds, workers or cfg.workers)
    outputs = write_comparison_report(result, out_csv)
    for r in result.rows:
        click.echo(f"{r.strategy:>14s}  {result.metric}={r.mean:.4f} +/- {r.std:.4f}  "
                   f"trainable={r.trainable_params} total={r.total_params}")
    click.echo(f"wrote {outputs['csv']}, {outputs['curve_figure']}, {outputs['bar_figure']}")


if __name__ == "__main__":
    main()
