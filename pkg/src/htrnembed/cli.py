"""Command-line orchestration of the pipeline stages."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .config import ConfigError, RunConfig, load_config
from .graph import GraphError
from .graphtoken import BridgeError
from .pipeline import ABLATION_VARIANTS, StageRunner, run_ablation_suite, run_sweep
from .pretrain import TrainingDiverged

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_BRIDGE = 4

log = logging.getLogger(__name__)


def _common(f):
    f = click.option("--config", "config_path", required=True, type=click.Path(exists=True))(f)
    f = click.option("--seed", type=int, default=None, help="override the run seed")(f)
    f = click.option("--force", is_flag=True, help="rerun even when inputs are unchanged")(f)
    f = click.option("--stage-out", "stage_out", type=click.Path(), default=None)(f)
    f = click.option(
        "--distiller",
        "distiller_spec",
        default=None,
        help="builtin or bridge:<command>",
    )(f)
    return f


def _load(config_path, seed, stage_out, distiller_spec) -> RunConfig:
    cfg = load_config(config_path)
    if seed is not None:
        cfg.seed = seed
    if stage_out is not None:
        cfg.out_dir = str(stage_out)
    if distiller_spec:
        if distiller_spec == "builtin":
            cfg.distiller.kind = "builtin"
            cfg.distiller.command = None
        elif distiller_spec.startswith("bridge:"):
            cfg.distiller.kind = "bridge"
            cfg.distiller.command = distiller_spec[len("bridge:") :]
        else:
            raise ConfigError("--distiller must be builtin or bridge:<command>")
    return cfg


@click.group()
def cli():
    """Hierarchical-prompt representation learning on heterogeneous text graphs."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


def _stage_command(name: str, runner_method: str, with_ablation: bool = False):
    @_common
    def command(config_path, seed, force, stage_out, distiller_spec, ablation=None):
        cfg = _load(config_path, seed, stage_out, distiller_spec)
        runner = StageRunner(cfg, force=force)
        kwargs = {}
        if with_ablation:
            kwargs["ablation"] = None if ablation in (None, "full") else ablation
        ran = getattr(runner, runner_method)(**kwargs)
        click.echo(f"{name}: {'done' if ran else 'up to date'} -> {runner.out_dir}")

    if with_ablation:
        command = click.option(
            "--ablation", type=click.Choice(ABLATION_VARIANTS), default=None
        )(command)
    return cli.command(name=name)(command)


_stage_command("ingest", "ingest")
_stage_command("synth", "synth")
_stage_command("summarize", "summarize")
_stage_command("distill", "distill")
_stage_command("pretrain", "pretrain", with_ablation=True)
_stage_command("embed", "embed", with_ablation=True)
_stage_command("eval", "evaluate", with_ablation=True)
_stage_command("freerun", "freerun")


@cli.command()
@_common
@click.option("--seeds", default=None, help="comma-separated seeds to average over")
def ablate(config_path, seed, force, stage_out, distiller_spec, seeds):
    """Train and evaluate the full model and the four ablation variants."""
    cfg = _load(config_path, seed, stage_out, distiller_spec)
    seed_list = [int(s) for s in seeds.split(",")] if seeds else [cfg.seed]
    rows = run_ablation_suite(cfg, seeds=seed_list, out_dir=cfg.out_dir)
    for row in rows:
        click.echo(
            "\t".join(
                [row["variant"]]
                + [f"{row[k]:.4f}" for k in ("micro_f1", "macro_f1", "roc_auc", "pr_auc", "f1")]
            )
        )


@cli.command()
@_common
@click.option("--sweep", "sweep_spec", required=True, help="KEY=V1,V2,...")
def sweep(config_path, seed, force, stage_out, distiller_spec, sweep_spec):
    """One full train+eval per value of a swept hyper-parameter."""
    cfg = _load(config_path, seed, stage_out, distiller_spec)
    key, _, raw = sweep_spec.partition("=")
    if not raw:
        raise ConfigError("--sweep expects KEY=V1,V2,...")
    values = raw.split(",")
    rows = run_sweep(cfg, key.strip(), values, out_dir=cfg.out_dir)
    for row in rows:
        click.echo(
            "\t".join(
                [f"{key}={row[key]}"]
                + [f"{row[k]:.4f}" for k in ("micro_f1", "macro_f1", "roc_auc", "pr_auc", "f1")]
            )
        )


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return EXIT_OK
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        return EXIT_CONFIG
    except click.ClickException as e:
        e.show()
        return EXIT_CONFIG
    except click.exceptions.Abort:
        return EXIT_CONFIG
    except BridgeError as e:
        click.echo(f"bridge error: {e}", err=True)
        return EXIT_BRIDGE
    except TrainingDiverged as e:
        click.echo(f"numeric failure: {e}", err=True)
        return EXIT_NUMERIC
    except GraphError as e:
        click.echo(f"data error: {e}", err=True)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
