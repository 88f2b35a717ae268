"""Command-line client for the calibration pipeline.

Each subcommand builds the same request model the HTTP service accepts.
Without ``--server`` the job runs in this process; with it, the request
is POSTed to a running ``gyrocal serve`` instance on the machine holding
the data.  Exit codes: 0 success, 1 usage/config error, 2 data error,
3 numeric failure.  No environment variables are consulted.
"""

from __future__ import annotations

import sys

import click

from .errors import ConfigError, DataError, NumericError

_dataset_opt = click.option("--dataset", "datasets", multiple=True, required=True,
                            type=click.Path(), help="Sequence directory (repeatable).")
_out_opt = click.option("--out", "out_dir", required=True, type=click.Path(),
                        help="Output directory.")
_seed_opt = click.option("--seed", type=int, default=None,
                         help="Override the configured master seed.")
_server_opt = click.option("--server", default=None,
                           help="Base URL of a running service; runs in-process when omitted.")


@click.group()
def cli():
    """Gyroscope calibration toolkit."""


def _dispatch(server: str | None, route: str, payload: dict, response_model):
    if server is None:
        from . import pipeline

        runner = {
            "/synth": lambda p: pipeline.run_synth(
                p["scenario_path"], p["error_model_path"], p["out_dir"], seed=p["seed"]),
            "/train": lambda p: pipeline.run_train(
                p["dataset_dirs"], p["config_path"], p["out_dir"],
                seed=p["seed"], split_path=p.get("split_path")),
            "/eval": lambda p: pipeline.run_eval(
                p["checkpoint_path"], p["config_path"], p["dataset_dirs"], p["out_dir"],
                norm_stats_path=p.get("norm_stats_path"),
                raw_baseline=p["raw_baseline"], yaw_only=p["yaw_only"], seed=p["seed"]),
            "/ablate": lambda p: pipeline.run_ablate(
                p["dataset_dirs"], p["config_path"], p["out_dir"], seed=p["seed"],
                test_dataset_dirs=p.get("test_dataset_dirs"),
                split_path=p.get("split_path")),
        }[route]
        return runner(payload)

    import httpx

    resp = httpx.post(server.rstrip("/") + route, json=payload, timeout=None)
    if resp.status_code == 400:
        raise ConfigError(resp.json().get("detail", resp.text))
    if resp.status_code == 422:
        raise DataError(resp.json().get("detail", resp.text))
    if resp.status_code >= 500:
        raise NumericError(resp.json().get("detail", resp.text))
    return response_model.model_validate(resp.json())


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="Scenario config (key = value).")
@click.option("--error-model", "error_model_path", required=True, type=click.Path(),
              help="Error model JSON.")
@_out_opt
@_seed_opt
@_server_opt
def synth(config_path, error_model_path, out_dir, seed, server):
    """Generate a synthetic corrupted IMU recording."""
    payload = {"scenario_path": str(config_path),
               "error_model_path": str(error_model_path),
               "out_dir": str(out_dir), "seed": seed}
    from .service.schemas import SynthResponse

    out = _dispatch(server, "/synth", payload, SynthResponse)
    click.echo(f"wrote {out.samples} samples: {out.imu_csv}, {out.gt_csv}")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="Model + training config (key = value).")
@_dataset_opt
@click.option("--split", "split_path", default=None, type=click.Path(),
              help='JSON file with {"train": [names...]} filtering --dataset dirs.')
@_out_opt
@_seed_opt
@_server_opt
def train(config_path, datasets, split_path, out_dir, seed, server):
    """Train the calibration network."""
    payload = {"config_path": str(config_path),
               "dataset_dirs": [str(d) for d in datasets],
               "out_dir": str(out_dir), "seed": seed,
               "split_path": str(split_path) if split_path else None}
    from .service.schemas import TrainResponse

    out = _dispatch(server, "/train", payload, TrainResponse)
    click.echo(f"trained {out.epochs} epochs, {out.param_count} trainable parameters")
    click.echo(f"best validation loss {out.best_val_loss!r} "
               f"(final {out.final_val_loss!r})")
    click.echo(f"checkpoint: {out.checkpoint_best}")


@cli.command("eval")
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="Model config matching the checkpoint.")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--norm-stats", "norm_stats_path", default=None, type=click.Path(),
              help="Normalization stats JSON; defaults to the checkpoint's sibling.")
@_dataset_opt
@_out_opt
@click.option("--with-raw-baseline/--no-raw-baseline", "raw_baseline", default=True,
              help="Also integrate the uncalibrated gyro for comparison.")
@click.option("--yaw-only-align", "yaw_only", is_flag=True, default=False,
              help="Restrict the error alignment to rotation about world z.")
@_seed_opt
@_server_opt
def eval_cmd(config_path, checkpoint_path, norm_stats_path, datasets, out_dir,
             raw_baseline, yaw_only, seed, server):
    """Evaluate a checkpoint: attitude error tables and orientation CSVs."""
    payload = {"checkpoint_path": str(checkpoint_path),
               "config_path": str(config_path),
               "dataset_dirs": [str(d) for d in datasets],
               "out_dir": str(out_dir),
               "norm_stats_path": str(norm_stats_path) if norm_stats_path else None,
               "raw_baseline": raw_baseline, "yaw_only": yaw_only, "seed": seed}
    from .service.schemas import EvalResponse

    out = _dispatch(server, "/eval", payload, EvalResponse)
    for row in out.rows:
        raw = f"{row.aoe_deg_raw:.4f}" if row.aoe_deg_raw is not None else "-"
        click.echo(f"{row.sequence}: calibrated {row.aoe_deg_calibrated:.4f} deg, raw {raw} deg")
    click.echo(f"table: {out.aoe_csv}")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@_dataset_opt
@click.option("--test-dataset", "test_datasets", multiple=True, type=click.Path(),
              help="Held-out sequence directories (defaults to --dataset).")
@click.option("--split", "split_path", default=None, type=click.Path())
@_out_opt
@_seed_opt
@_server_opt
def ablate(config_path, datasets, test_datasets, split_path, out_dir, seed, server):
    """Train with and without the attention block and compare."""
    payload = {"config_path": str(config_path),
               "dataset_dirs": [str(d) for d in datasets],
               "out_dir": str(out_dir), "seed": seed,
               "test_dataset_dirs": [str(d) for d in test_datasets] or None,
               "split_path": str(split_path) if split_path else None}
    from .service.schemas import AblateResponse

    out = _dispatch(server, "/ablate", payload, AblateResponse)
    click.echo(f"parameters: {out.param_count_lka} with attention, "
               f"{out.param_count_nolka} without")
    for row in out.rows:
        click.echo(f"{row.sequence}: {row.aoe_deg_lka:.4f} vs {row.aoe_deg_nolka:.4f} deg")
    click.echo(f"comparison: {out.comparison_csv}")


@cli.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8777)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import app

    uvicorn.run(app, host=host, port=port)


def main(argv=None) -> int:
    """Run the CLI, mapping failures onto the documented exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        return 1
    except (DataError, OSError) as e:
        click.echo(f"data error: {e}", err=True)
        return 2
    except NumericError as e:
        click.echo(f"numeric failure: {e}", err=True)
        return 3
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
