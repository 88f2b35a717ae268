"""HTTP surface over the pipeline jobs.

Error mapping: bad configuration -> 400, unusable data -> 422, numeric
failure during training -> 500.  Jobs run synchronously in the request;
training at dataset scale is expected to be driven with desk-scale
configs or a patient client timeout.
"""

from fastapi import FastAPI, HTTPException

from .. import __version__, pipeline
from ..errors import ConfigError, DataError, NumericError
from . import schemas

app = FastAPI(title="gyrocal", version=__version__)


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError as e:
        raise HTTPException(status_code=400, detail=str(e)) from e
    except (DataError, OSError) as e:
        raise HTTPException(status_code=422, detail=str(e)) from e
    except NumericError as e:
        raise HTTPException(status_code=500, detail=str(e)) from e


@app.get("/health", response_model=schemas.HealthResponse)
def health():
    return schemas.HealthResponse(name="gyrocal", version=__version__)


@app.post("/synth", response_model=schemas.SynthResponse)
def synth(req: schemas.SynthRequest):
    out = _guard(pipeline.run_synth, req.scenario_path, req.error_model_path,
                 req.out_dir, seed=req.seed)
    return schemas.SynthResponse(
        imu_csv=out.imu_csv, gt_csv=out.gt_csv,
        error_model_json=out.error_model_json,
        manifest=out.manifest, samples=out.samples,
    )


@app.post("/train", response_model=schemas.TrainResponse)
def train(req: schemas.TrainRequest):
    out = _guard(pipeline.run_train, req.dataset_dirs, req.config_path,
                 req.out_dir, seed=req.seed, split_path=req.split_path)
    return schemas.TrainResponse(
        checkpoint_best=out.checkpoint_best,
        checkpoint_final=out.checkpoint_final,
        report_csv=out.report_csv,
        norm_stats_json=out.norm_stats_json,
        manifest=out.manifest,
        param_count=out.param_count,
        epochs=out.epochs,
        best_val_loss=out.best_val_loss,
        final_val_loss=out.final_val_loss,
    )


@app.post("/eval", response_model=schemas.EvalResponse)
def evaluate(req: schemas.EvalRequest):
    out = _guard(pipeline.run_eval, req.checkpoint_path, req.config_path,
                 req.dataset_dirs, req.out_dir,
                 norm_stats_path=req.norm_stats_path,
                 raw_baseline=req.raw_baseline, yaw_only=req.yaw_only,
                 seed=req.seed)
    return schemas.EvalResponse(
        rows=[schemas.AoeRow(sequence=r.sequence,
                             aoe_deg_calibrated=r.aoe_deg_calibrated,
                             aoe_deg_raw=r.aoe_deg_raw) for r in out.rows],
        aoe_csv=out.aoe_csv,
        orientation_csvs=out.orientation_csvs,
        manifest=out.manifest,
    )


@app.post("/ablate", response_model=schemas.AblateResponse)
def ablate(req: schemas.AblateRequest):
    out = _guard(pipeline.run_ablate, req.dataset_dirs, req.config_path,
                 req.out_dir, seed=req.seed,
                 test_dataset_dirs=req.test_dataset_dirs,
                 split_path=req.split_path)
    return schemas.AblateResponse(
        rows=[schemas.AblateComparisonRow(sequence=r.sequence,
                                          aoe_deg_lka=r.aoe_deg_lka,
                                          aoe_deg_nolka=r.aoe_deg_nolka)
              for r in out.rows],
        comparison_csv=out.comparison_csv,
        param_count_lka=out.param_count_lka,
        param_count_nolka=out.param_count_nolka,
        best_val_loss_lka=out.best_val_loss_lka,
        best_val_loss_nolka=out.best_val_loss_nolka,
        manifest=out.manifest,
    )
