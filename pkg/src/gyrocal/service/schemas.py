"""Request/response models for the calibration service.

The service runs on the machine that holds the data: requests reference
filesystem paths, responses return the paths written plus the headline
numbers, so the CLI client and the HTTP surface stay interchangeable.
"""

from pydantic import BaseModel


class HealthResponse(BaseModel):
    name: str
    version: str


class SynthRequest(BaseModel):
    scenario_path: str
    error_model_path: str
    out_dir: str
    seed: int | None = None


class SynthResponse(BaseModel):
    imu_csv: str
    gt_csv: str
    error_model_json: str
    manifest: str
    samples: int


class TrainRequest(BaseModel):
    config_path: str
    dataset_dirs: list[str]
    out_dir: str
    seed: int | None = None
    split_path: str | None = None


class TrainResponse(BaseModel):
    checkpoint_best: str
    checkpoint_final: str
    report_csv: str
    norm_stats_json: str
    manifest: str
    param_count: int
    epochs: int
    best_val_loss: float
    final_val_loss: float


class EvalRequest(BaseModel):
    checkpoint_path: str
    config_path: str
    dataset_dirs: list[str]
    out_dir: str
    norm_stats_path: str | None = None
    raw_baseline: bool = True
    yaw_only: bool = False
    seed: int | None = None


class AoeRow(BaseModel):
    sequence: str
    aoe_deg_calibrated: float
    aoe_deg_raw: float | None = None


class EvalResponse(BaseModel):
    rows: list[AoeRow]
    aoe_csv: str
    orientation_csvs: list[str]
    manifest: str


class AblateRequest(BaseModel):
    config_path: str
    dataset_dirs: list[str]
    out_dir: str
    seed: int | None = None
    test_dataset_dirs: list[str] | None = None
    split_path: str | None = None


class AblateComparisonRow(BaseModel):
    sequence: str
    aoe_deg_lka: float
    aoe_deg_nolka: float


class AblateResponse(BaseModel):
    rows: list[AblateComparisonRow]
    comparison_csv: str
    param_count_lka: int
    param_count_nolka: int
    best_val_loss_lka: float
    best_val_loss_nolka: float
    manifest: str
