"""The four runnable jobs behind the CLI and the HTTP service.

Every job writes a ``manifest.json`` into its output directory recording
the command, resolved configuration, inputs, seed, tool version, and
wall-clock timestamps.  Numeric outputs are fully determined by the
manifest minus its timestamps.
"""

from __future__ import annotations

import datetime
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__, so3
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (NormStats, Sequence, compute_norm_stats, load_sequence,
                      make_windows, split_sequence, write_gt_csv, write_imu_csv)
from .errors import ConfigError, DataError
from .model import (CalibNet, ModelConfig, load_model_config,
                    model_config_from_dict, param_count, parse_kv_file,
                    MODEL_CONFIG_KEYS)
from .synth import ErrorModel, SynthScenario, corrupt, generate_truth, samples_to_arrays
from .training import (SequenceEval, TrainConfig, TRAIN_CONFIG_KEYS,
                       evaluate_sequence, train, train_config_from_dict)

AOE_CSV = "aoe.csv"
ABLATION_CSV = "ablation.csv"


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_manifest(out_dir: str, command: str, config: dict, inputs: list[str],
                   seed, started: str) -> str:
    path = os.path.join(out_dir, "manifest.json")
    payload = {
        "command": command,
        "config": config,
        "inputs": sorted(str(p) for p in inputs),
        "out_dir": str(out_dir),
        "seed": seed,
        "version": __version__,
        "started_utc": started,
        "finished_utc": _utc_now(),
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=1, default=str)
        fh.write("\n")
    return path


def _ensure_out_dir(out_dir) -> str:
    out_dir = str(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out_dir}: {e}") from e
    return out_dir


def _load_configs(path) -> tuple[ModelConfig, TrainConfig, dict[str, str]]:
    raw = parse_kv_file(path)
    unknown = sorted(set(raw) - MODEL_CONFIG_KEYS - TRAIN_CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")
    return model_config_from_dict(raw), train_config_from_dict(raw), raw


def _check_seed(seed) -> int:
    seed = int(seed)
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    return seed


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

_SCENARIO_KEYS = {"duration_s", "rate_hz", "profile", "seed", "constant_omega",
                  "sinusoid_amplitude", "sinusoid_frequency"}


def load_scenario(path) -> SynthScenario:
    raw = parse_kv_file(path)
    unknown = sorted(set(raw) - _SCENARIO_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown scenario keys: {', '.join(unknown)}")
    kwargs: dict = {}
    try:
        if "duration_s" in raw:
            kwargs["duration_s"] = float(raw["duration_s"])
        if "rate_hz" in raw:
            kwargs["rate_hz"] = float(raw["rate_hz"])
        if "profile" in raw:
            kwargs["profile"] = raw["profile"]
        if "seed" in raw:
            kwargs["seed"] = int(raw["seed"])
        if "constant_omega" in raw:
            kwargs["constant_omega"] = np.array(
                [float(v) for v in raw["constant_omega"].split(",")]
            )
        if "sinusoid_amplitude" in raw:
            kwargs["sinusoid_amplitude"] = float(raw["sinusoid_amplitude"])
        if "sinusoid_frequency" in raw:
            kwargs["sinusoid_frequency"] = float(raw["sinusoid_frequency"])
        return SynthScenario(**kwargs)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e


@dataclass
class SynthOutput:
    imu_csv: str
    gt_csv: str
    error_model_json: str
    manifest: str
    samples: int


def run_synth(scenario_path, error_model_path, out_dir, seed: int | None = None) -> SynthOutput:
    """Generate a corrupted recording pair readable by the dataset loader."""
    started = _utc_now()
    out_dir = _ensure_out_dir(out_dir)
    scenario = load_scenario(scenario_path)
    if seed is not None:
        scenario.seed = _check_seed(seed)
    try:
        model = ErrorModel.load(error_model_path)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read error model {error_model_path}: {e}") from e

    traj, omega, accel = generate_truth(scenario)
    samples = corrupt(traj.timestamps, omega, accel, model, seed=scenario.seed + 1)
    t, gyro, meas_accel = samples_to_arrays(samples)

    imu_csv = os.path.join(out_dir, "imu.csv")
    gt_csv = os.path.join(out_dir, "gt.csv")
    em_json = os.path.join(out_dir, "error_model.json")
    write_imu_csv(imu_csv, t, gyro, meas_accel)
    write_gt_csv(gt_csv, traj.timestamps, traj.rotations)
    model.save(em_json)
    manifest = write_manifest(
        out_dir, "synth", {**asdict(scenario), "error_model": str(error_model_path)},
        [scenario_path, error_model_path], scenario.seed, started,
    )
    return SynthOutput(imu_csv, gt_csv, em_json, manifest, len(samples))


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _load_split(path) -> dict:
    try:
        with open(path, "r", encoding="ascii") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read split file {path}: {e}") from e


def load_training_sequences(dataset_dirs, split_path=None) -> list[Sequence]:
    names = None
    if split_path is not None:
        split = _load_split(split_path)
        names = set(split.get("train", []))
    seqs = []
    for d in dataset_dirs:
        seq = load_sequence(d)
        if names is None or seq.name in names:
            seqs.append(seq)
    if not seqs:
        raise DataError("no training sequences after applying the split file")
    return seqs


def prepare_windows(seqs: list[Sequence], cfg: TrainConfig):
    """Split each sequence head/tail, fit stats on the heads, window both."""
    heads, tails = [], []
    for seq in seqs:
        head, tail = split_sequence(seq, cfg.train_seconds)
        heads.append(head)
        if tail is not None:
            tails.append(tail)
    if not tails:
        raise DataError(
            "no validation data: every sequence is shorter than the train split"
        )
    stats = compute_norm_stats(heads)
    train_windows, val_windows = [], []
    for head in heads:
        s = compute_norm_stats([head]) if cfg.norm_per_sequence else stats
        train_windows.extend(make_windows(head, s, cfg.window, cfg.effective_stride))
    for tail in tails:
        s = compute_norm_stats([tail]) if cfg.norm_per_sequence else stats
        val_windows.extend(make_windows(tail, s, cfg.window, cfg.window))
    return train_windows, val_windows, stats


@dataclass
class TrainOutput:
    checkpoint_best: str
    checkpoint_final: str
    report_csv: str
    norm_stats_json: str
    manifest: str
    param_count: int
    epochs: int
    best_val_loss: float
    final_val_loss: float


def run_train(dataset_dirs, config_path, out_dir, seed: int | None = None,
              split_path=None) -> TrainOutput:
    started = _utc_now()
    out_dir = _ensure_out_dir(out_dir)
    model_cfg, train_cfg, raw_cfg = _load_configs(config_path)
    if seed is not None:
        train_cfg.seed = _check_seed(seed)
    seqs = load_training_sequences(dataset_dirs, split_path)
    train_windows, val_windows, stats = prepare_windows(seqs, train_cfg)

    result = train(train_windows, val_windows, model_cfg, train_cfg)

    best_path = os.path.join(out_dir, "checkpoint_best.bin")
    final_path = os.path.join(out_dir, "checkpoint_final.bin")
    report_path = os.path.join(out_dir, "train_report.csv")
    stats_path = os.path.join(out_dir, "norm_stats.json")
    save_checkpoint(best_path, result.best_state)
    save_checkpoint(final_path, result.net.state_arrays())
    result.report.to_csv(report_path)
    stats.save(stats_path)
    manifest = write_manifest(
        out_dir, "train", dict(raw_cfg),
        [config_path, *map(str, dataset_dirs)] + ([str(split_path)] if split_path else []),
        train_cfg.seed, started,
    )
    return TrainOutput(
        checkpoint_best=best_path,
        checkpoint_final=final_path,
        report_csv=report_path,
        norm_stats_json=stats_path,
        manifest=manifest,
        param_count=param_count(model_cfg),
        epochs=train_cfg.epochs,
        best_val_loss=result.report.best_val_loss,
        final_val_loss=result.report.rows[-1].val_loss,
    )


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


@dataclass
class EvalRow:
    sequence: str
    aoe_deg_calibrated: float
    aoe_deg_raw: float | None


@dataclass
class EvalOutput:
    rows: list[EvalRow]
    aoe_csv: str
    orientation_csvs: list[str]
    manifest: str


def _write_aoe_csv(path, rows: list[EvalRow]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("sequence,aoe_deg_calibrated,aoe_deg_raw\n")
        for r in rows:
            raw = "" if r.aoe_deg_raw is None else repr(r.aoe_deg_raw)
            fh.write(f"{r.sequence},{r.aoe_deg_calibrated!r},{raw}\n")


def _write_orientation_csv(path, ev: SequenceEval) -> None:
    gt_e = np.degrees(so3.euler_zyx(ev.gt.rotations))
    cal_e = np.degrees(so3.euler_zyx(ev.calibrated.rotations))
    raw_e = np.degrees(so3.euler_zyx(ev.raw.rotations)) if ev.raw is not None else None

    def row(i, t):
        cells = [repr(float(t))]
        cells += [repr(float(v)) for v in gt_e[i]]
        cells += [repr(float(v)) for v in raw_e[i]] if raw_e is not None else ["", "", ""]
        cells += [repr(float(v)) for v in cal_e[i]]
        return ",".join(cells)

    with open(path, "w", encoding="ascii") as fh:
        fh.write("timestamp_s,roll_gt_deg,pitch_gt_deg,yaw_gt_deg,"
                 "roll_raw_deg,pitch_raw_deg,yaw_raw_deg,"
                 "roll_cal_deg,pitch_cal_deg,yaw_cal_deg\n")
        for i, t in enumerate(ev.timestamps):
            fh.write(row(i, t) + "\n")


def _restore_net(checkpoint_path, model_cfg: ModelConfig) -> CalibNet:
    try:
        arrays = load_checkpoint(checkpoint_path)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read checkpoint {checkpoint_path}: {e}") from e
    net = CalibNet(model_cfg, seed=0)
    net.load_state(arrays)
    return net


def run_eval(checkpoint_path, config_path, dataset_dirs, out_dir,
             norm_stats_path=None, raw_baseline: bool = True,
             yaw_only: bool = False, seed: int | None = None) -> EvalOutput:
    started = _utc_now()
    out_dir = _ensure_out_dir(out_dir)
    model_cfg = load_model_config(config_path)
    net = _restore_net(checkpoint_path, model_cfg)
    if norm_stats_path is None:
        norm_stats_path = os.path.join(os.path.dirname(str(checkpoint_path)),
                                       "norm_stats.json")
    try:
        stats = NormStats.load(norm_stats_path)
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise ConfigError(f"cannot read normalization stats {norm_stats_path}: {e}") from e

    align = "yaw" if yaw_only else "full"
    rows: list[EvalRow] = []
    orientation_csvs: list[str] = []
    for d in sorted(str(p) for p in dataset_dirs):
        seq = load_sequence(d)
        ev = evaluate_sequence(net, seq, stats, raw_baseline=raw_baseline, align=align)
        rows.append(EvalRow(seq.name, ev.aoe_deg_calibrated, ev.aoe_deg_raw))
        opath = os.path.join(out_dir, f"orientation_{seq.name}.csv")
        _write_orientation_csv(opath, ev)
        orientation_csvs.append(opath)
    rows.sort(key=lambda r: r.sequence)

    aoe_path = os.path.join(out_dir, AOE_CSV)
    _write_aoe_csv(aoe_path, rows)
    manifest = write_manifest(
        out_dir, "eval",
        {"checkpoint": str(checkpoint_path), "config": str(config_path),
         "norm_stats": str(norm_stats_path), "raw_baseline": raw_baseline,
         "yaw_only": yaw_only},
        [checkpoint_path, config_path, *map(str, dataset_dirs)], seed, started,
    )
    return EvalOutput(rows, aoe_path, orientation_csvs, manifest)


# --------------------------------------------------------------------------
# ablate
# --------------------------------------------------------------------------


@dataclass
class AblateRow:
    sequence: str
    aoe_deg_lka: float
    aoe_deg_nolka: float


@dataclass
class AblateOutput:
    rows: list[AblateRow]
    comparison_csv: str
    lka_dir: str
    nolka_dir: str
    param_count_lka: int
    param_count_nolka: int
    best_val_loss_lka: float
    best_val_loss_nolka: float
    manifest: str


def run_ablate(dataset_dirs, config_path, out_dir, seed: int | None = None,
               test_dataset_dirs=None, split_path=None) -> AblateOutput:
    """Train twice from one seed with the attention block on and off, then
    evaluate both on the test sequences (the training dirs when no test
    set is given) and write the side-by-side comparison."""
    started = _utc_now()
    out_dir = _ensure_out_dir(out_dir)
    model_cfg, train_cfg, raw_cfg = _load_configs(config_path)
    if seed is not None:
        train_cfg.seed = _check_seed(seed)
    test_dirs = list(test_dataset_dirs) if test_dataset_dirs else list(dataset_dirs)

    variants = {}
    for label, enabled in (("lka", True), ("nolka", False)):
        sub = os.path.join(out_dir, f"with_{label}" if enabled else "without_lka")
        cfg_path = os.path.join(_ensure_out_dir(sub), "config_used.txt")
        lines = {**raw_cfg, "lka_enabled": "true" if enabled else "false"}
        with open(cfg_path, "w", encoding="ascii") as fh:
            for k, v in lines.items():
                fh.write(f"{k} = {v}\n")
        variants[label] = run_train(dataset_dirs, cfg_path, sub,
                                    seed=train_cfg.seed, split_path=split_path)

    rows: list[AblateRow] = []
    evals = {}
    for label in ("lka", "nolka"):
        tr = variants[label]
        ev = run_eval(tr.checkpoint_best, os.path.join(os.path.dirname(tr.checkpoint_best),
                                                       "config_used.txt"),
                      test_dirs, os.path.join(os.path.dirname(tr.checkpoint_best), "eval"),
                      norm_stats_path=tr.norm_stats_json)
        evals[label] = {r.sequence: r.aoe_deg_calibrated for r in ev.rows}
    for name in sorted(evals["lka"]):
        rows.append(AblateRow(name, evals["lka"][name], evals["nolka"][name]))

    cmp_path = os.path.join(out_dir, ABLATION_CSV)
    with open(cmp_path, "w", encoding="ascii") as fh:
        fh.write("sequence,aoe_deg_lka,aoe_deg_nolka\n")
        for r in rows:
            fh.write(f"{r.sequence},{r.aoe_deg_lka!r},{r.aoe_deg_nolka!r}\n")
        if rows:
            avg_l = float(np.mean([r.aoe_deg_lka for r in rows]))
            avg_n = float(np.mean([r.aoe_deg_nolka for r in rows]))
            fh.write(f"average,{avg_l!r},{avg_n!r}\n")

    manifest = write_manifest(
        out_dir, "ablate", dict(raw_cfg),
        [config_path, *map(str, dataset_dirs), *map(str, test_dirs)],
        train_cfg.seed, started,
    )
    return AblateOutput(
        rows=rows,
        comparison_csv=cmp_path,
        lka_dir=os.path.dirname(variants["lka"].checkpoint_best),
        nolka_dir=os.path.dirname(variants["nolka"].checkpoint_best),
        param_count_lka=variants["lka"].param_count,
        param_count_nolka=variants["nolka"].param_count,
        best_val_loss_lka=variants["lka"].best_val_loss,
        best_val_loss_nolka=variants["nolka"].best_val_loss,
        manifest=manifest,
    )
