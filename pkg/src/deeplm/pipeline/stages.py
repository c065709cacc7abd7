"""Pipeline stages. Each reads prior artifacts by path under ``out_dir`` and
writes its outputs plus a manifest."""

from __future__ import annotations

import json
import logging
import shutil
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from ..cohortsim import generate_cohort, read_cohort, write_cohort
from ..convnet.checkpoint import load_checkpoint, save_checkpoint
from ..convnet.training import ScoreModel, kfold_evaluate, score_patient
from ..errors import ConfigError, StageError
from ..experiment import (
    PI1_COVARIATES,
    PI2_COVARIATES,
    cohort_folds,
    day_models,
    evaluate_models,
    quartile_trajectories,
    warning_lead_times,
)
from ..instances import ChannelScaler, build_instances, read_instance_store, stack, undersample, write_instance_store
from ..landmark.cox import fit_competing_risks, model_to_text
from ..landmark.evaluation import covariate_impact, split_patients
from ..landmark.superdata import SuperDataset, build_super_dataset
from ..saliency import classify_conditions, cluster_report, extract_salient_window, saliency_maps
from . import plotting
from .config import PipelineConfig
from .manifest import StageRun, load_manifests

log = logging.getLogger(__name__)

MODEL_SETS = {"pi1": PI1_COVARIATES, "pi2": PI2_COVARIATES}


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def _write_text(text: str, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _write_json(obj, path: Path) -> Path:
    return _write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", path)


def _models_arg(models: Sequence[str]) -> list[str]:
    models = list(models)
    bad = [m for m in models if m not in MODEL_SETS]
    if bad or not models:
        raise ConfigError(f"models must be a non-empty subset of {sorted(MODEL_SETS)}, got {models}")
    return sorted(models)


# ---------------------------------------------------------------------------
# Shared readers

def _cohort(run: StageRun):
    return read_cohort(run.require(run.out_dir / "cohort", "simulate"))


def _cnn_models(run: StageRun, cfg: PipelineConfig) -> tuple[list, dict]:
    cnn = run.out_dir / "cnn"
    folds = pd.read_csv(run.require(cnn / "folds.csv", "train-cnn"))
    models = []
    for f in range(cfg.cnn_folds):
        net = load_checkpoint(run.require(cnn / f"fold_{f}.ckpt", "train-cnn"))
        sc = pd.read_csv(run.require(cnn / f"scaler_{f}.csv", "train-cnn"), float_precision="round_trip")
        models.append(ScoreModel(net, ChannelScaler(sc["min"].to_numpy(float), sc["max"].to_numpy(float)), cfg.bin_minutes))
    return models, dict(zip(folds["patient_id"].astype(int), folds["fold"].astype(int)))


def _scores(run: StageRun) -> dict:
    frame = pd.read_csv(run.require(run.out_dir / "scores.csv", "score"), float_precision="round_trip")
    return {int(pid): list(zip(g["window_end"], g["score"])) for pid, g in frame.groupby("patient_id")}


def _super_dataset(run: StageRun, cfg: PipelineConfig, cohort, models: Sequence[str]) -> SuperDataset:
    scores = _scores(run) if "pi2" in models else None
    return build_super_dataset(cohort, scores, cfg.grid())


# ---------------------------------------------------------------------------
# Stages

def stage_simulate(run: StageRun, cfg: PipelineConfig, **_) -> list[Path]:
    cohort = generate_cohort(cfg.sim_config())
    write_cohort(cohort, _fresh_dir(run.out_dir / "cohort"))
    return [run.out_dir / "cohort", _write_text(cfg.to_text(), run.out_dir / "config.txt")]


def stage_extract(run: StageRun, cfg: PipelineConfig, **_) -> list[Path]:
    cohort = _cohort(run)
    s = cfg.cnn_settings()
    pool = undersample(build_instances(cohort, s.width, s.shifts), s.ratio, s.seed)
    write_instance_store(pool, _fresh_dir(run.out_dir / "instances"))
    return [run.out_dir / "instances"]


def stage_train_cnn(run: StageRun, cfg: PipelineConfig, **_) -> list[Path]:
    cohort = _cohort(run)
    pool = read_instance_store(run.require(run.out_dir / "instances", "extract"))
    s = cfg.cnn_settings()
    folds = cohort_folds(cohort, s.k, s.seed)
    res = kfold_evaluate(pool, s.k, s.arch, s.train, s.seed, folds, s.bin_minutes)
    cnn = run.out_dir / "cnn"
    cnn.mkdir(parents=True, exist_ok=True)
    paths = []
    for f, model in enumerate(res.models):
        paths.append(save_checkpoint(model.network, cnn / f"fold_{f}.ckpt"))
        sc = pd.DataFrame({"row": np.arange(len(model.scaler.mins)), "min": model.scaler.mins, "max": model.scaler.maxs})
        paths.append(_write_csv(sc, cnn / f"scaler_{f}.csv"))
    paths.append(_write_csv(pd.DataFrame(sorted(folds.items()), columns=["patient_id", "fold"]), cnn / "folds.csv"))
    log_rows = [dict(epoch=e + 1, loss=l, fold=f) for f, h in enumerate(res.histories) for e, l in enumerate(h)]
    paths.append(_write_csv(pd.DataFrame(log_rows, columns=["epoch", "loss", "fold"]), cnn / "training_log.csv"))
    cv = pd.DataFrame({"fold": range(s.k), "auroc": res.fold_aurocs})
    paths.append(_write_csv(cv, cnn / "cv_auroc.csv"))
    return paths


def stage_score(run: StageRun, cfg: PipelineConfig, **_) -> list[Path]:
    cohort = _cohort(run)
    models, folds = _cnn_models(run, cfg)
    rows = []
    for p in cohort:
        if p.id not in folds:
            raise StageError(f"patient {p.id} has no CNN fold; rerun train-cnn")
        for end, score in score_patient(models[folds[p.id]], p, cfg.score_stride_hours, cfg.window_hours):
            rows.append((p.id, end, score))
    return [_write_csv(pd.DataFrame(rows, columns=["patient_id", "window_end", "score"]), run.out_dir / "scores.csv")]


def stage_landmark_fit(run: StageRun, cfg: PipelineConfig, models: Sequence[str] = ("pi1", "pi2"), **_) -> list[Path]:
    models = _models_arg(models)
    cohort = _cohort(run)
    sd = _super_dataset(run, cfg, cohort, models)
    lm = run.out_dir / "landmark"
    paths = [_write_csv(sd.frame, lm / "superdata.csv")]
    for name in models:
        fit = fit_competing_risks(sd, MODEL_SETS[name], cfg.standardize)
        paths.append(_write_text(model_to_text(fit), lm / f"model_{name}.txt"))
    return paths


def stage_evaluate(run: StageRun, cfg: PipelineConfig, models: Sequence[str] = ("pi1", "pi2"), **_) -> list[Path]:
    models = _models_arg(models)
    cohort = _cohort(run)
    sd = _super_dataset(run, cfg, cohort, models)
    ev = evaluate_models(
        sd, cohort, {m: MODEL_SETS[m] for m in models}, cfg.lm_folds, cfg.seed,
        cfg.bootstrap_replicates, cfg.confidence_level, cfg.standardize, cfg.test_fraction,
    )
    out = run.out_dir / "evaluate"
    table = ev.landmark_table()
    paths = [_write_csv(table, out / "auroc_landmarks.csv"), plotting.auroc_curves(table, _mkparent(out / "auroc_landmarks.svg"))]
    if "relative_increase" in table:
        rel = table[["t_lm", "relative_increase"]]
        paths += [_write_csv(rel, out / "relative_increase.csv"), plotting.relative_increase(rel, out / "relative_increase.svg")]

    # CIF trajectories of the richest model, refit on the full super-dataset.
    final = fit_competing_risks(sd, MODEL_SETS[models[-1]], cfg.standardize)
    traj = quartile_trajectories(sd, final)
    paths += [_write_csv(traj, out / "cif_quartiles.csv"), plotting.cif_quartiles(traj, out / "cif_quartiles.svg", cfg.warning_threshold)]

    leads = []
    for name, m in ev.models.items():
        lt = warning_lead_times(ev.super_dataset, m.predictions, cohort, cfg.warning_threshold)
        leads.append(lt.assign(model=name))
    leads = pd.concat(leads, ignore_index=True)
    paths.append(_write_csv(leads, out / "lead_times.csv"))

    summary = {
        "models": {
            name: {
                "covariates": m.covariates,
                "auroc_global": m.global_auroc,
                "ci": [m.ci_global.lo, m.ci_global.hi],
                "median_lead_hours": _nan_median(leads.loc[leads["model"] == name, "lead_hours"]),
                "warned_fraction": float(leads.loc[leads["model"] == name, "first_warning"].notna().mean()) if len(leads) else float("nan"),
            }
            for name, m in ev.models.items()
        },
        "warning_threshold": cfg.warning_threshold,
        "bootstrap_replicates": cfg.bootstrap_replicates,
        "confidence_level": cfg.confidence_level,
        "validation": "single split" if cfg.lm_folds <= 1 else f"{cfg.lm_folds}-fold",
        "evaluated_rows": int(len(ev.super_dataset)),
    }
    if ev.ci_difference is not None:
        first, last = list(ev.models)[0], list(ev.models)[-1]
        summary["difference"] = {
            "models": [last, first],
            "value": ev.models[last].global_auroc - ev.models[first].global_auroc,
            "ci": [ev.ci_difference.lo, ev.ci_difference.hi],
        }
    paths.append(_write_json(summary, out / "summary.json"))
    return paths


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _nan_median(values) -> float:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    return float(np.median(v)) if len(v) else float("nan")


def stage_heatmap(run: StageRun, cfg: PipelineConfig, models: Sequence[str] = ("pi1", "pi2"), **_) -> list[Path]:
    models = _models_arg(models)
    cohort = _cohort(run)
    sd = _super_dataset(run, cfg, cohort, models)
    covs = MODEL_SETS["pi2" if "pi2" in models else "pi1"]
    infected = {p.id: p.cause == 1 for p in cohort}
    ids = sorted(sd.frame["patient_id"].unique())
    test_ids = split_patients(ids, 1, cfg.seed, cfg.test_fraction, events=[infected[i] for i in ids])[0]
    test = sd.subset(test_ids)
    train = sd.subset(sorted(set(ids) - set(test_ids.tolist())))
    matrix = covariate_impact(train, covs, test, cfg.standardize)
    out = run.out_dir / "heatmap"
    frame = matrix.copy()
    frame.insert(0, "covariate", frame.index)
    return [_write_csv(frame, out / "heatmap.csv"), plotting.heatmap(matrix, _mkparent(out / "heatmap.svg"))]


def stage_saliency(run: StageRun, cfg: PipelineConfig, **_) -> list[Path]:
    pool = read_instance_store(run.require(run.out_dir / "instances", "extract"))
    models, folds = _cnn_models(run, cfg)
    chosen = [i for i in range(len(pool))][: cfg.saliency_instances]
    out = _fresh_dir(run.out_dir / "saliency")
    paths, windows = [], []
    weights = cfg.layer_weights or None
    for i in chosen:
        inst = pool[i]
        model = models[folds[inst.patient_id]]
        raw, _ = stack([inst])
        per_layer, combined = saliency_maps(model.network, model.preprocess(raw), weights)
        L = combined.shape[1]
        cols = {"position": np.arange(L)}
        for b, m in enumerate(per_layer):
            cols[f"layer_{b + 1}"] = np.repeat(m[0], L // m.shape[1])
        cols["combined"] = combined[0]
        paths.append(_write_csv(pd.DataFrame(cols), out / f"instance_{i}.csv"))
        win = extract_salient_window(combined[0], cfg.salient_window_hours, cfg.bin_minutes)
        cls = classify_conditions(inst, win)
        windows.append(
            dict(instance_id=i, patient_id=inst.patient_id, label=inst.label, fold=folds[inst.patient_id],
                 start_pos=win.start_pos, stop_pos=win.stop_pos, start_hours=win.start_hours,
                 end_hours=win.end_hours, condition_class=cls.id, conditions=cls.label, imputed_only=cls.imputed_only)
        )
    paths.append(_write_csv(pd.DataFrame(windows), out / "windows.csv"))
    return paths


def stage_cluster(run: StageRun, cfg: PipelineConfig, **_) -> list[Path]:
    cohort = _cohort(run)
    days = tuple(cfg.cluster_days)
    dm = day_models(cohort, days, cfg.cnn_settings(), cfg.cluster_band_hours)
    rep = cluster_report(dm, days, cfg.layer_weights or None, cfg.salient_window_hours)
    out = run.out_dir / "cluster"
    summary = {
        str(day): dict(rep.ks[day], alpha=0.05, rejects=bool(rep.ks[day]["p_value"] < 0.05)) for day in days
    }
    return [
        _write_csv(rep.histogram, out / "histogram.csv"),
        _write_csv(rep.records, out / "records.csv"),
        _write_json(summary, out / "summary.json"),
        plotting.cluster_histograms(rep.histogram, _mkparent(out / "histogram.svg")),
    ]


def stage_report(run: StageRun, cfg: PipelineConfig, **_) -> list[Path]:
    lines = ["# Run report", "", f"config hash: `{cfg.digest()}`", f"seed: {cfg.seed}", ""]
    cv = run.out_dir / "cnn" / "cv_auroc.csv"
    if cv.exists():
        run.require(cv)
        a = pd.read_csv(cv)["auroc"]
        lines += ["## CNN", "", f"fold AUROCs: {', '.join(f'{v:.3f}' for v in a)} (mean {a.mean():.3f})", ""]
    ev = run.out_dir / "evaluate" / "summary.json"
    if ev.exists():
        run.require(ev)
        s = json.loads(ev.read_text())
        lines += ["## Landmark models", ""]
        for name, m in s["models"].items():
            lines.append(
                f"- {name}: AUROC_global {m['auroc_global']:.4f} "
                f"[{m['ci'][0]:.4f}, {m['ci'][1]:.4f}], median warning lead {m['median_lead_hours']:.1f} h"
            )
        if "difference" in s:
            d = s["difference"]
            lines.append(f"- {d['models'][0]} - {d['models'][1]}: {d['value']:+.4f} [{d['ci'][0]:+.4f}, {d['ci'][1]:+.4f}]")
        lines.append("")
    cl = run.out_dir / "cluster" / "summary.json"
    if cl.exists():
        run.require(cl)
        s = json.loads(cl.read_text())
        lines += ["## Salient-pattern clustering", ""]
        for day, r in sorted(s.items(), key=lambda kv: int(kv[0])):
            lines.append(f"- day {day}: KS D = {r['statistic']:.3f}, p = {r['p_value']:.3g} (n = {r['n_infected']} / {r['n_control']})")
        lines.append("")
    lines += ["## Artifacts", ""]
    for stage, m in load_manifests(run.out_dir).items():
        if stage == "report":
            continue
        for rel, digest in m["outputs"].items():
            lines.append(f"- `{rel}` ({stage}) sha256 {digest[:16]}")
    return [_write_text("\n".join(lines) + "\n", run.out_dir / "report.md")]


STAGES: dict[str, Callable] = {
    "simulate": stage_simulate,
    "extract": stage_extract,
    "train-cnn": stage_train_cnn,
    "score": stage_score,
    "landmark-fit": stage_landmark_fit,
    "evaluate": stage_evaluate,
    "heatmap": stage_heatmap,
    "saliency": stage_saliency,
    "cluster": stage_cluster,
    "report": stage_report,
}


def run_stage(name: str, cfg: PipelineConfig, out_dir, **options) -> StageRun:
    if name not in STAGES:
        raise ConfigError(f"unknown stage {name!r}; choose from {', '.join(STAGES)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = StageRun(out_dir, name, cfg, cfg.seed)
    outputs = STAGES[name](run, cfg, **options)
    run.produced(outputs)
    run.write()
    return run
