"""Command implementations behind the CLI.

Every command reads a validated :class:`RunConfig`, writes its outputs under
``run.out`` and returns a small result object. Everything written except
``timing.txt`` is a deterministic function of the config, so reruns produce
byte-identical files.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from protomoco import checkpoint, data, gradcheck
from protomoco import rng as rngmod
from protomoco.autodiff import DimensionError, ParameterSet
from protomoco.config import RunConfig, dump
from protomoco.contrastive import EpochMetrics, pretrain
from protomoco.fewshot import (
    Episode,
    EpisodeInfeasibleError,
    EpisodeRecord,
    LabeledSample,
    finetune,
    make_embedder,
    predict_episode,
    sample_episode,
    sample_eval_episode,
)
from protomoco.metrics import (
    ConfusionCounts,
    ScoredSample,
    UndefinedMetricError,
    plan_group_kfold,
    precision,
    recall,
    roc_auc,
)
from protomoco.models import check_compatible, init_params

log = logging.getLogger(__name__)

PRETRAIN_CKPT = "pretrain.ckpt"
FEWSHOT_CKPT = "fewshot.ckpt"
METRICS = ("accuracy", "precision", "recall", "auc")

# (episode, psi) -> (predicted class ids, posterior rows in episode.classes order)
Predictor = Callable[[Episode, Callable[[np.ndarray], np.ndarray]], tuple[np.ndarray, np.ndarray]]


class IncompatibleCheckpointError(RuntimeError):
    pass


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(cfg: RunConfig, out: Path, command: str) -> Path:
    path = out / f"{command}.config"
    path.write_text(dump(cfg))
    return path


def _write_timing(out: Path, command: str, seconds: float) -> None:
    with (out / "timing.txt").open("a") as fh:
        fh.write(f"{command} = {seconds:.3f}\n")


def _load_samples(cfg: RunConfig) -> list[LabeledSample]:
    return data.load_dataset(cfg["data.root"], cfg["data.image_size"])


def _encoder_params(cfg: RunConfig, ckpt: str | os.PathLike | None) -> ParameterSet:
    """Encoder weights from ``ckpt``, or the He initialization for ``run.seed``."""
    model = cfg.encoder()
    if ckpt is None:
        return init_params(model, cfg["run.seed"]).subset("encoder.").copy()
    arrays = checkpoint.load(ckpt)
    try:
        check_compatible(model, arrays, "encoder.")
    except DimensionError as exc:
        raise IncompatibleCheckpointError(f"{ckpt}: {exc}") from None
    return ParameterSet.from_arrays({k: v for k, v in arrays.items() if k.startswith("encoder.")})


# -- synth-data ------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out: str | os.PathLike | None = None) -> Path:
    """Write the synthetic dataset to ``out`` (default ``data.root``)."""
    root = Path(out if out is not None else cfg["data.root"])
    data.synth_dataset(root, cfg["synth.n_per_class"], cfg["synth.classes"], cfg["data.image_size"],
                       cfg["synth.groups_per_class"], cfg["run.seed"])
    return root


# -- pretrain -----------------------------------------------------------------------


PRETRAIN_COLUMNS = ("epoch", "lr", "loss", "pos_sim", "neg_sim", "gap")


@dataclass
class PretrainResult:
    checkpoint: Path
    log: Path
    history: list[EpochMetrics]


def cmd_pretrain(cfg: RunConfig) -> PretrainResult:
    """Contrastive pretraining on the dataset images (labels ignored)."""
    start = time.perf_counter()
    out = _out_dir(cfg)
    _write_config(cfg, out, "pretrain")
    images = np.stack([s.image for s in _load_samples(cfg)])
    log_path = out / "pretrain_log.csv"
    with log_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PRETRAIN_COLUMNS)

        def on_epoch(m: EpochMetrics) -> None:
            writer.writerow([m.epoch, repr(m.lr), repr(m.loss), repr(m.pos_sim), repr(m.neg_sim), repr(m.gap)])
            fh.flush()

        pair, _, history = pretrain(images, cfg.encoder(), cfg.pretrain(), cfg.augmentation(), cfg["run.seed"],
                                    on_epoch=on_epoch)
    ckpt = out / PRETRAIN_CKPT
    checkpoint.save(ckpt, pair.theta_q.arrays())
    _write_timing(out, "pretrain", time.perf_counter() - start)
    return PretrainResult(ckpt, log_path, history)


# -- fewshot ------------------------------------------------------------------------


EPISODE_COLUMNS = ("episode", "loss", "accuracy")


@dataclass
class FewshotResult:
    checkpoint: Path
    log: Path
    records: list[EpisodeRecord]


def _episodes(samples, cfg: RunConfig, rng: np.random.Generator):
    meta = cfg.meta()
    for _ in range(meta.episodes):
        yield sample_episode(samples, meta.ways, meta.shots, rng)


def cmd_fewshot(cfg: RunConfig, ckpt: str | os.PathLike | None) -> FewshotResult:
    """Episodic fine-tuning of the encoder on the whole labeled dataset."""
    start = time.perf_counter()
    out = _out_dir(cfg)
    _write_config(cfg, out, "fewshot")
    samples = _load_samples(cfg)
    params = _encoder_params(cfg, ckpt)
    rng = rngmod.stream(cfg["run.seed"], "finetune")
    params, records = finetune(params, cfg.encoder(), _episodes(samples, cfg, rng), cfg.meta())
    arrays = checkpoint.load(ckpt) if ckpt is not None else {}
    arrays.update(params.arrays())
    path = out / FEWSHOT_CKPT
    checkpoint.save(path, arrays)
    log_path = out / "episodes.csv"
    with log_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EPISODE_COLUMNS)
        for r in records:
            writer.writerow([r.episode, repr(r.loss), repr(r.accuracy)])
    _write_timing(out, "fewshot", time.perf_counter() - start)
    return FewshotResult(path, log_path, records)


# -- eval ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    status: str
    queries: int = 0
    metrics: dict[str, float | None] = field(default_factory=dict)


@dataclass
class RunReport:
    seed: int
    checkpoint: str
    folds: list[FoldResult]
    summary: dict[str, tuple[float | None, float | None, int]]
    config_text: str

    def metric(self, name: str) -> float | None:
        return self.summary[name][0]

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}", f"checkpoint = {self.checkpoint}",
                 f"folds = {len(self.folds)}",
                 f"folds_evaluated = {sum(f.status == 'ok' for f in self.folds)}",
                 f"folds_skipped = {sum(f.status != 'ok' for f in self.folds)}"]
        for name, (mean, std, undefined) in self.summary.items():
            lines.append(f"{name}_mean = {format_value(mean)}")
            lines.append(f"{name}_std = {format_value(std)}")
            lines.append(f"{name}_undefined_folds = {undefined}")
        for f in self.folds:
            lines.append(f"fold.{f.fold}.status = {f.status}")
            lines.append(f"fold.{f.fold}.queries = {f.queries}")
            for name in METRICS:
                if name in f.metrics:
                    lines.append(f"fold.{f.fold}.{name} = {format_value(f.metrics[name])}")
        lines += [f"config.{line}" for line in self.config_text.splitlines()]
        return "\n".join(lines) + "\n"

    def to_csv_rows(self) -> list[list[str]]:
        rows = [["row", "status", "queries", *METRICS]]
        for f in self.folds:
            rows.append([f"fold{f.fold}", f.status, str(f.queries),
                         *[format_value(f.metrics.get(m)) for m in METRICS]])
        rows.append(["mean", "", "", *[format_value(self.summary[m][0]) for m in METRICS]])
        rows.append(["std", "", "", *[format_value(self.summary[m][1]) for m in METRICS]])
        return rows


def format_value(value: float | None) -> str:
    return "undefined" if value is None else repr(float(value))


def _safe(metric: Callable[[], float]) -> float | None:
    try:
        return metric()
    except UndefinedMetricError:
        return None


def _summarize(folds: list[FoldResult]) -> dict[str, tuple[float | None, float | None, int]]:
    """Mean and sample std over folds where the metric is defined."""
    summary = {}
    for name in METRICS:
        values = [f.metrics[name] for f in folds if f.status == "ok" and f.metrics.get(name) is not None]
        undefined = sum(1 for f in folds if f.status == "ok" and f.metrics.get(name) is None)
        mean = float(np.mean(values)) if values else None
        std = float(np.std(values, ddof=1)) if len(values) >= 2 else None
        summary[name] = (mean, std, undefined)
    return summary


def _evaluate_fold(fold: int, train: list[LabeledSample], test: list[LabeledSample], params: ParameterSet,
                   cfg: RunConfig, predictor: Predictor | None) -> FoldResult:
    seed, meta, model = cfg["run.seed"], cfg.meta(), cfg.encoder()
    positive = cfg["eval.positive_class"]
    if cfg["eval.finetune"] and meta.episodes > 0:
        rng = rngmod.stream(seed, "eval-finetune", fold)
        params, _ = finetune(params, model, _episodes(train, cfg, rng), meta)
    psi = make_embedder(params, model)
    rng = rngmod.stream(seed, "eval-episodes", fold)
    predicted, truth, scored = [], [], []
    for _ in range(cfg["eval.episodes"]):
        episode = sample_eval_episode(train, test, meta.ways, meta.shots, rng)
        pred, post = (predictor or _default_predictor(meta.distance))(episode, psi)
        targets = [c for _, c in episode.queries]
        predicted += [int(p) for p in pred]
        truth += targets
        if positive in episode.classes:
            column = episode.classes.index(positive)
            scored += [ScoredSample(float(row[column]), t == positive) for row, t in zip(post, targets)]
    counts = ConfusionCounts.from_predictions(predicted, truth, positive)
    metrics = {
        "accuracy": float(np.mean(np.array(predicted) == np.array(truth))),
        "precision": _safe(lambda: precision(counts)),
        "recall": _safe(lambda: recall(counts)),
        "auc": _safe(lambda: roc_auc(scored)),
    }
    return FoldResult(fold, "ok", len(truth), metrics)


def _default_predictor(distance: str) -> Predictor:
    return lambda episode, psi: predict_episode(episode, psi, distance)


def cmd_eval(cfg: RunConfig, ckpt: str | os.PathLike | None, predictor: Predictor | None = None) -> RunReport:
    """Group-level k-fold episodic evaluation.

    For each fold the held-out groups supply the queries and the remaining
    groups supply support samples (and fine-tuning episodes when
    ``eval.finetune`` is set). ``ckpt=None`` evaluates the He-initialized
    encoder. ``predictor`` replaces prototype prediction (test hook).
    """
    start = time.perf_counter()
    out = _out_dir(cfg)
    config_path = _write_config(cfg, out, "eval")
    samples = [s for s in _load_samples(cfg) if s.label >= 0]
    group_class = {}
    for s in samples:
        group_class.setdefault(s.group_id, s.label)
    plan = plan_group_kfold([s.group_id for s in samples], cfg["eval.folds"], cfg["run.seed"], strata=group_class)
    base = _encoder_params(cfg, ckpt)
    folds = []
    for fold in range(plan.k):
        held = set(plan.groups_in(fold))
        train = [s for s in samples if s.group_id not in held]
        test = [s for s in samples if s.group_id in held]
        try:
            folds.append(_evaluate_fold(fold, train, test, base.copy(), cfg, predictor))
        except EpisodeInfeasibleError as exc:
            log.warning("fold %d skipped: %s", fold, exc)
            folds.append(FoldResult(fold, f"skipped: {exc}"))
    report = RunReport(cfg["run.seed"], "none" if ckpt is None else str(ckpt), folds, _summarize(folds),
                       config_path.read_text())
    (out / "report.txt").write_text(report.to_text())
    with (out / "report.csv").open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(report.to_csv_rows())
    _write_timing(out, "eval", time.perf_counter() - start)
    return report


# -- gradcheck ---------------------------------------------------------------------


def cmd_gradcheck(cfg: RunConfig, corrupt_op: str | None = None) -> tuple[list[gradcheck.OpResult], str]:
    dtype = np.float64 if cfg["gradcheck.precision"] == "float64" else np.float32
    results = gradcheck.run_suite(cfg["gradcheck.instances"], cfg["run.seed"], dtype, corrupt_op=corrupt_op)
    return results, gradcheck.format_table(results)
