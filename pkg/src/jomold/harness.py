"""Run manifests, pipeline phases and the benchmark grid.

The CLI is a thin layer over this module; the acceptance tests drive the grid
directly.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import denoiser as dn
from . import model as mdl
from . import training as tr
from .config import ExperimentConfig, parse_mode
from .errors import JomoldError
from .metrics import ParsingReport
from .synthgen import Dataset, generate_dataset, read_dataset, split_dataset
from .tensorcore import RNG_ALGORITHM

log = logging.getLogger(__name__)

CONSTANT_RATIOS = (0.1, 0.2, 0.3, 0.4, 0.5)
BENCHMARK_MODES = ("none", "inmold", "audio_only", "visual_only", "jomold") + tuple(
    f"constant_ratio({r})" for r in CONSTANT_RATIOS
)
REPORT_METRICS = tuple(
    f"{level}_{k}"
    for level in ("segment", "event")
    for k in ("audio", "visual", "av", "type_at_av", "event_at_av")
) + tuple(
    f"denoise_{m}_{k}" for m in ("audio", "visual") for k in ("precision", "recall", "f1")
)
SUMMARY_METRICS = REPORT_METRICS + ("ratio_mae",)
# comparison CSV header: one row per grid label, mean and population std over
# the successful seeds
BENCHMARK_COLUMNS = ("label", "mode", "runs", "failed") + tuple(
    f"{m}_{stat}" for m in SUMMARY_METRICS for stat in ("mean", "std")
)
RUN_COLUMNS = ("label", "mode", "seed", "status", "error") + SUMMARY_METRICS


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def thread_cap(requested: int | None = None) -> int:
    """Worker count: ``requested`` (default: CPU count) capped by ``JOMOLD_THREADS``."""
    n = requested if requested else (os.cpu_count() or 1)
    cap = os.environ.get("JOMOLD_THREADS", "").strip()
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            log.warning("ignoring non-integer JOMOLD_THREADS=%r", cap)
    return max(1, n)


def dataset_for_seed(cfg: ExperimentConfig, seed: int, dataset_path=None) -> Dataset:
    """The dataset file when given, otherwise a fresh dataset generated at ``seed``."""
    if dataset_path is not None:
        return read_dataset(dataset_path)
    return generate_dataset(dataclasses.replace(cfg.generator, seed=seed))


def ratio_mae(ratios: dn.NoiseRatios, train_set: Dataset) -> float:
    ra, rv = train_set.true_noise_ratios()
    return float(np.mean(np.abs(np.concatenate([ra - ratios.audio, rv - ratios.visual]))))


def ratio_comparison_csv(ratios: dn.NoiseRatios, train_set: Dataset) -> str:
    ra, rv = train_set.true_noise_ratios()
    buf = io.StringIO()
    buf.write("category,est_audio,true_audio,est_visual,true_visual\n")
    for c in range(len(ra)):
        buf.write(f"{c},{ratios.audio[c]:.6f},{ra[c]:.6f},{ratios.visual[c]:.6f},{rv[c]:.6f}\n")
    buf.write(f"mae,{ratio_mae(ratios, train_set):.6f},,,\n")
    return buf.getvalue()


def base_manifest(command: str, cfg: ExperimentConfig, seed: int) -> dict:
    return {
        "command": command,
        "status": "ok",
        "code_version": __version__,
        "rng_algorithm": RNG_ALGORITHM,
        "seed": seed,
        "config": cfg.to_dict(),
    }


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def removed_log(removed) -> list[list]:
    return [[int(v), int(c), m] for v, c, m in sorted(removed)]


def removed_from_log(entries) -> set:
    return {(int(v), int(c), str(m)) for v, c, m in entries}


# --- benchmark grid ----------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    """One grid member: a denoising mode with optional config overrides.

    ``estimator`` selects which shared per-seed estimator supplies the ratios:
    ``"default"`` (no cross-modal attention) or ``"cross_modal"``.
    """

    label: str
    mode: str
    estimator: str = "default"
    overrides: tuple = ()

    def config(self, cfg: ExperimentConfig) -> ExperimentConfig:
        return cfg.replace(**{k: dict(v) for k, v in self.overrides}) if self.overrides else cfg


def default_cells(modes=BENCHMARK_MODES) -> list[Cell]:
    return [Cell(m, m) for m in modes]


@dataclass
class RunRecord:
    label: str
    mode: str
    seed: int
    status: str = "ok"
    error: str = ""
    metrics: dict = field(default_factory=dict)
    epoch_losses: list = field(default_factory=list)
    wall_clock: float = 0.0


@dataclass
class BenchmarkResult:
    cells: list[Cell]
    seeds: list[int]
    runs: list[RunRecord]
    ratio_mae: dict
    wall_clock: float = 0.0

    @property
    def failed(self) -> list[RunRecord]:
        return [r for r in self.runs if r.status != "ok"]

    def get(self, label: str, seed: int) -> RunRecord:
        for r in self.runs:
            if r.label == label and r.seed == seed:
                return r
        raise KeyError((label, seed))

    def summary_rows(self) -> list[dict]:
        rows = []
        for cell in self.cells:
            runs = [r for r in self.runs if r.label == cell.label]
            ok = [r for r in runs if r.status == "ok"]
            row = {"label": cell.label, "mode": cell.mode, "runs": len(ok), "failed": len(runs) - len(ok)}
            for m in SUMMARY_METRICS:
                vals = np.array([r.metrics[m] for r in ok], dtype=np.float64)
                row[f"{m}_mean"] = float(vals.mean()) if vals.size else float("nan")
                row[f"{m}_std"] = float(vals.std()) if vals.size else float("nan")
            rows.append(row)
        return rows

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BENCHMARK_COLUMNS)
        for row in self.summary_rows():
            w.writerow([row[k] if not isinstance(row[k], float) else f"{row[k]:.6f}" for k in BENCHMARK_COLUMNS])
        return buf.getvalue()

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in sorted(self.runs, key=lambda r: (self._order(r.label), r.seed)):
            vals = [f"{r.metrics[m]:.6f}" if m in r.metrics else "" for m in SUMMARY_METRICS]
            w.writerow([r.label, r.mode, r.seed, r.status, r.error] + vals)
        return buf.getvalue()

    def _order(self, label):
        return [c.label for c in self.cells].index(label)


def _estimate_task(args):
    cfg, seed, dataset_path, kind = args
    ds = dataset_for_seed(cfg, seed, dataset_path)
    train_set, _ = split_dataset(ds, cfg.train_fraction, seed)
    est = tr.train_estimator(train_set, cfg, seed, cross_modal=(kind == "cross_modal"))
    return seed, kind, est.ratios, ratio_mae(est.ratios, train_set)


def _cell_task(args):
    cfg, cell, seed, dataset_path, ratios, mae = args
    rec = RunRecord(cell.label, cell.mode, seed)
    t0 = time.perf_counter()
    try:
        ccfg = cell.config(cfg)
        ds = dataset_for_seed(ccfg, seed, dataset_path)
        train_set, eval_set = split_dataset(ds, ccfg.train_fraction, seed)
        res = tr.train(train_set, ccfg, seed, cell.mode, ratios)
        report = tr.evaluate(res.params, eval_set, ccfg.threshold, res.removed_final, train_set)
        rec.metrics = dict(report.rows())
        rec.metrics["ratio_mae"] = mae
        rec.epoch_losses = res.epoch_losses
    except (JomoldError, ArithmeticError, ValueError) as exc:
        rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
        log.error("run %s seed %d failed: %s", cell.label, seed, rec.error)
    rec.wall_clock = time.perf_counter() - t0
    return rec


def _map(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def run_benchmark(cfg: ExperimentConfig, cells=None, seeds=None, dataset_path=None,
                  workers: int = 1) -> BenchmarkResult:
    """Run every cell at every seed.

    Estimators are trained once per seed (and per estimator kind in use) and
    shared by all cells of that seed.  A failing member run is recorded and
    the grid continues.
    """
    t0 = time.perf_counter()
    cells = list(cells) if cells is not None else default_cells()
    seeds = list(seeds) if seeds is not None else list(cfg.seeds)
    labels = [c.label for c in cells]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate cell labels in {labels}")
    for c in cells:
        parse_mode(c.mode)

    kinds = sorted({c.estimator for c in cells if parse_mode(c.mode)[0] not in ("none", "constant_ratio")} | {"default"})
    est_tasks = [(cfg, s, dataset_path, k) for s in seeds for k in kinds]
    estimates, est_errors = {}, {}
    for (_, s, _, k), out in zip(est_tasks, _map(_safe_estimate, est_tasks, workers)):
        if isinstance(out, str):
            est_errors[(s, k)] = out
        else:
            estimates[(s, k)] = out[2:]

    tasks, runs = [], []
    for s in seeds:
        mae = estimates.get((s, "default"), (None, float("nan")))[1]
        for cell in cells:
            needs = parse_mode(cell.mode)[0] not in ("none", "constant_ratio")
            key = (s, cell.estimator)
            if needs and key in est_errors:
                runs.append(RunRecord(cell.label, cell.mode, s, "failed", f"estimator: {est_errors[key]}"))
                continue
            ratios = estimates[key][0] if needs else None
            tasks.append((cfg, cell, s, dataset_path, ratios, mae))
    runs += _map(_cell_task, tasks, workers)
    runs.sort(key=lambda r: (labels.index(r.label), r.seed))
    maes = {s: estimates[(s, "default")][1] for s in seeds if (s, "default") in estimates}
    return BenchmarkResult(cells, seeds, runs, maes, time.perf_counter() - t0)


def _safe_estimate(args):
    try:
        return _estimate_task(args)
    except (JomoldError, ArithmeticError, ValueError) as exc:
        return f"{type(exc).__name__}: {exc}"


def write_benchmark(result: BenchmarkResult, out_dir, cfg: ExperimentConfig,
                    dataset_path=None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "summary": out / "benchmark.csv",
        "runs": out / "runs.csv",
        "manifest": out / "manifest.json",
    }
    paths["summary"].write_text(result.summary_csv())
    paths["runs"].write_text(result.runs_csv())
    paths.update(write_plots(result, out))
    manifest = base_manifest("benchmark", cfg, result.seeds[0] if result.seeds else 0)
    manifest.update({
        "status": "ok" if not result.failed else "failed",
        "seeds": result.seeds,
        "dataset": {"path": str(dataset_path), "sha256": file_sha256(dataset_path)} if dataset_path else None,
        "cells": [{"label": c.label, "mode": c.mode, "estimator": c.estimator,
                   "overrides": {k: dict(v) for k, v in c.overrides}} for c in result.cells],
        "ratio_mae": {str(k): v for k, v in result.ratio_mae.items()},
        "runs": [{"label": r.label, "seed": r.seed, "status": r.status, "error": r.error,
                  "epoch_losses": r.epoch_losses} for r in result.runs],
        "wall_clock_seconds": result.wall_clock,
    })
    write_json(paths["manifest"], manifest)
    return paths


def write_plots(result: BenchmarkResult, out: Path) -> dict[str, Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "jomold"
    rows = result.summary_rows()
    paths = {}

    def save(fig, name):
        path = out / name
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths[name.removesuffix(".svg")] = path

    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(rows) + 1), 3.5))
    x = np.arange(len(rows))
    ax.bar(x, [r["segment_type_at_av_mean"] for r in rows],
           yerr=[r["segment_type_at_av_std"] for r in rows], capsize=3, color="#4c72b0")
    ax.set_xticks(x, [r["label"] for r in rows], rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("segment Type@AV")
    fig.tight_layout()
    save(fig, "type_at_av.svg")

    denoising = [r for r in rows if parse_mode(r["mode"])[0] != "none"]
    if denoising:
        fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(denoising) + 1), 3.5))
        x = np.arange(len(denoising))
        for off, m, color in ((-0.2, "audio", "#dd8452"), (0.2, "visual", "#55a868")):
            ax.bar(x + off, [r[f"denoise_{m}_f1_mean"] for r in denoising], width=0.4,
                   yerr=[r[f"denoise_{m}_f1_std"] for r in denoising], capsize=2, label=m, color=color)
        ax.set_xticks(x, [r["label"] for r in denoising], rotation=45, ha="right", fontsize=8)
        ax.set_ylabel("removed-label F1")
        ax.legend(fontsize=8)
        fig.tight_layout()
        save(fig, "denoise_f1.svg")

    const = sorted((parse_mode(r["mode"])[1], r) for r in rows if parse_mode(r["mode"])[0] == "constant_ratio")
    if const:
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        ax.errorbar([c for c, _ in const], [r["segment_type_at_av_mean"] for _, r in const],
                    yerr=[r["segment_type_at_av_std"] for _, r in const], marker="o", capsize=3,
                    label="constant ratio")
        for r in rows:
            if r["label"] == "jomold":
                ax.axhline(r["segment_type_at_av_mean"], color="#c44e52", ls="--", label="estimated ratios")
        ax.set_xlabel("constant noise ratio")
        ax.set_ylabel("segment Type@AV")
        ax.legend(fontsize=8)
        fig.tight_layout()
        save(fig, "constant_ratio.svg")
    return paths


# --- single-run phases used by the CLI ---------------------------------------


def report_files(report: ParsingReport, out_dir, stem: str = "report") -> dict[str, Path]:
    out = Path(out_dir)
    paths = {"csv": out / f"{stem}.csv", "table": out / f"{stem}.txt"}
    paths["csv"].write_text(report.to_csv())
    paths["table"].write_text(report.to_table())
    return paths


def save_run(out_dir, cfg, seed, mode, res: tr.TrainResult, report: ParsingReport,
             dataset_path, ratios_path, wall_clock: float) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": out / "model.jmck", "manifest": out / "manifest.json"}
    mdl.save_checkpoint(paths["checkpoint"], res.config, res.params)
    paths.update(report_files(report, out))
    manifest = base_manifest("train", cfg, seed)
    manifest.update({
        "mode": mode,
        "dataset": {"path": str(dataset_path), "sha256": file_sha256(dataset_path)} if dataset_path else None,
        "ratios": str(ratios_path) if ratios_path else None,
        "epoch_losses": res.epoch_losses,
        "removed_per_epoch": res.removed_per_epoch,
        "removed_labels": removed_log(res.removed_final),
        "report": dict(report.rows()),
        "checkpoint_sha256": file_sha256(paths["checkpoint"]),
        "wall_clock_seconds": wall_clock,
    })
    write_json(paths["manifest"], manifest)
    return paths
