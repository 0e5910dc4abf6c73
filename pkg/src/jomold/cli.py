"""Command-line entry point: ``jomold {generate,estimate,train,evaluate,benchmark}``.

Exit codes: 0 success, 1 one or more benchmark member runs failed,
2 configuration error, 3 data or file-format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from . import denoiser as dn
from . import harness as hs
from . import model as mdl
from . import training as tr
from .config import ExperimentConfig, load_config, parse_mode
from .errors import ConfigError, DimensionError, FormatError, NumericError
from .synthgen import generate_dataset, read_dataset, split_dataset, write_dataset

log = logging.getLogger("jomold")

EXIT_OK, EXIT_RUN_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.command == "train" and args.mode:
        parse_mode(args.mode)
        cfg = cfg.replace(denoise={"mode": args.mode})
    return cfg


def _seed(args, cfg: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(args, name):
    if getattr(args, name) is None:
        raise ConfigError(f"--{name.replace('_', '-')} is required for '{args.command}'")
    return getattr(args, name)


def cmd_generate(args) -> int:
    cfg = _config(args)
    gen = cfg.generator
    if args.seed is not None:
        gen = dataclasses.replace(gen, seed=args.seed)
    ds = generate_dataset(gen)
    out = Path(args.out) if args.out else _out_dir(args) / "dataset.avpd"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, ds)
    ra, rv = ds.true_noise_ratios()
    print(f"wrote {out}: {len(ds)} videos, mean true noise ratio audio {ra.mean():.3f} visual {rv.mean():.3f}")
    return EXIT_OK


def _load_split(args, cfg, seed):
    ds = read_dataset(_need(args, "dataset"))
    return split_dataset(ds, cfg.train_fraction, seed)


def _abort(out: Path, manifest: dict, exc: Exception, t0: float) -> None:
    manifest.update({"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                     "wall_clock_seconds": time.perf_counter() - t0})
    hs.write_json(out / "manifest.json", manifest)


def cmd_estimate(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    out = _out_dir(args)
    t0 = time.perf_counter()
    train_set, _ = _load_split(args, cfg, seed)
    manifest = hs.base_manifest("estimate", cfg, seed)
    manifest["dataset"] = {"path": str(args.dataset), "sha256": hs.file_sha256(args.dataset)}
    try:
        est = tr.train_estimator(train_set, cfg, seed)
    except NumericError as exc:
        _abort(out, manifest, exc, t0)
        raise
    est.ratios.save(out / "ratios.csv")
    comparison = hs.ratio_comparison_csv(est.ratios, train_set)
    (out / "ratios_vs_true.csv").write_text(comparison)
    manifest.update({
        "estimator_cross_modal": est.cross_modal,
        "epoch_losses": est.train.epoch_losses,
        "ratios": {"audio": est.ratios.audio.tolist(), "visual": est.ratios.visual.tolist()},
        "ratio_mae": hs.ratio_mae(est.ratios, train_set),
        "wall_clock_seconds": time.perf_counter() - t0,
    })
    hs.write_json(out / "manifest.json", manifest)
    print(f"wrote {out / 'ratios.csv'} (mean abs error vs true ratios {manifest['ratio_mae']:.4f})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    mode = cfg.denoise.mode
    out = _out_dir(args)
    t0 = time.perf_counter()
    train_set, eval_set = _load_split(args, cfg, seed)
    ratios = dn.NoiseRatios.load(args.ratios) if args.ratios else None
    if ratios is not None and len(ratios.audio) != train_set.dims[2]:
        raise DimensionError(f"{args.ratios} has {len(ratios.audio)} categories, dataset has {train_set.dims[2]}")
    tr.resolve_ratios(mode, ratios, train_set.dims[2])
    manifest = hs.base_manifest("train", cfg, seed)
    try:
        res = tr.train(train_set, cfg, seed, mode, ratios)
    except NumericError as exc:
        _abort(out, manifest, exc, t0)
        raise
    report = tr.evaluate(res.params, eval_set, cfg.threshold, res.removed_final, train_set)
    paths = hs.save_run(out, cfg, seed, mode, res, report, args.dataset, args.ratios,
                        time.perf_counter() - t0)
    print(report.to_table(), end="")
    print(f"wrote {paths['checkpoint']} and {paths['manifest']}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    out = _out_dir(args)
    ds = read_dataset(_need(args, "dataset"))
    if args.split == "all":
        train_set = target = ds
    else:
        train_set, eval_set = split_dataset(ds, cfg.train_fraction, seed)
        target = train_set if args.split == "train" else eval_set
    ckpt = Path(_need(args, "checkpoint"))
    d, t, c = ds.dims
    mcfg = mdl.ModelConfig(d, t, c, threshold=cfg.threshold)
    params = mdl.load_params(ckpt, mcfg)
    manifest_path = Path(args.manifest) if args.manifest else ckpt.with_name("manifest.json")
    removed = None
    if manifest_path.exists():
        try:
            entries = json.loads(manifest_path.read_text()).get("removed_labels")
        except ValueError as exc:
            raise FormatError(f"{manifest_path}: not valid JSON ({exc})") from exc
        if entries is not None:
            removed = hs.removed_from_log(entries)
    report = tr.evaluate(params, target, cfg.threshold, removed, train_set)
    paths = hs.report_files(report, out)
    print(report.to_table(), end="")
    print(f"wrote {paths['csv']}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    modes = args.mode or list(hs.BENCHMARK_MODES)
    for m in modes:
        parse_mode(m)
    dataset_path = args.dataset
    before = hs.file_sha256(dataset_path) if dataset_path else None
    workers = hs.thread_cap(args.threads)
    result = hs.run_benchmark(cfg, hs.default_cells(modes), seeds, dataset_path, workers)
    if dataset_path and hs.file_sha256(dataset_path) != before:
        raise FormatError(f"{dataset_path} changed during the benchmark")
    paths = hs.write_benchmark(result, _out_dir(args), cfg, dataset_path)
    print(f"{len(result.runs)} runs ({len(result.failed)} failed) in {result.wall_clock:.1f}s; "
          f"wrote {paths['summary']}")
    for r in result.failed:
        print(f"FAILED {r.label} seed {r.seed}: {r.error}", file=sys.stderr)
    return EXIT_RUN_FAILED if result.failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jomold", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"jomold {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="TOML experiment config (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed(s)")
        sp.add_argument("--out-dir", default=".", help="output directory (default: .)")
        if dataset:
            sp.add_argument("--dataset", help="AVPD1 dataset file")

    sp = sub.add_parser("generate", help="write a synthetic dataset")
    common(sp, dataset=False)
    sp.add_argument("--out", help="dataset path (default: OUT_DIR/dataset.avpd)")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("estimate", help="train the noise estimator and write ratios.csv")
    common(sp)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("train", help="train the parser with label denoising")
    common(sp)
    sp.add_argument("--ratios", help="ratios CSV from 'estimate'")
    sp.add_argument("--mode", help="denoising mode, e.g. jomold, inmold, constant_ratio(0.2)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", help="JMCK1 checkpoint")
    sp.add_argument("--manifest", help="train manifest with the removed-label log "
                                       "(default: manifest.json next to the checkpoint)")
    sp.add_argument("--split", choices=("eval", "train", "all"), default="eval")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("benchmark", help="run the mode x seed grid")
    common(sp)
    sp.add_argument("--mode", action="append", help="grid member (repeatable; default: full grid)")
    sp.add_argument("--threads", type=int, help="worker processes (capped by JOMOLD_THREADS)")
    sp.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
