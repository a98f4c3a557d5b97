"""Command-line entry point: ``srt2map <command> [options]``.

Each run directory holds::

    manifest.json            simulation record with content hashes
    truth/{m0,t2}.nii        ground-truth phantom volumes
    series/te<TE>_<orient>   LR stacks (.nii + .txt sidecar)
    sr/te<TE>.nii            SR volumes, with te<TE>_convergence.csv and index.json
    fit_sr/, fit_haste/      T2, M0, SD, R2 and converged maps plus fit.txt

With more than one repeat, runs live in ``seed_<n>`` subdirectories of the
output directory. Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .acquire import ForwardOperator, load_series, save_series
from .analyze import (
    DetectionFailure,
    RepeatabilityReport,
    relative_error,
    write_bland_altman_csv,
    write_relative_error_csv,
)
from .config import ConfigError, PipelineConfig, dump_config, from_values, load_config, parse_lines
from .relaxfit import fit_volume
from .srrecon import NumericFailure
from .volgrid import NiftiFormatError, Volume3D, read_volume, write_volume

logger = logging.getLogger("srt2map")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"


class DataError(RuntimeError):
    """Input files are missing, inconsistent or unreadable."""


def te_tag(te: float) -> str:
    return f"te{te:08.3f}"


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"missing {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None


# --- configuration -------------------------------------------------------------


def resolve_config(args, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    if args.repeats is not None:
        if args.repeats < 1:
            raise ConfigError("--repeats must be >= 1")
        cfg = cfg.with_repeats(args.repeats, seed)
    elif args.seed is not None:
        cfg = replace(cfg, seeds=(seed,))
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = replace(cfg, threads=args.threads)
    return cfg


def run_dirs(out: Path, cfg: PipelineConfig) -> list[tuple[int, Path]]:
    if cfg.repeats == 1:
        return [(cfg.seeds[0], out)]
    return [(s, out / f"seed_{s}") for s in cfg.seeds]


def find_runs(root: Path) -> list[Path]:
    runs = [root] if (root / MANIFEST).exists() else []
    runs += sorted(p.parent for p in root.glob(f"seed_*/{MANIFEST}"))
    if not runs:
        raise DataError(f"no {MANIFEST} found in {root} or its seed_* subdirectories")
    return runs


def run_config(run: Path, args) -> tuple[PipelineConfig, dict]:
    """Configuration recorded in a run's manifest, with ``--config`` applied on top."""
    manifest = _read_json(run / MANIFEST)
    cfg = from_values(parse_lines(manifest["config"], str(run / MANIFEST)))
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    return replace(cfg, seeds=(manifest["seed"],)), manifest


# --- stages --------------------------------------------------------------------


def simulate_run(cfg: PipelineConfig, seed: int, out: Path, truth=None, operators=None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    (out / "series").mkdir(exist_ok=True)
    grid = pl.hr_grid(cfg)
    truth = truth or pl.ground_truth(cfg)
    te_list = cfg.te_list()
    series = pl.simulate(cfg, te_list, seed, truth, operators)
    files = []
    for name, vol in zip(("m0", "t2"), truth):
        write_volume(vol, out / "truth" / f"{name}.nii")
        files.append(f"truth/{name}.nii")
    entries = []
    for te in te_list:
        for s in series[te]:
            stem = f"series/{te_tag(te)}_{s.geometry.orientation.label}"
            save_series(s, grid, out / stem)
            files += [stem + ".nii", stem + ".txt"]
            entries.append({"te": te, "orientation": s.geometry.orientation.label, "stem": stem})
    cfg_text = dump_config(replace(cfg, seeds=(seed,)))
    (out / "config.txt").write_text(cfg_text)
    files.append("config.txt")
    manifest = {
        "seed": seed,
        "te_list": te_list,
        "orientations": list(cfg.protocol.orientations),
        "grid": {"dims": list(grid.dims), "spacing": list(grid.spacing)},
        "config": cfg_text,
        "truth": {"m0": "truth/m0.nii", "t2": "truth/t2.nii"},
        "series": entries,
        "files": {f: sha256(out / f) for f in sorted(files)},
    }
    _write_json(out / MANIFEST, manifest)
    logger.info("simulated %d series into %s", len(entries), out)
    return manifest


def load_run_series(run: Path, manifest: dict) -> dict:
    """LR series per TE, checking every (TE, orientation) against the manifest."""
    by_te: dict = {}
    present = {(round(e["te"], 9), e["orientation"]): e for e in manifest["series"]}
    for te in manifest["te_list"]:
        by_te[te] = []
        for orient in manifest["orientations"]:
            entry = present.get((round(te, 9), orient))
            stem = entry["stem"] if entry else f"series/{te_tag(te)}_{orient}"
            nii = run / (stem + ".nii")
            if entry is None or not nii.exists() or not (run / (stem + ".txt")).exists():
                raise DataError(f"missing series for TE={te:g} ms, orientation={orient} ({run / stem}.nii)")
            recorded = manifest["files"].get(stem + ".nii")
            if recorded and sha256(nii) != recorded:
                raise DataError(f"{nii} does not match its manifest hash")
            by_te[te].append(load_series(run / stem))
    return by_te


def reconstruct_run(run: Path, args) -> None:
    cfg, manifest = run_config(run, args)
    series = load_run_series(run, manifest)
    sr = pl.reconstruct(cfg, series)
    out = run / "sr"
    out.mkdir(exist_ok=True)
    index = {}
    for te in manifest["te_list"]:
        vol, report = sr[te]
        write_volume(vol, out / f"{te_tag(te)}.nii")
        report.to_csv(out / f"{te_tag(te)}_convergence.csv")
        index[te_tag(te)] = {
            "te": te,
            "volume": f"{te_tag(te)}.nii",
            "convergence": f"{te_tag(te)}_convergence.csv",
            "iterations": report.iterations,
            "converged": report.converged,
        }
        logger.info("TE %g: %d iterations, objective %.6g -> %.6g",
                    te, report.iterations, report.objective[0], report.objective[-1])
    _write_json(out / "index.json", index)


def _sr_volumes(run: Path) -> tuple[list[float], list[Volume3D]]:
    index = _read_json(run / "sr" / "index.json")
    entries = sorted(index.values(), key=lambda e: e["te"])
    return [e["te"] for e in entries], [read_volume(run / "sr" / e["volume"]) for e in entries]


def _haste_volumes(run: Path, cfg: PipelineConfig, manifest: dict) -> tuple[list[float], list[Volume3D]]:
    label = cfg.analysis.haste_orientation
    te_list = list(manifest["te_list"])
    vols = []
    for te in te_list:
        nii = run / "series" / f"{te_tag(te)}_{label}.nii"
        if not nii.exists():
            raise DataError(f"missing series for TE={te:g} ms, orientation={label} ({nii})")
        vols.append(read_volume(nii))
    return te_list, vols


def fit_run(run: Path, args) -> None:
    cfg, manifest = run_config(run, args)
    sources = ("sr", "haste") if args.source == "both" else (args.source,)
    for source in sources:
        te, vols = _sr_volumes(run) if source == "sr" else _haste_volumes(run, cfg, manifest)
        if len(vols) != len(te):
            raise DataError(f"{len(vols)} volumes but {len(te)} echo times")
        res = fit_volume(vols, te, None, cfg.fit)
        out = run / f"fit_{source}"
        out.mkdir(exist_ok=True)
        res.save(out, te, cfg.fit)
        logger.info("%s fit: %d of %d voxels converged", source, int(res.converged_mask.sum()), res.converged_mask.size)


def _slice_maps(run: Path, source: str, cfg: PipelineConfig, manifest: dict) -> tuple[pl.SliceMaps, int]:
    fit_dir = run / f"fit_{source}"
    t2 = read_volume(fit_dir / "t2.nii")
    sd = read_volume(fit_dir / "t2_sd.nii")
    r2 = read_volume(fit_dir / "r2.nii")
    if source == "sr":
        _, vols = _sr_volumes(run)
        j = pl.evaluation_slice(t2.grid)
    else:
        _, vols = _haste_volumes(run, cfg, manifest)
        j = t2.grid.dims[1] // 2
    if not vols[0].grid.same_as(t2.grid):
        raise DataError(f"{fit_dir}: maps and source volumes are on different grids")
    maps = pl.SliceMaps(
        np.asarray(t2.data, float)[:, j, :], np.asarray(sd.data, float)[:, j, :],
        np.asarray(r2.data, float)[:, j, :], np.asarray(vols[0].data, float)[:, j, :], t2.grid.spacing[0],
    )
    return maps, j


def analyze_runs(runs: list[Path], out: Path, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    measured: dict = {}  # (method, n_te, roi) -> [values over runs]
    refs: dict = {}  # (n_te, roi) -> [reference values over runs]
    ba_groups: dict = {}
    roi_rows = []
    for run in runs:
        cfg, manifest = run_config(run, args)
        seed = manifest["seed"]
        n_te = len(manifest["te_list"])
        kind = cfg.analysis.reference
        if kind == "truth":
            reference = pl.truth_by_label(cfg)
        else:
            truth = (read_volume(run / "truth" / "m0.nii"), read_volume(run / "truth" / "t2.nii"))
            ref_maps = pl.reference_slice_maps(cfg, kind, seed, truth)
            reference = {k: s.mean for k, s in pl.roi_stats(cfg, ref_maps).items()}
        for method in ("sr", "haste"):
            maps, j = _slice_maps(run, method, cfg, manifest)
            rois = pl.detect_rois(cfg, maps)
            stats = pl.roi_stats(cfg, maps, rois)
            pairs, labels = [], []
            for roi in rois:
                s = stats[roi.label]
                if roi.label not in reference:
                    raise DataError(f"detected ROI {roi.label!r} has no reference value")
                measured.setdefault((method, n_te, roi.label), []).append(s.mean)
                refs.setdefault((n_te, roi.label), []).append(reference[roi.label])
                pairs.append((s.mean, reference[roi.label]))
                labels.append(f"{roi.label}:{seed}")
                roi_rows.append([seed, method, n_te, roi.label, roi.center[0], roi.center[1], roi.radius, j,
                                 f"{s.mean:.6f}", f"{s.sd:.6f}", s.n_voxels])
            group = ba_groups.setdefault((method, n_te), ([], []))
            group[0].extend(labels)
            group[1].extend(pairs)

    report = RepeatabilityReport()
    for (method, n_te, roi), values in measured.items():
        report.add(roi, method, n_te, values)
    report.to_csv(out / "repeatability.csv")
    write_bland_altman_csv(out / "bland_altman.csv", ba_groups)
    write_relative_error_csv(out / "relative_error.csv", [
        (method, n_te, roi, float(np.mean(v)), float(np.mean(refs[(n_te, roi)])))
        for (method, n_te, roi), v in sorted(measured.items())
    ])
    with open(out / "rois.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "method", "n_te", "roi", "center_0", "center_1", "radius", "slice", "mean_t2_ms", "sd_t2_ms", "n_voxels"])
        w.writerows(sorted(roi_rows, key=lambda r: (r[0], r[1], r[3])))


def sweep(cfg: PipelineConfig, out: Path) -> int:
    """Relative error per (method, n_te, roi) across the configured TE counts."""
    out.mkdir(parents=True, exist_ok=True)
    truth = pl.ground_truth(cfg)
    grid = pl.hr_grid(cfg)
    operators = [ForwardOperator(grid, g) for g in pl.series_geometries(cfg, grid)]
    cache: dict = {}
    if cfg.analysis.reference == "truth":
        reference = {s: pl.truth_by_label(cfg) for s in cfg.seeds}
    else:
        reference = {
            s: {k: v.mean for k, v in pl.roi_stats(cfg, pl.reference_slice_maps(cfg, cfg.analysis.reference, s, truth)).items()}
            for s in cfg.seeds
        }
    rows, failures = [], []
    for n in cfg.sweep_n_te:
        try:
            cfg.fit.check_echo_count(n)
            per_seed = [pl.run_once(cfg, cfg.te_list(n), s, truth, operators, cache) for s in cfg.seeds]
        except (DetectionFailure, NumericFailure, ValueError) as exc:
            failures.append(f"n_te={n}: {type(exc).__name__}: {exc}")
            logger.warning("sweep n_te=%d failed: %s", n, exc)
            continue
        for method in ("sr", "haste"):
            for roi in sorted(per_seed[0].stats[method]):
                vals = [r.stats[method][roi].mean for r in per_seed if roi in r.stats[method]]
                ref = float(np.mean([reference[s][roi] for s in cfg.seeds]))
                mean = float(np.mean(vals))
                rows.append([method, n, roi, f"{mean:.6f}", f"{float(np.std(vals)):.6f}", f"{ref:.6f}",
                             f"{relative_error(mean, ref):.6f}"])
        logger.info("sweep n_te=%d done", n)
    with open(out / "sweep_tes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "n_te", "roi", "mean_t2_ms", "sd_t2_ms", "reference_ms", "relative_error_percent"])
        w.writerows(sorted(rows, key=lambda r: (r[0], r[1], r[2])))
    diag = out / "sweep_failures.txt"
    if failures:
        diag.write_text("\n".join(failures) + "\n")
    elif diag.exists():
        diag.unlink()
    return EXIT_OK if rows or not cfg.sweep_n_te else EXIT_DATA


# --- commands ------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = pl.ground_truth(cfg)
    grid = pl.hr_grid(cfg)
    ops = [ForwardOperator(grid, g) for g in pl.series_geometries(cfg, grid)]
    for seed, run in run_dirs(out, cfg):
        simulate_run(cfg, seed, run, truth, ops)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    for run in find_runs(Path(args.input)):
        reconstruct_run(run, args)
    return EXIT_OK


def cmd_fit(args) -> int:
    for run in find_runs(Path(args.input)):
        fit_run(run, args)
    return EXIT_OK


def cmd_analyze(args) -> int:
    root = Path(args.input)
    analyze_runs(find_runs(root), Path(args.out) if args.out else root, args)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    if args.n_te:
        cfg = replace(cfg, sweep_n_te=tuple(args.n_te))
    return sweep(cfg, Path(args.out))


def cmd_pipeline(args) -> int:
    cmd_simulate(args)
    args.input = args.out
    cmd_reconstruct(args)
    args.source = "both"
    cmd_fit(args)
    return cmd_analyze(args)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="base noise seed")
    common.add_argument("--repeats", type=int, help="number of independent noise realizations")
    common.add_argument("--threads", type=int, help="worker threads for per-TE reconstruction")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="srt2map", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write LR series and ground truth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", parents=[common], help="SR volume per TE from simulated series")
    p.add_argument("input")
    p.add_argument("--out", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("fit", parents=[common], help="voxel-wise T2 maps")
    p.add_argument("input")
    p.add_argument("--source", choices=("sr", "haste", "both"), default="both")
    p.add_argument("--out", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("analyze", parents=[common], help="ROI statistics and agreement reports")
    p.add_argument("input")
    p.add_argument("--out", help="report directory (default: input)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep-tes", parents=[common], help="relative error versus number of echo times")
    p.add_argument("--out", required=True)
    p.add_argument("--n-te", type=int, nargs="+", help="TE counts (default: run.sweep_n_te)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pipeline", parents=[common], help="simulate, reconstruct, fit and analyze")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DetectionFailure, NiftiFormatError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
