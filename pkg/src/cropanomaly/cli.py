"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 runtime error.  Errors are
reported on stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _validation_errors() -> tuple:
    from .detectors import NotNormalizedError
    from .feature_matrix import FeatureSelectionError
    from .geo_raster import GridAlignmentError, GridFormatError, PolygonError
    from .pipeline import ConfigError
    from .pixel_features import MissingBandError

    return (ConfigError, FeatureSelectionError, NotNormalizedError, GridFormatError, GridAlignmentError,
            PolygonError, MissingBandError, FileNotFoundError, json.JSONDecodeError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _ratios(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _json_arg(text: str | None) -> dict:
    if not text:
        return {}
    path = Path(text)
    return json.loads(path.read_text() if path.exists() else text)


def _write_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .synth_scene import BENCHMARK_A_MIX, SynthConfig, generate_scene

    data = _json_arg(args.config)
    data = data.get("synth", data)
    if args.benchmark_a:
        data.setdefault("anomaly_mix", {k.value: v for k, v in BENCHMARK_A_MIX.items()})
    if args.n_parcels is not None:
        data["n_parcels"] = args.n_parcels
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(data)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        from .pipeline import ConfigError

        raise ConfigError(str(exc)) from exc
    out = generate_scene(cfg).write(args.out)
    print(json.dumps({"scene": str(out), "n_parcels": cfg.n_parcels, "seed": cfg.seed}))
    return EXIT_OK


def cmd_features(args) -> int:
    from .pipeline import GridSource, _enum_list
    from .pixel_features import IndexKind, compute_feature, save_feature_grid

    source = GridSource.from_directory(args.rasters)
    kinds = _enum_list(IndexKind, args.features.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for kind in kinds:
        for when in source.s1_dates if kind.sensor == "S1" else source.s2_dates:
            grid = compute_feature(kind, source.bands(when))
            save_feature_grid(out / f"{kind.value}_{when.isoformat()}", grid)
            n += 1
    print(json.dumps({"written": n, "out": str(out)}))
    return EXIT_OK


def cmd_zonal(args) -> int:
    from .feature_matrix import FeatureConfig
    from .geo_raster import read_parcels
    from .pipeline import GridSource, PreprocessConfig, parse_features, series_from_source
    from .zonal_stats import write_series_csv

    fc = parse_features(_json_arg(args.config)) if args.config else FeatureConfig()
    pre = PreprocessConfig(args.buffer_m, args.min_area_ha, args.min_pixels)
    series, report = series_from_source(read_parcels(args.parcels), GridSource.from_directory(args.rasters),
                                        fc, pre)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "filter_report.csv")
    write_series_csv(out / "series.csv", series)
    print(json.dumps({"kept": len(report.kept_ids), "filter": report.counts(), "out": str(out)}))
    return EXIT_OK


def cmd_matrix(args) -> int:
    from .feature_matrix import FeatureConfig, assemble_feature_matrix, normalize_minmax, write_matrix_csv
    from .pipeline import parse_features
    from .zonal_stats import read_series_csv

    fc = parse_features(_json_arg(args.config)) if args.config else FeatureConfig()
    matrix = assemble_feature_matrix(read_series_csv(args.series), fc)
    if args.normalize:
        matrix = normalize_minmax(matrix)
    write_matrix_csv(args.out, matrix)
    print(json.dumps({"rows": matrix.shape[0], "columns": matrix.shape[1], "dropped": len(matrix.dropped),
                      "state": matrix.state}))
    return EXIT_OK


def cmd_detect(args) -> int:
    from .detectors import needs_normalized, run_detector, write_score_manifest, write_scores_csv
    from .feature_matrix import normalize_minmax, read_matrix_csv

    matrix = read_matrix_csv(args.matrix)
    if args.normalize and needs_normalized(args.algorithm) and matrix.state != "minmax":
        matrix = normalize_minmax(matrix)
    scores = run_detector(args.algorithm, matrix, _json_arg(args.params), args.seed or 0, args.threads)
    write_scores_csv(args.out, scores)
    write_score_manifest(Path(args.out).with_suffix(".manifest.json"), scores, matrix.fingerprint())
    print(json.dumps({"algorithm": scores.algorithm, "rows": len(scores), "out": args.out}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .detectors import rank_outliers, read_scores_csv
    from .evaluation import DEFAULT_RATIO_GRID, evaluate_scores, precision_curve, read_labels, write_curve_csv
    from .report import render_figures
    from .zonal_stats import read_series_csv

    scores = read_scores_csv(args.scores)
    labels = read_labels(args.labels)
    ratios = _ratios(args.ratios)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = _ratios(args.grid) if args.grid else DEFAULT_RATIO_GRID
    report = evaluate_scores(scores, labels, ratios, grid)
    curve = precision_curve(scores, labels, grid)
    write_curve_csv(out / "curve.csv", curve)
    _write_json(report, str(out / "evaluation.json"))
    if not args.no_figures:
        series = read_series_csv(args.series) if args.series else []
        render_figures(out, curve, report, series, {r: rank_outliers(scores, r) for r in ratios}, labels)
    print(json.dumps({"auc": report["auc"], "out": str(out)}))
    return EXIT_OK


def _detected_ids(path: str, ratio: float | None) -> tuple[list[str], list[str] | None]:
    """Ids from a score CSV (top ``ratio``) or from a detections CSV."""
    import csv

    from .detectors import rank_outliers, read_scores_csv

    with open(path) as fh:
        header = next(line for line in fh if not line.startswith("#"))
    if "score" in header.split(","):
        scores = read_scores_csv(path)
        if ratio is None:
            from .pipeline import ConfigError

            raise ConfigError("--ratio is required when comparing score files")
        return rank_outliers(scores, ratio), scores.parcel_ids
    with open(path) as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    if ratio is not None and rows and "ratio" in rows[0]:
        rows = [r for r in rows if abs(float(r["ratio"]) - ratio) < 1e-12]
    return [r["parcel_id"] for r in rows], None


def cmd_compare(args) -> int:
    from .evaluation import compare_detections, read_labels

    a, ua = _detected_ids(args.a, args.ratio)
    b, ub = _detected_ids(args.b, args.ratio)
    labels = read_labels(args.labels) if args.labels else None
    _write_json(compare_detections(a, b, labels, ua, ub), args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import load_config, run_pipeline

    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    result = run_pipeline(config, args.out, args.threads)
    summary = {"out_dir": str(result.out_dir), "config_hash": result.config_hash, "artifacts": result.artifacts}
    if result.evaluation:
        summary["auc"] = result.evaluation["auc"]
        summary["precision"] = {r: b["precision"] for r, b in result.evaluation["per_ratio"].items()}
    print(json.dumps(summary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cropanomaly", description="Parcel-level crop anomaly detection from satellite time series.")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads (outputs do not change)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic labelled scene")
    s.add_argument("--config", help="JSON file or string with synth settings")
    s.add_argument("--benchmark-a", action="store_true", help="use the 15%% anomaly mix")
    s.add_argument("--n-parcels", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", help="compute pixel feature grids")
    s.add_argument("--rasters", required=True)
    s.add_argument("--features", default="NDVI,NDWI_SWIR,NDWI_GREEN,MCARI_OSAVI,GRVI,GAMMA0_VH,GAMMA0_VV")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("zonal", help="buffer, mask, filter and summarize parcels")
    s.add_argument("--rasters", required=True)
    s.add_argument("--parcels", required=True)
    s.add_argument("--config", help="pipeline config supplying the feature selection")
    s.add_argument("--buffer-m", type=float, default=10.0)
    s.add_argument("--min-area-ha", type=float, default=0.5)
    s.add_argument("--min-pixels", type=int, default=3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_zonal)

    s = sub.add_parser("matrix", help="assemble the feature matrix from a series CSV")
    s.add_argument("--series", required=True)
    s.add_argument("--config")
    s.add_argument("--normalize", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_matrix)

    s = sub.add_parser("detect", help="score a feature matrix")
    s.add_argument("--matrix", required=True)
    s.add_argument("--algorithm", default="isolation_forest")
    s.add_argument("--params", help="JSON object (or file) of detector parameters")
    s.add_argument("--seed", type=int)
    s.add_argument("--normalize", action="store_true", help="min-max scale first when the detector needs it")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", help="evaluate scores against labels; writes CSV, JSON and SVG figures")
    s.add_argument("--scores", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--ratios", default="0.1")
    s.add_argument("--grid", help="comma-separated ratio grid (default 0.01..0.50)")
    s.add_argument("--series", help="series CSV for the envelope figures")
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run", help="full chain from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output root (default: output_dir from the config)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("compare", help="overlap between two detection runs")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--ratio", type=float)
    s.add_argument("--labels")
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        return _fail(EXIT_VALIDATION, "UsageError", str(exc))
    try:
        if args.threads is not None and args.threads < 1:
            return _fail(EXIT_VALIDATION, "UsageError", "--threads must be >= 1")
        return args.func(args)
    except _validation_errors() as exc:
        return _fail(EXIT_VALIDATION, type(exc).__name__, str(exc))
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_RUNTIME, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
