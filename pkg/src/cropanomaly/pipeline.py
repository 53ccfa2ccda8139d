"""End-to-end processing: parcels and grids in, scores and evaluation out."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence


from .feature_matrix import FeatureConfig, FeatureMatrix, TimeWindow, assemble_feature_matrix, normalize_minmax
from .geo_raster import (
    BandGrid,
    BandRole,
    GridMeta,
    ParcelPolygon,
    PixelSet,
    PolygonError,
    apply_quality_masks,
    erode_pixels,
    load_band_grid,
    polygon_within_grid,
    rasterize_polygon,
)
from .pixel_features import DEFAULT_S1_FEATURES, DEFAULT_S2_FEATURES, FeatureGrid, IndexKind, compute_feature
from .zonal_stats import (
    DEFAULT_MIN_AREA_HA,
    DEFAULT_MIN_PIXELS,
    FilterReport,
    ParcelTimeSeries,
    StatKind,
    filter_parcels,
    summarize_dataset,
)

__all__ = [
    "GridSource",
    "PreprocessConfig",
    "compute_series",
    "preprocess_parcels",
    "scene_series",
    "series_from_source",
]

DEFAULT_BUFFER_M = 10.0


@dataclass(frozen=True)
class PreprocessConfig:
    buffer_m: float = DEFAULT_BUFFER_M
    min_area_ha: float = DEFAULT_MIN_AREA_HA
    min_pixels: int = DEFAULT_MIN_PIXELS

    def to_dict(self) -> dict:
        return {"buffer_m": self.buffer_m, "min_area_ha": self.min_area_ha, "min_pixels": self.min_pixels}

    @classmethod
    def from_dict(cls, data: Mapping | None) -> PreprocessConfig:
        data = dict(data or {})
        unknown = set(data) - {"buffer_m", "min_area_ha", "min_pixels"}
        if unknown:
            raise ValueError(f"unknown preprocess settings {sorted(unknown)}")
        out = cls(float(data.get("buffer_m", DEFAULT_BUFFER_M)), float(data.get("min_area_ha", DEFAULT_MIN_AREA_HA)),
                  int(data.get("min_pixels", DEFAULT_MIN_PIXELS)))
        if out.buffer_m < 0 or out.min_area_ha < 0 or out.min_pixels < 1:
            raise ValueError("buffer_m and min_area_ha must be >= 0 and min_pixels >= 1")
        return out


class GridSource:
    """Band grids grouped by acquisition date.

    ``loader(date)`` returns the list of :class:`BandGrid` for that date;
    dates with VH/VV grids are SAR acquisitions, the others multispectral.
    """

    def __init__(self, meta: GridMeta, s1_dates: Sequence[date], s2_dates: Sequence[date],
                 loader: Callable[[date], list[BandGrid]]):
        self.meta = meta
        self.s1_dates = sorted(s1_dates)
        self.s2_dates = sorted(s2_dates)
        self._loader = loader

    def bands(self, when: date) -> list[BandGrid]:
        return self._loader(when)

    @classmethod
    def from_scene(cls, scene) -> GridSource:
        return cls(scene.meta, scene.s1_dates, scene.s2_dates, scene.band_grids)

    @classmethod
    def from_directory(cls, directory) -> GridSource:
        """Every ``*.grid`` file below ``directory`` (headers carry date and role)."""
        directory = Path(directory)
        paths = sorted(directory.rglob("*.grid"))
        if not paths:
            raise FileNotFoundError(f"no .grid files under {directory}")
        by_date: dict[date, list[Path]] = {}
        meta = None
        roles: dict[date, set] = {}
        for p in paths:
            g = load_band_grid(p)
            if meta is None:
                meta = g.meta
            elif not meta.aligned_with(g.meta):
                from .geo_raster import GridAlignmentError

                raise GridAlignmentError(f"{p.name} is not aligned with the other grids")
            by_date.setdefault(g.date, []).append(p)
            roles.setdefault(g.date, set()).add(g.band_role)
        s1 = [d for d, r in roles.items() if r & {BandRole.VH, BandRole.VV}]
        s2 = [d for d, r in roles.items() if r - {BandRole.VH, BandRole.VV}]

        def loader(when: date) -> list[BandGrid]:
            return [load_band_grid(p) for p in by_date[when]]

        return cls(meta, s1, s2, loader)


def preprocess_parcels(parcels: Sequence[ParcelPolygon], source: GridSource,
                       config: PreprocessConfig = PreprocessConfig()) -> tuple[dict[str, PixelSet], FilterReport]:
    """Rasterize, buffer inwards, apply cloud/shadow masks and filter."""
    meta = source.meta
    pixel_sets: dict[str, PixelSet] = {}
    outside = []
    for poly in parcels:
        if not polygon_within_grid(poly, meta):
            outside.append(poly.id)
            continue
        try:
            px = rasterize_polygon(poly, meta)
        except PolygonError:
            outside.append(poly.id)
            continue
        pixel_sets[poly.id] = erode_pixels(px, config.buffer_m, meta)
    clear_counts: dict[str, dict[date, int]] = {pid: {} for pid in pixel_sets}
    for when in source.s2_dates:
        grids = {g.band_role: g for g in source.bands(when)}
        cloud, shadow = grids.get(BandRole.CLOUD_MASK), grids.get(BandRole.SHADOW_MASK)
        for pid, px in pixel_sets.items():
            if cloud is not None and shadow is not None:
                px = apply_quality_masks(px, cloud, shadow, when)
            else:
                px.clear[when] = px.survived.copy()
            pixel_sets[pid] = px
            clear_counts[pid][when] = int(px.clear[when].sum())
    report = filter_parcels([p.id for p in parcels], pixel_sets, clear_counts, source.s2_dates, outside,
                            config.min_area_ha)
    return {pid: pixel_sets[pid] for pid in report.kept_ids}, report


def _feature_grids(source: GridSource, s1_features: Iterable[IndexKind], s2_features: Iterable[IndexKind]
                   ) -> Iterator[FeatureGrid]:
    s1_features, s2_features = list(s1_features), list(s2_features)
    for dates, feats in ((source.s1_dates, s1_features), (source.s2_dates, s2_features)):
        if not feats:
            continue
        for when in dates:
            bands = source.bands(when)
            for kind in feats:
                yield compute_feature(kind, bands)


def compute_series(pixel_sets: Mapping[str, PixelSet], source: GridSource, s1_features: Iterable[IndexKind],
                   s2_features: Iterable[IndexKind], stats_by_sensor: Mapping[str, Iterable[StatKind]],
                   min_pixels: int = DEFAULT_MIN_PIXELS, crop_types: Mapping[str, str] | None = None
                   ) -> list[ParcelTimeSeries]:
    ordered = [pixel_sets[k] for k in sorted(pixel_sets)]
    return summarize_dataset(ordered, _feature_grids(source, s1_features, s2_features), stats_by_sensor,
                             min_pixels, crop_types)


def series_from_source(parcels, source: GridSource, feature_config: FeatureConfig,
                       preprocess: PreprocessConfig = PreprocessConfig()):
    pixel_sets, report = preprocess_parcels(parcels, source, preprocess)
    crops = {p.id: p.crop_type for p in parcels}
    series = compute_series(
        pixel_sets, source, feature_config.s1_features if feature_config.s1_stats else (),
        feature_config.s2_features if feature_config.s2_stats else (),
        {"S1": feature_config.s1_stats, "S2": feature_config.s2_stats}, preprocess.min_pixels, crops,
    )
    return series, report


def scene_series(scene, feature_config: FeatureConfig | None = None,
                 preprocess: PreprocessConfig = PreprocessConfig()):
    """Zonal time series of a synthetic scene held in memory."""
    return series_from_source(scene.parcels, GridSource.from_scene(scene), feature_config or FeatureConfig(),
                              preprocess)


# --------------------------------------------------------------------------
# configuration and full run


class ConfigError(ValueError):
    """The pipeline configuration is malformed or inconsistent."""


_TOP_KEYS = {"input", "synth", "features", "window", "preprocess", "detector", "outlier_ratios", "ratio_grid",
             "output_dir", "figures"}


@dataclass
class DetectorConfig:
    algorithm: str = "isolation_forest"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"algorithm": self.algorithm, "params": dict(sorted(self.params.items())), "seed": self.seed}


@dataclass
class PipelineConfig:
    input: dict | None = None
    synth: dict | None = None
    features: FeatureConfig = field(default_factory=FeatureConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    outlier_ratios: tuple = (0.1,)
    ratio_grid: tuple | None = None
    output_dir: str = "out"
    figures: bool = True

    @classmethod
    def from_dict(cls, data: Mapping) -> PipelineConfig:
        from .detectors import canonical_name
        from .synth_scene import SynthConfig

        if not isinstance(data, Mapping):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(data) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        has_input, has_synth = data.get("input") is not None, data.get("synth") is not None
        if has_input == has_synth:
            raise ConfigError("give exactly one of 'input' and 'synth'")
        try:
            inp = None
            if has_input:
                inp = dict(data["input"])
                missing = {"rasters", "parcels"} - set(inp)
                if missing:
                    raise ConfigError(f"input needs {sorted(missing)}")
                extra = set(inp) - {"rasters", "parcels", "labels"}
                if extra:
                    raise ConfigError(f"unknown input keys {sorted(extra)}")
            synth = None
            if has_synth:
                synth = SynthConfig.from_dict(data["synth"])
                synth.validate()
                synth = synth.to_dict()
            fc = parse_features(data)
            pre = PreprocessConfig.from_dict(data.get("preprocess"))
            det = dict(data.get("detector") or {})
            extra = set(det) - {"algorithm", "params", "seed"}
            if extra:
                raise ConfigError(f"unknown detector keys {sorted(extra)}")
            detector = DetectorConfig(canonical_name(det.get("algorithm", "isolation_forest")),
                                      dict(det.get("params") or {}), int(det.get("seed", 0)))
            ratios = tuple(float(r) for r in data.get("outlier_ratios", [0.1]))
            if not ratios or any(not 0 < r <= 1 for r in ratios):
                raise ConfigError("outlier_ratios must be a non-empty list of values in (0, 1]")
            grid = data.get("ratio_grid")
            grid = None if grid is None else tuple(float(r) for r in grid)
            if grid is not None and (not grid or any(not 0 < r <= 0.5 for r in grid)
                                     or any(b <= a for a, b in zip(grid, grid[1:]))):
                raise ConfigError("ratio_grid must be strictly increasing values in (0, 0.5]")
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(inp, synth, fc, pre, detector, ratios, grid, str(data.get("output_dir", "out")),
                   bool(data.get("figures", True)))

    def with_seed(self, seed: int) -> PipelineConfig:
        synth = None if self.synth is None else {**self.synth, "seed": int(seed)}
        det = DetectorConfig(self.detector.algorithm, dict(self.detector.params), int(seed))
        return PipelineConfig(self.input, synth, self.features, self.preprocess, det, self.outlier_ratios,
                              self.ratio_grid, self.output_dir, self.figures)

    def to_dict(self) -> dict:
        """Every setting with defaults filled in."""
        from .evaluation import DEFAULT_RATIO_GRID

        return {
            "input": self.input,
            "synth": self.synth,
            "features": {k: v for k, v in self.features.to_dict().items() if k != "window"},
            "window": self.features.window.to_dict(),
            "preprocess": self.preprocess.to_dict(),
            "detector": self.detector.to_dict(),
            "outlier_ratios": list(self.outlier_ratios),
            "ratio_grid": list(self.ratio_grid or DEFAULT_RATIO_GRID),
            "figures": self.figures,
        }

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def parse_features(data: Mapping) -> FeatureConfig:
    """Feature selection and time window from the ``features``/``window`` config blocks."""
    try:
        feats = dict(data.get("features") or {})
        extra = set(feats) - {"s1", "s1_stats", "s2", "s2_stats"}
        if extra:
            raise ConfigError(f"unknown feature keys {sorted(extra)}")
        fc = FeatureConfig(
            tuple(_enum_list(IndexKind, feats.get("s1", [k.value for k in DEFAULT_S1_FEATURES]))),
            tuple(_enum_list(StatKind, feats.get("s1_stats", ["MEDIAN"]))),
            tuple(_enum_list(IndexKind, feats.get("s2", [k.value for k in DEFAULT_S2_FEATURES]))),
            tuple(_enum_list(StatKind, feats.get("s2_stats", ["MEDIAN", "IQR"]))),
            TimeWindow.from_dict(data.get("window")),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if not ((fc.s1_features and fc.s1_stats) or (fc.s2_features and fc.s2_stats)):
        raise ConfigError("feature selection is empty")
    return fc


def _enum_list(enum_cls, names) -> list:
    if isinstance(names, str):
        names = [names]
    out = []
    for n in names:
        try:
            out.append(enum_cls(str(n).upper()))
        except ValueError:
            raise ConfigError(f"unknown {enum_cls.__name__} {n!r}; choose from "
                              f"{', '.join(e.value for e in enum_cls)}") from None
    return out


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return PipelineConfig.from_dict(data)


@dataclass
class RunResult:
    out_dir: Path
    config_hash: str
    matrix: FeatureMatrix
    scores: dict
    detections: dict
    evaluation: dict | None
    artifacts: list


def detector_matrix(matrix: FeatureMatrix, algorithm: str) -> FeatureMatrix:
    from .detectors import needs_normalized

    return normalize_minmax(matrix) if needs_normalized(algorithm) else matrix


def score_matrix(matrix: FeatureMatrix, detector: DetectorConfig, ratios: Sequence[float],
                 threads: int | None = None) -> dict[float, object]:
    """Score vectors keyed by outlier ratio.

    Only an OC-SVM without an explicit ``nu`` depends on the ratio: it is
    refitted with ``nu`` equal to each ratio.
    """
    from .detectors import run_detector

    x = detector_matrix(matrix, detector.algorithm)
    if detector.algorithm == "ocsvm" and "nu" not in detector.params:
        return {r: run_detector("ocsvm", x, {**detector.params, "nu": r}, detector.seed) for r in ratios}
    scores = run_detector(detector.algorithm, x, detector.params, detector.seed, threads)
    return {r: scores for r in ratios}


def run_pipeline(config: PipelineConfig, out_root=None, threads: int | None = None) -> RunResult:
    """Run every stage and write the artifacts under ``<out>/<config-hash>/``.

    Output goes to a sibling ``.partial`` directory that is renamed on
    success and deleted on failure.
    """
    import shutil

    out_root = Path(out_root if out_root is not None else config.output_dir)
    chash = config.config_hash()
    final = out_root / chash
    work = out_root / f"{chash}.partial"
    if work.exists():
        shutil.rmtree(work)
    work.mkdir(parents=True)
    try:
        result = _run_stages(config, work, chash, threads)
    except BaseException:
        shutil.rmtree(work, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final)
    work.rename(final)
    result.out_dir = final
    return result


def _run_stages(config: PipelineConfig, work: Path, chash: str, threads: int | None) -> RunResult:
    from .detectors import rank_outliers, write_score_manifest, write_scores_csv
    from .evaluation import DEFAULT_RATIO_GRID, evaluate_scores, precision_curve, read_labels, write_curve_csv, write_labels
    from .feature_matrix import write_matrix_csv
    from .geo_raster import read_parcels
    from .synth_scene import SynthConfig, generate_scene
    from .zonal_stats import write_series_csv

    tag = f"config_hash: {chash}"
    artifacts = []

    def note(name):
        artifacts.append(name)
        return work / name

    (work / "config.json").write_text(
        json.dumps({"config_hash": chash, **config.to_dict()}, indent=2, sort_keys=True) + "\n")
    artifacts.append("config.json")

    labels = None
    if config.synth is not None:
        scene = generate_scene(SynthConfig.from_dict(config.synth))
        parcels, source, labels = scene.parcels, GridSource.from_scene(scene), scene.labels
        write_labels(note("labels.csv"), labels)
    else:
        parcels = read_parcels(config.input["parcels"])
        source = GridSource.from_directory(config.input["rasters"])
        if config.input.get("labels"):
            labels = read_labels(config.input["labels"])

    series, report = series_from_source(parcels, source, config.features, config.preprocess)
    report.write_csv(note("filter_report.csv"), tag)
    write_series_csv(note("series.csv"), series, tag)
    matrix = assemble_feature_matrix(series, config.features)
    write_matrix_csv(note("matrix.csv"), matrix, tag)

    scores = score_matrix(matrix, config.detector, config.outlier_ratios, threads)
    primary = scores[config.outlier_ratios[0]]
    write_scores_csv(note("scores.csv"), primary, tag)
    write_score_manifest(note("score_manifest.json"), primary,
                         detector_matrix(matrix, config.detector.algorithm).fingerprint(),
                         {"config_hash": chash})
    if len({id(s) for s in scores.values()}) > 1:
        for r, s in scores.items():
            write_scores_csv(note(f"scores_nu{r:g}.csv"), s, tag)

    detections = {r: rank_outliers(scores[r], r) for r in config.outlier_ratios}
    with open(note("detections.csv"), "w") as fh:
        fh.write(f"# {tag}\nratio,rank,parcel_id\n")
        for r, ids in detections.items():
            for k, pid in enumerate(ids, 1):
                fh.write(f"{r:g},{k},{pid}\n")

    evaluation = None
    if labels is not None:
        grid = config.ratio_grid or DEFAULT_RATIO_GRID
        evaluation = {"config_hash": chash, "detector": config.detector.to_dict(), "filter": report.counts()}
        block = evaluate_scores(primary, labels, config.outlier_ratios, grid)
        if len({id(s) for s in scores.values()}) > 1:
            for r, s in scores.items():
                block["per_ratio"][f"{r:g}"] = evaluate_scores(s, labels, [r], grid)["per_ratio"][f"{r:g}"]
        evaluation.update(block)
        curve = precision_curve(primary, labels, grid)
        write_curve_csv(note("curve.csv"), curve, tag)
        (note("evaluation.json")).write_text(json.dumps(evaluation, indent=2, sort_keys=True) + "\n")
        if config.figures:
            from .report import render_figures

            for name in render_figures(work, curve, evaluation, series, detections, labels,
                                       title=f"{config.detector.algorithm} ({chash[:8]})"):
                artifacts.append(name)
    return RunResult(work, chash, matrix, scores, detections, evaluation, artifacts)
