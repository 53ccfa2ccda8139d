from __future__ import annotations

import json
from pathlib import Path

import pytest

from cropanomaly.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from cropanomaly.pipeline import ConfigError, PipelineConfig

SMALL = {
    "synth": {"n_parcels": 60, "seed": 3, "anomaly_mix": {"WRONG_TYPE": 0.1, "HETEROGENEITY": 0.1}},
    "detector": {"algorithm": "isolation_forest", "params": {"n_trees": 50}},
    "outlier_ratios": [0.1, 0.2],
}


def _config(tmp_path, data=SMALL, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = _config(tmp)
    assert main(["run", "--config", cfg, "--out", str(tmp / "a")]) == EXIT_OK
    (run_dir,) = list((tmp / "a").iterdir())
    return tmp, cfg, run_dir


def test_run_artifact_chain(small_run):
    _, _, run_dir = small_run
    names = {p.name for p in run_dir.iterdir()}
    for expected in ("config.json", "labels.csv", "filter_report.csv", "series.csv", "matrix.csv", "scores.csv",
                     "score_manifest.json", "detections.csv", "curve.csv", "evaluation.json", "precision_curve.svg"):
        assert expected in names
    chash = run_dir.name
    assert json.loads((run_dir / "config.json").read_text())["config_hash"] == chash
    assert json.loads((run_dir / "evaluation.json").read_text())["config_hash"] == chash
    assert json.loads((run_dir / "score_manifest.json").read_text())["config_hash"] == chash
    for name in ("filter_report.csv", "series.csv", "matrix.csv", "scores.csv", "detections.csv", "curve.csv"):
        assert (run_dir / name).read_text().splitlines()[0] == f"# config_hash: {chash}"
    assert not any(p.name.endswith(".partial") for p in run_dir.parent.iterdir())


def test_run_detections_sized_by_ratio(small_run):
    _, _, run_dir = small_run
    rows = (run_dir / "detections.csv").read_text().splitlines()[2:]
    kept = len((run_dir / "scores.csv").read_text().splitlines()) - 2
    by_ratio = {}
    for row in rows:
        r, _, _ = row.split(",")
        by_ratio[r] = by_ratio.get(r, 0) + 1
    assert by_ratio == {"0.1": max(1, int(0.1 * kept)), "0.2": max(1, int(0.2 * kept))}


def test_run_is_byte_identical(small_run):
    tmp, cfg, run_dir = small_run
    assert main(["run", "--config", cfg, "--out", str(tmp / "b")]) == EXIT_OK
    assert main(["--threads", "1", "run", "--config", cfg, "--out", str(tmp / "c")]) == EXIT_OK
    ref = _tree(run_dir)
    assert _tree(tmp / "b" / run_dir.name) == ref
    assert _tree(tmp / "c" / run_dir.name) == ref


def test_seed_override_changes_hash(small_run, capsys):
    tmp, cfg, run_dir = small_run
    code, out, _ = _run(capsys, "run", "--config", cfg, "--seed", "4", "--out", str(tmp / "d"))
    assert code == EXIT_OK
    summary = json.loads(out)
    assert summary["config_hash"] != run_dir.name
    written = json.loads((Path(summary["out_dir"]) / "config.json").read_text())
    assert written["synth"]["seed"] == 4 and written["detector"]["seed"] == 4


def test_unknown_feature_exits_2(tmp_path, capsys):
    cfg = _config(tmp_path, {**SMALL, "features": {"s2": ["NDVI", "EVI"]}})
    code, _, err = _run(capsys, "run", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == EXIT_VALIDATION
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["exit_code"] == 2 and "EVI" in payload["message"]
    assert not (tmp_path / "o").exists() or not any((tmp_path / "o").iterdir())


def test_usage_error_exits_2(capsys):
    code, _, err = _run(capsys, "detect", "--matrix")
    assert code == EXIT_VALIDATION
    assert json.loads(err.strip().splitlines()[-1])["error"] == "UsageError"


def test_missing_file_exits_2(tmp_path, capsys):
    code, _, _ = _run(capsys, "run", "--config", str(tmp_path / "nope.json"))
    assert code == EXIT_VALIDATION


def test_runtime_failure_exits_3_and_cleans_up(tmp_path, capsys):
    data = {**SMALL, "detector": {"algorithm": "ocsvm", "params": {"nu": 0.1, "max_iter": 1}}}
    cfg = _config(tmp_path, data)
    code, _, err = _run(capsys, "run", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == EXIT_RUNTIME
    assert json.loads(err.strip().splitlines()[-1])["error"] == "ConvergenceError"
    assert list((tmp_path / "o").iterdir()) == []


def test_subcommand_chain(tmp_path, capsys):
    scene = tmp_path / "scene"
    code, _, _ = _run(capsys, "synth", "--config", json.dumps(SMALL["synth"]), "--out", str(scene))
    assert code == EXIT_OK
    assert (scene / "parcels.geojson").exists() and (scene / "labels.csv").exists()

    code, out, _ = _run(capsys, "features", "--rasters", str(scene / "rasters"), "--features", "NDVI,GAMMA0_VV",
                        "--out", str(tmp_path / "feat"))
    assert code == EXIT_OK and json.loads(out)["written"] > 0

    code, out, _ = _run(capsys, "zonal", "--rasters", str(scene / "rasters"), "--parcels",
                        str(scene / "parcels.geojson"), "--out", str(tmp_path / "z"))
    assert code == EXIT_OK
    code, out, _ = _run(capsys, "matrix", "--series", str(tmp_path / "z" / "series.csv"),
                        "--out", str(tmp_path / "m.csv"))
    assert code == EXIT_OK and json.loads(out)["columns"] == 210

    for algo in ("iforest", "loop"):
        code, _, _ = _run(capsys, "detect", "--matrix", str(tmp_path / "m.csv"), "--algorithm", algo,
                          "--normalize", "--params", json.dumps({"k": 10} if algo == "loop" else {"n_trees": 50}),
                          "--out", str(tmp_path / f"{algo}.csv"))
        assert code == EXIT_OK
    code, _, _ = _run(capsys, "detect", "--matrix", str(tmp_path / "m.csv"), "--algorithm", "loop",
                      "--out", str(tmp_path / "bad.csv"))
    assert code == EXIT_VALIDATION

    code, out, _ = _run(capsys, "eval", "--scores", str(tmp_path / "iforest.csv"), "--labels",
                        str(scene / "labels.csv"), "--no-figures", "--out", str(tmp_path / "ev"))
    assert code == EXIT_OK and 0.0 <= json.loads(out)["auc"] <= 1.0
    assert (tmp_path / "ev" / "curve.csv").exists()

    code, _, _ = _run(capsys, "compare", "--a", str(tmp_path / "iforest.csv"), "--b", str(tmp_path / "loop.csv"),
                      "--ratio", "0.1", "--labels", str(scene / "labels.csv"), "--out", str(tmp_path / "cmp.json"))
    assert code == EXIT_OK
    rep = json.loads((tmp_path / "cmp.json").read_text())
    assert 0.0 <= rep["jaccard"] <= 1.0
    code, _, _ = _run(capsys, "compare", "--a", str(tmp_path / "iforest.csv"), "--b", str(tmp_path / "loop.csv"))
    assert code == EXIT_VALIDATION


def test_run_from_written_scene_matches_synth(tmp_path):
    scene = tmp_path / "scene"
    assert main(["synth", "--config", json.dumps(SMALL["synth"]), "--out", str(scene)]) == EXIT_OK
    from_input = {**SMALL, "synth": None,
                  "input": {"rasters": str(scene / "rasters"), "parcels": str(scene / "parcels.geojson"),
                            "labels": str(scene / "labels.csv")}}
    assert main(["run", "--config", _config(tmp_path, from_input, "i.json"), "--out", str(tmp_path / "i")]) == 0
    assert main(["run", "--config", _config(tmp_path), "--out", str(tmp_path / "s")]) == 0
    (a,) = list((tmp_path / "i").iterdir())
    (b,) = list((tmp_path / "s").iterdir())
    for name in ("matrix.csv", "scores.csv", "detections.csv", "curve.csv"):
        body = lambda p: p.read_text().splitlines()[1:]  # noqa: E731
        assert body(a / name) == body(b / name)


def test_config_needs_exactly_one_source():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"synth": {"n_parcels": 10}, "input": {"rasters": "r", "parcels": "p"}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"input": {"rasters": "r"}})


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"outlier_ratios": [0.0]},
    {"outlier_ratios": []},
    {"ratio_grid": [0.2, 0.1]},
    {"ratio_grid": [0.6]},
    {"detector": {"algorithm": "kmeans"}},
    {"detector": {"extra": 1}},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"synth": {"n_parcels": 10}, **bad})


def test_config_hash_ignores_key_order_and_defaults():
    a = PipelineConfig.from_dict({"synth": {"n_parcels": 10, "seed": 1}, "outlier_ratios": [0.1]})
    b = PipelineConfig.from_dict({"outlier_ratios": [0.1], "synth": {"seed": 1, "n_parcels": 10}})
    c = PipelineConfig.from_dict({"synth": {"n_parcels": 10, "seed": 2}})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert PipelineConfig.from_dict(a.to_dict() | {"output_dir": "x"}).config_hash() == a.config_hash()
