import json

import pytest

from drnkit.cli import EXIT_CONFIG, EXIT_DEPENDENCY, config_hash, load_config, main

TINY = {
    "data": {"generator": "synthetic_main", "seed": 1, "params": {"n_train": 600, "n_val": 200, "n_test": 200}},
    "models": ["glm", "drn", "ddr"],
    "training": {"drn": {"max_epochs": 2, "neurons_per_layer": 16}, "ddr": {"max_epochs": 2}},
    "metrics": {"density_instances": 2},
    "explain": {"instances": [[0.1, 0.1], [0.0, 0.2]], "M": 20},
}


def _write_cfg(tmp_path, cfg=TINY, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _pipeline(cfg_path, out):
    for cmd in ("simulate", "fit", "evaluate", "explain"):
        assert main([cmd, "--config", cfg_path, "--out", str(out)]) == 0


def test_full_pipeline_is_byte_reproducible(tmp_path):
    cfg = _write_cfg(tmp_path)
    _pipeline(cfg, tmp_path / "a")
    _pipeline(cfg, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    metrics = json.loads((tmp_path / "a" / "eval" / "metrics.json").read_text())
    assert set(metrics["models"]) == {"glm", "drn", "ddr"}
    assert {"nll", "crps", "rmse", "ql90"} <= set(metrics["models"]["drn"]["test"])
    assert "drn<glm" in metrics["comparisons"]
    stamp = "# config_hash="
    for rel in files_a:
        if rel.suffix == ".csv":
            assert (tmp_path / "a" / rel).read_text().startswith(stamp), rel
        elif rel.suffix == ".json":
            assert "config_hash" in (tmp_path / "a" / rel).read_text(), rel


def test_glm_only_evaluate(tmp_path):
    cfg = _write_cfg(tmp_path, {**TINY, "models": ["glm"]})
    out = tmp_path / "o"
    for cmd in ("simulate", "fit", "evaluate"):
        assert main([cmd, "--config", cfg, "--out", str(out)]) == 0
    metrics = json.loads((out / "eval" / "metrics.json").read_text())
    assert list(metrics["models"]) == ["glm"] and metrics["comparisons"] == {}


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"models": ["glm",\n  oops]}')
    assert main(["fit", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "line 2" in capsys.readouterr().err
    cfg = _write_cfg(tmp_path, {**TINY, "models": ["glm", "xgb"]}, "c2.json")
    assert main(["fit", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "models" in capsys.readouterr().err
    good = _write_cfg(tmp_path, TINY, "c3.json")
    assert main(["evaluate", "--config", good, "--out", str(tmp_path / "empty")]) == EXIT_DEPENDENCY
    assert "simulate" in capsys.readouterr().err


def test_dataset_hash_mismatch_refused(tmp_path):
    cfg = _write_cfg(tmp_path, {**TINY, "models": ["glm"]})
    out = tmp_path / "o"
    for cmd in ("simulate", "fit"):
        assert main([cmd, "--config", cfg, "--out", str(out)]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(out), "--seed", "7"]) == 0
    assert main(["evaluate", "--config", cfg, "--out", str(out), "--seed", "7"]) == EXIT_DEPENDENCY


def test_config_hash_ignores_out(tmp_path):
    a = load_config(_write_cfg(tmp_path), {"out": "x"})
    b = load_config(_write_cfg(tmp_path), {"out": "y"})
    assert config_hash(a) == config_hash(b)
    with pytest.raises(ValueError):
        load_config(_write_cfg(tmp_path, {"bogus": 1}, "b.json"), {"out": "x"})


def test_csv_recipe_pipeline(tmp_path):
    from test_datagen import _fake_frempl

    df, _ = _fake_frempl(n=400, seed=2)
    df.to_csv(tmp_path / "freMPL1.csv", index=False)
    cfg = {"data": {"csv": str(tmp_path / "freMPL1.csv"), "recipe": "freMPL1", "seed": 0},
           "preset": "table6", "models": ["glm", "drn"],
           "training": {"drn": {"max_epochs": 2, "neurons_per_layer": 16}},
           "explain": {"instances": [], "importance_instances": 3, "M": 20}}
    path = _write_cfg(tmp_path, cfg)
    _pipeline(path, tmp_path / "out")
    shap = json.loads((tmp_path / "out" / "explain" / "shap.json").read_text())
    assert len(shap) == 3 and "VehAge" in shap[0]["phi"] and "Gender" in shap[0]["phi"]
