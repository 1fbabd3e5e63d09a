"""Command-line pipeline: simulate, fit, evaluate, explain, random-search.

Every command reads one JSON config (see README) and writes under ``--out``.
Outputs are byte-identical for identical config and seeds.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from drnkit.train import TABLE3, TABLE6

log = logging.getLogger("drnkit")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4
MODEL_NAMES = ("glm", "cann", "mdn", "ddr", "drn")
DENSITY_GRID = 512
PRESETS = {"table3": TABLE3, "table6": TABLE6}


class ConfigError(ValueError):
    pass


class DependencyError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# config


DEFAULT_CONFIG = {
    "data": {"generator": "synthetic_main", "seed": 0, "params": {}},
    "preset": "table3",
    "models": ["glm", "drn"],
    "training": {},
    "partition": {},
    "metrics": {"alpha": 0.9, "density_instances": 3},
    "explain": {"target": "adjustment-quantile", "alpha": 0.9, "instances": [[0.1, 0.1]], "M": 100,
                "seed": 0, "coalesce_groups": True, "importance_instances": 0},
    "random_search": {"model": "drn", "budget": 8, "seed": 0, "max_epochs": 200},
}

_TOP_KEYS = set(DEFAULT_CONFIG) | {"out"}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level field(s): {sorted(unknown)}")
    cfg = _merge(DEFAULT_CONFIG, raw)
    if isinstance(raw.get("data"), dict) and "csv" in raw["data"] and "generator" not in raw["data"]:
        # a CSV source replaces the default generator rather than sitting beside it
        cfg["data"] = {k: v for k, v in cfg["data"].items() if k not in ("generator", "params")}
    if overrides.get("seed") is not None:
        cfg["data"]["seed"] = overrides["seed"]
        cfg["seed_override"] = overrides["seed"]
    if overrides.get("models"):
        cfg["models"] = overrides["models"]
    if overrides.get("out"):
        cfg["out"] = overrides["out"]
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    from drnkit.datagen import GENERATORS

    data = cfg["data"]
    if "generator" in data and "csv" in data:
        raise ConfigError("data: give either generator or csv, not both")
    if "csv" in data:
        if "recipe" not in data:
            raise ConfigError("data.recipe: required with data.csv")
    elif data.get("generator") not in GENERATORS:
        raise ConfigError(f"data.generator: must be one of {sorted(GENERATORS)}")
    if not isinstance(data.get("seed", 0), int):
        raise ConfigError("data.seed: must be an integer")
    if cfg["preset"] not in PRESETS:
        raise ConfigError(f"preset: must be one of {sorted(PRESETS)}")
    models = cfg["models"]
    if not isinstance(models, list) or not models:
        raise ConfigError("models: must be a nonempty list")
    for m in models:
        if m not in MODEL_NAMES:
            raise ConfigError(f"models: unknown model {m!r}; choose from {list(MODEL_NAMES)}")
    for name, over in cfg["training"].items():
        if name not in MODEL_NAMES[1:]:
            raise ConfigError(f"training.{name}: not a trainable model")
        try:
            training_config(cfg, name)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"training.{name}: {exc}") from exc
    alpha = cfg["metrics"].get("alpha", 0.9)
    if not 0 < alpha < 1:
        raise ConfigError("metrics.alpha: must lie in (0, 1)")
    if not cfg.get("out"):
        raise ConfigError("out: output directory required (config field or --out)")


def training_config(cfg: dict, name: str):
    over = dict(cfg["training"].get(name, {}))
    if name == "drn":
        for key in ("proportion", "min_obs"):
            if key in cfg["partition"]:
                over.setdefault(key, cfg["partition"][key])
    if "seed_override" in cfg:
        over["seed"] = cfg["seed_override"]
    return PRESETS[cfg["preset"]][name].with_(**over)


def config_hash(cfg: dict) -> str:
    canon = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()[:16]


def _stamp(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg["data"].get("seed", 0)}


# --------------------------------------------------------------------------
# file helpers


def _write_json(path: Path, obj):
    from drnkit.metrics import _jsonable

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, cfg: dict, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={stamp['config_hash']} seed={stamp['seed']}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _out(cfg) -> Path:
    return Path(cfg["out"])


# --------------------------------------------------------------------------
# data


def _data_paths(cfg):
    d = _out(cfg) / "data"
    return {s: d / f"{s}.csv" for s in ("train", "val", "test")}


def cmd_simulate(cfg: dict) -> dict:
    """Generate (or ingest) the three splits and write them as CSV."""
    from drnkit import datagen

    data = cfg["data"]
    seed = data.get("seed", 0)
    if "csv" in data:
        recipe_ref = data["recipe"]
        recipe_file = Path(recipe_ref) if Path(recipe_ref).exists() else datagen.recipe_path(recipe_ref)
        if not recipe_file.exists():
            raise ConfigError(f"data.recipe: no recipe named {recipe_ref!r}")
        recipe = datagen.load_recipe(recipe_file)
        if not Path(data["csv"]).exists():
            raise DependencyError(f"data.csv: {data['csv']} not found; supply the raw CSV first")
        splits = datagen.preprocess_tabular(datagen.load_csv(data["csv"], recipe), recipe, seed)
        extra = {"recipe": recipe_ref, "groups": splits[0].meta["encoder"]["groups"]}
    else:
        gen = datagen.GENERATORS[data["generator"]]
        splits = gen(seed=seed, **data.get("params", {}))
        extra = {"generator": data["generator"], "meta": splits[0].meta}
    paths = _data_paths(cfg)
    stamp = _stamp(cfg)
    content = hashlib.sha256()
    for ds in splits:
        paths[ds.split].parent.mkdir(parents=True, exist_ok=True)
        body = ds.to_frame().to_csv(index=False, float_format="%.17g", lineterminator="\n")
        content.update(body.encode())
        paths[ds.split].write_text(f"# config_hash={stamp['config_hash']} seed={stamp['seed']}\n" + body)
    meta = {**stamp, **extra, "dataset_hash": content.hexdigest()[:16],
            "sizes": {ds.split: len(ds) for ds in splits}, "features": splits[0].feature_names}
    _write_json(_out(cfg) / "data" / "meta.json", meta)
    return meta


def load_splits(cfg: dict):
    from drnkit.datagen import Dataset

    paths = _data_paths(cfg)
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise DependencyError(f"missing dataset files {missing}; run `simulate` first")
    meta = json.loads((_out(cfg) / "data" / "meta.json").read_text())
    splits = {s: Dataset.from_csv(p, split=s) for s, p in paths.items()}
    return splits, meta


# --------------------------------------------------------------------------
# fit


def _bundle_path(cfg, name) -> Path:
    return _out(cfg) / "models" / f"{name}.json"


def _save_bundle(cfg, name, payload: dict, dataset_hash: str, logbook=None):
    payload = {**payload, **_stamp(cfg), "dataset_hash": dataset_hash}
    _write_json(_bundle_path(cfg, name), payload)
    if logbook is not None:
        _write_csv(_out(cfg) / "models" / f"{name}_log.csv", cfg, ["epoch", "train_loss", "val_loss"],
                   [[i, tr, va] for i, (tr, va) in enumerate(zip(logbook.train_loss, logbook.val_loss), 1)])


def load_bundle(cfg, name, dataset_hash: str | None = None):
    from drnkit.baselines import MODEL_KINDS
    from drnkit.drn import DrnModel
    from drnkit.glm import GammaGlmModel

    path = _bundle_path(cfg, name)
    if not path.exists():
        raise DependencyError(f"no fitted {name} bundle at {path}; run `fit` with {name} in models")
    d = json.loads(path.read_text())
    if dataset_hash is not None and d.get("dataset_hash") != dataset_hash:
        raise DependencyError(f"{name} bundle was trained on dataset {d.get('dataset_hash')}, "
                              f"current data is {dataset_hash}; rerun `fit`")
    if name == "glm":
        return GammaGlmModel.from_dict(d["model"])
    if name == "drn":
        return DrnModel.from_dict(d["model"])
    return MODEL_KINDS[name].from_dict(d["model"])


def cmd_fit(cfg: dict) -> dict:
    from drnkit.baselines import fit_cann, fit_ddr, fit_mdn
    from drnkit.glm import fit_gamma_glm
    from drnkit.partition import drn_partition
    from drnkit.train import fit_drn

    splits, meta = load_splits(cfg)
    dh = meta["dataset_hash"]
    tr, va = splits["train"], splits["val"]
    models = cfg["models"]
    fitted = {}
    glm = None
    if "glm" in models:
        glm = fit_gamma_glm(tr.X, tr.y, tr.feature_names)
        _save_bundle(cfg, "glm", {"kind": "glm", "model": glm.to_dict()}, dh)
        fitted["glm"] = glm
    needs_glm = [m for m in models if m in ("cann", "drn")]
    if needs_glm and glm is None:
        glm = load_bundle(cfg, "glm", dh)
    for name in [m for m in MODEL_NAMES[1:] if m in models]:
        tc = training_config(cfg, name)
        log.info("training %s", name)
        if name == "cann":
            model, logbook = fit_cann(glm, tr.X, tr.y, va.X, va.y, tc)
        elif name == "mdn":
            model, logbook = fit_mdn(tr.X, tr.y, va.X, va.y, tc)
        elif name == "ddr":
            model, logbook = fit_ddr(tr.X, tr.y, va.X, va.y, tc)
        else:
            part_cfg = cfg["partition"]
            partition = drn_partition(tr.y, tc.proportion, tc.min_obs, part_cfg.get("lower_margin", 0.01),
                                      part_cfg.get("upper_margin", 0.01))
            model, logbook = fit_drn(glm, tr.X, tr.y, va.X, va.y, tc, partition)
        payload = {"kind": name, "model": model.to_dict(), "best_epoch": logbook.best_epoch,
                   "epochs": logbook.epochs, "stop_reason": logbook.stop_reason}
        _save_bundle(cfg, name, payload, dh, logbook)
        fitted[name] = model
    return fitted


# --------------------------------------------------------------------------
# evaluate


def predict_dist(model, X):
    return model.conditional(X) if hasattr(model, "conditional") else model.predict(X)


def _density_rows(dist, n_show: int):
    rows = []
    for i in range(min(n_show, len(dist))):
        d = dist[i]
        lo = float(d.quantile(np.array([0.001]))[0])
        hi = float(d.quantile(np.array([0.999]))[0])
        grid = np.linspace(max(lo - 0.05 * (hi - lo), 1e-9), hi + 0.05 * (hi - lo), DENSITY_GRID)
        dens = dist[np.full(grid.size, i)].pdf(grid)
        rows.extend([i, g, v] for g, v in zip(grid, dens))
    return rows


def cmd_evaluate(cfg: dict) -> dict:
    from drnkit.metrics import MetricReport, calibration_curve, pit_values, qq_pairs, quantile_residuals

    splits, meta = load_splits(cfg)
    dh = meta["dataset_hash"]
    alpha = cfg["metrics"].get("alpha", 0.9)
    report = MetricReport(alpha=alpha, meta={**_stamp(cfg), "dataset_hash": dh})
    out = _out(cfg) / "eval"
    for name in [m for m in MODEL_NAMES if m in cfg["models"]]:
        model = load_bundle(cfg, name, dh)
        for split in ("val", "test"):
            ds = splits[split]
            dist = predict_dist(model, ds.X)
            report.add(name, split, dist, ds.y)
            if split == "test":
                pit = pit_values(dist, ds.y)
                _write_csv(out / f"calibration_{name}.csv", cfg, ["nominal", "empirical"], calibration_curve(pit))
                _write_csv(out / f"qq_{name}.csv", cfg, ["theoretical", "residual"],
                           qq_pairs(quantile_residuals(pit)))
                n_show = cfg["metrics"].get("density_instances", 3)
                _write_csv(out / f"density_{name}.csv", cfg, ["instance", "y", "density"],
                           _density_rows(dist, n_show))
    from drnkit.metrics import calibration_score

    result = report.to_dict()
    for name in report.scores:
        model = load_bundle(cfg, name, dh)
        ds = splits["test"]
        result["models"][name]["test"]["calibration_score"] = calibration_score(
            pit_values(predict_dist(model, ds.X), ds.y))
    _write_json(out / "metrics.json", result)
    return result


# --------------------------------------------------------------------------
# explain


def cmd_explain(cfg: dict) -> list:
    from drnkit.explain import (ValueFunctionSpec, dependence_data, explain_many, shap_importance,
                                write_explanations)

    splits, meta = load_splits(cfg)
    dh = meta["dataset_hash"]
    ex = cfg["explain"]
    drn = load_bundle(cfg, "drn", dh)
    glm = load_bundle(cfg, "glm", dh)
    tr = splits["train"]
    groups = None
    if ex.get("coalesce_groups", True) and meta.get("groups"):
        names = tr.feature_names
        groups = {g: [names.index(c) for c in cols] for g, cols in meta["groups"].items()}
    try:
        spec = ValueFunctionSpec(ex["target"], drn, tr.X, baseline=glm, alpha=ex.get("alpha", 0.9),
                                 M=ex.get("M", 100), seed=ex.get("seed", 0), groups=groups,
                                 feature_names=tr.feature_names)
    except ValueError as exc:
        raise ConfigError(f"explain: {exc}") from exc
    instances = np.atleast_2d(np.asarray(ex.get("instances", []), dtype=np.float64))
    n_imp = ex.get("importance_instances", 0)
    if n_imp:
        instances = np.vstack([instances, splits["test"].X[:n_imp]]) if instances.size else splits["test"].X[:n_imp]
    if instances.size == 0:
        raise ConfigError("explain.instances: nothing to explain")
    if instances.shape[1] != tr.X.shape[1]:
        raise ConfigError(f"explain.instances: rows need {tr.X.shape[1]} features")
    exps = explain_many(spec, instances)
    for e in exps:
        e.meta.update(_stamp(cfg))
    out = _out(cfg) / "explain"
    out.mkdir(parents=True, exist_ok=True)
    write_explanations(exps, out / "shap.json", out / "shap.csv")
    _prepend_stamp(out / "shap.csv", cfg)
    players = spec.players
    _write_csv(out / "importance.csv", cfg, ["feature", "mean_abs_phi"],
               zip(players, shap_importance(exps)))
    if groups is None:
        for j, name in enumerate(players):
            color = 1 - j if len(players) == 2 else None
            header = ["x", "phi"] + (["color"] if color is not None else [])
            _write_csv(out / f"dependence_{name}.csv", cfg, header, dependence_data(exps, j, color))
    return exps


def _prepend_stamp(path: Path, cfg: dict):
    stamp = _stamp(cfg)
    body = path.read_text()
    path.write_text(f"# config_hash={stamp['config_hash']} seed={stamp['seed']}\n" + body)


# --------------------------------------------------------------------------
# random search


SEARCH_SPACE = {
    "learning_rate": ("log", 1e-4, 1e-2),
    "dropout_rate": ("uniform", 0.0, 0.5),
    "neurons_per_layer": ("choice", [32, 64, 128, 256, 512]),
    "hidden_layers": ("choice", [1, 2, 3, 4]),
    "batch_size": ("choice", [64, 128, 256, 512]),
}


def _draw(rng, spec):
    kind = spec[0]
    if kind == "log":
        return float(np.exp(rng.uniform(np.log(spec[1]), np.log(spec[2]))))
    if kind == "uniform":
        return float(rng.uniform(spec[1], spec[2]))
    return spec[1][int(rng.integers(len(spec[1])))]


def cmd_random_search(cfg: dict, budget: int | None = None) -> dict:
    from drnkit.baselines import fit_cann, fit_ddr, fit_mdn
    from drnkit.train import fit_drn

    rs = cfg["random_search"]
    name = rs.get("model", "drn")
    if name not in MODEL_NAMES[1:]:
        raise ConfigError(f"random_search.model: {name!r} is not trainable")
    budget = budget or rs.get("budget", 8)
    splits, meta = load_splits(cfg)
    tr, va = splits["train"], splits["val"]
    glm = load_bundle(cfg, "glm", meta["dataset_hash"]) if name in ("cann", "drn") else None
    rng = np.random.default_rng(rs.get("seed", 0))
    base = training_config(cfg, name).with_(max_epochs=rs.get("max_epochs", 200))
    trials, best = [], None
    for t in range(budget):
        draw = {k: _draw(rng, v) for k, v in SEARCH_SPACE.items()}
        tc = base.with_(**draw)
        if name == "drn":
            _, lg = fit_drn(glm, tr.X, tr.y, va.X, va.y, tc)
        elif name == "cann":
            _, lg = fit_cann(glm, tr.X, tr.y, va.X, va.y, tc)
        elif name == "mdn":
            _, lg = fit_mdn(tr.X, tr.y, va.X, va.y, tc)
        else:
            _, lg = fit_ddr(tr.X, tr.y, va.X, va.y, tc)
        trials.append([t, *[draw[k] for k in SEARCH_SPACE], lg.best_val_loss])
        if best is None or lg.best_val_loss < best[0]:
            best = (lg.best_val_loss, tc)
    out = _out(cfg) / "search"
    _write_csv(out / f"{name}_trials.csv", cfg, ["trial", *SEARCH_SPACE, "best_val_loss"], trials)
    result = {**_stamp(cfg), "model": name, "best_val_loss": best[0], "config": best[1].to_dict()}
    _write_json(out / f"{name}_best.json", result)
    return result


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drnkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "fit", "evaluate", "explain", "random-search"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="data and training seed (overrides config)")
        p.add_argument("--models", help="comma-separated subset of glm,cann,mdn,ddr,drn")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "random-search":
            p.add_argument("--budget", type=int, default=None)
    return parser


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "evaluate": cmd_evaluate, "explain": cmd_explain}


def main(argv=None) -> int:
    from drnkit.autodiff import TrainingDivergenceError
    from drnkit.drn import DegenerateBaselineError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        models = [m.strip() for m in args.models.split(",")] if args.models else None
        cfg = load_config(args.config, {"seed": args.seed, "models": models, "out": args.out})
        limiter = None
        if args.threads:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(args.threads)
        try:
            if args.command == "random-search":
                result = cmd_random_search(cfg, args.budget)
                print(json.dumps({"best_val_loss": result["best_val_loss"]}))
            else:
                COMMANDS[args.command](cfg)
        finally:
            if limiter is not None:
                limiter.unregister()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (TrainingDivergenceError, DegenerateBaselineError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
