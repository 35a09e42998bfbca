"""Config-driven experiment runner.

Reads a JSON config describing a dataset, a model, a selection method, a list
of baselines, a subset-size grid and seeds; for every (method, size, seed)
cell it selects a subset, retrains the model from scratch on the subset and
evaluates metrics on held-out data. Results go to a long-format CSV plus a
JSON summary with mean/stdev per cell; per-metric pivoted series are emitted
for plotting. Everything is seeded, so reruns are byte-identical.

Command line: summarize --config <path> --out <dir> [--seed N] [--verbose]
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, compsense, data, hypergrad, models, proxy, select
from .errors import CoreselectError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

__all__ = ["ExperimentConfig", "run_experiment", "emit_plotdata",
           "write_results", "main"]


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description (see README for the JSON schema)."""

    kind: str                      # "summarize" | "dict-select"
    dataset: dict
    model: dict = field(default_factory=dict)
    selection: dict = field(default_factory=dict)
    baselines: tuple = ()
    sizes: tuple = ()
    seeds: tuple = (0,)
    metrics: tuple = ("outer_loss",)
    test_split: dict | None = None
    validation_fraction: float = 0.0
    standardize: bool = False
    proxy: dict | None = None
    dictionary: dict | None = None
    workers: int = 1

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        sizes = tuple(int(s) for s in doc.get("sizes", ()))
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise CoreselectError("size grid must be strictly increasing")
        seeds = tuple(int(s) for s in doc.get("seeds", (0,)))
        if not seeds:
            raise CoreselectError("need at least one seed")
        cfg = ExperimentConfig(
            kind=doc.get("kind", "summarize"),
            dataset=doc["dataset"],
            model=doc.get("model", {}),
            selection=doc.get("selection", {}),
            baselines=tuple(doc.get("baselines", ())),
            sizes=sizes,
            seeds=seeds,
            metrics=tuple(doc.get("metrics", ("outer_loss",))),
            test_split=doc.get("test_split"),
            validation_fraction=float(doc.get("validation_fraction", 0.0)),
            standardize=bool(doc.get("standardize", False)),
            proxy=doc.get("proxy"),
            dictionary=doc.get("dictionary"),
            workers=int(doc.get("workers", 1)),
        )
        if cfg.kind not in ("summarize", "dict-select"):
            raise CoreselectError(f"unknown experiment kind {cfg.kind!r}")
        if not sizes:
            raise CoreselectError("sizes must be nonempty")
        return cfg


# ---------------------------------------------------------------------------
# dataset loading


def load_dataset(spec: dict) -> data.WeightedDataset:
    kind = spec.get("kind")
    if kind == "libsvm":
        with open(spec["path"], "rb") as fh:
            return data.parse_libsvm(fh.read(), spec.get("dim_hint"))
    if kind == "synthetic_gmm":
        return data.make_gmm_synthetic(int(spec["k"]), int(spec["n"]),
                                       int(spec.get("seed", 0)))
    if kind == "synthetic_blobs":
        return data.make_binary_blobs(
            int(spec["n"]), int(spec["dim"]), int(spec.get("seed", 0)),
            float(spec.get("class1_fraction", 0.5)),
            float(spec.get("separation", 2.0)))
    raise CoreselectError(f"unknown dataset kind {kind!r}")


def _split(ds: data.WeightedDataset, fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    n_test = int(round(ds.n * fraction))
    perm = rng.permutation(ds.n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return ds.subset(train_idx), ds.subset(test_idx)


@dataclass
class _Prepared:
    train: data.WeightedDataset
    test: data.WeightedDataset | None
    outer_ds: data.WeightedDataset
    feature_map: proxy.NystromMap | None
    n_classes: int | None
    n_components: int | None


def _prepare(cfg: ExperimentConfig) -> _Prepared:
    full = load_dataset(cfg.dataset)
    test = None
    if cfg.test_split:
        full, test = _split(full, float(cfg.test_split.get("fraction", 0.25)),
                            int(cfg.test_split.get("seed", 0)))
    if cfg.standardize:
        full, stats = data.standardize(full)
        if test is not None:
            test = stats.apply_dataset(test)

    family = cfg.model.get("family", "ridge")
    n_classes = cfg.model.get("n_classes")
    n_components = cfg.model.get("n_components")
    if family == "multiclass-logistic" and n_classes is None:
        n_classes = int(full.labels.max()) + 1

    feature_map = None
    if cfg.proxy:
        spec = cfg.proxy.get("kernel", {})
        kernel = proxy.KernelSpec(
            spec.get("family", "rbf"), float(spec.get("gamma", 1e-3)),
            int(spec.get("degree", 2)), float(spec.get("coef0", 1.0)))
        feature_map = proxy.nystrom_fit(full, int(cfg.proxy.get("q", 64)),
                                        kernel, int(cfg.proxy.get("seed", 0)))
        full = feature_map.transform_dataset(full)
        if test is not None:
            test = feature_map.transform_dataset(test)

    outer_ds = full
    if cfg.validation_fraction > 0:
        # inner trains on the reduced train split; the outer loss also sees
        # the validation part (train + validation composition)
        inner_part, _val = _split(full, cfg.validation_fraction,
                                  int(cfg.dataset.get("seed", 0)) + 1)
        outer_ds = full
        full = inner_part
    return _Prepared(full, test, outer_ds, feature_map, n_classes, n_components)


# ---------------------------------------------------------------------------
# selection + evaluation cells


def _hypergrad_config(sel: dict) -> hypergrad.HypergradConfig:
    return hypergrad.HypergradConfig(
        solver=sel.get("solver", "cg"),
        max_iters=int(sel.get("max_iters", 100)),
        cg_tolerance=float(sel.get("cg_tolerance", 1e-10)),
        neumann_terms=int(sel.get("neumann_terms", 100)),
        neumann_scale=float(sel.get("neumann_scale", 1.0)),
        damping=float(sel.get("damping", 0.0)),
    )


def _select_bilevel(prep: _Prepared, cfg: ExperimentConfig, size: int,
                    seed: int) -> select.CoresetState:
    sel = cfg.selection
    variant = sel.get("variant", "forward")
    family = cfg.model.get("family", "ridge")
    l2 = float(cfg.model.get("l2_reg", 0.0))
    inner = models.InnerProblem(prep.train, family, l2, prep.n_classes,
                                prep.n_components)
    outer = models.OuterObjective(prep.outer_ds, family, prep.n_classes,
                                  prep.n_components)
    hcfg = _hypergrad_config(sel)
    common = dict(m=size, batch=int(sel.get("batch", 1)),
                  exchange_steps=int(sel.get("exchange_steps", 0)),
                  weighted=bool(sel.get("weighted", False)),
                  weight_opt_iters=int(sel.get("weight_opt_iters", 150)),
                  weight_step_size=sel.get("weight_step_size", 0.01),
                  seed=seed,
                  initial_pool=sel.get("initial_pool"))
    if variant == "forward":
        scfg = select.SelectionConfig(variant="forward", **common)
        return select.forward_select(inner, outer, scfg, hcfg)
    if variant == "forward-batch":
        scfg = select.SelectionConfig(variant="forward-batch", **common)
        return select.batch_forward_select(inner, outer, scfg, hcfg)
    if variant == "exchange":
        scfg = select.SelectionConfig(variant="exchange", **common)
        return select.exchange_select(inner, outer, scfg, hcfg)
    if variant == "eliminate":
        scfg = select.SelectionConfig(variant="eliminate", **common)
        return select.eliminate_select(inner, outer, scfg, hcfg)
    if variant == "regularized":
        rcfg = select.RegularizedConfig(
            sparsity_penalty=float(sel.get("sparsity_penalty", 1e-7)),
            inner_reg=l2,
            outer_steps=int(sel.get("outer_steps", 100)),
            plateau_window=int(sel.get("plateau_window", 5)),
            step_size=float(sel.get("step_size", 0.05)),
        )
        return select.regularized_select(inner, outer, rcfg, hcfg,
                                         target_m=size)
    raise CoreselectError(f"unknown selection variant {variant!r}")


def _select_baseline(prep: _Prepared, method: str, size: int,
                     seed: int) -> select.CoresetState:
    if method == "uniform":
        idx = baselines.uniform_select(prep.train, size, seed)
    elif method == "kmeanspp":
        idx = baselines.kmeanspp_select(prep.train, size, seed)
    elif method == "kcenter":
        idx = baselines.kcenter_select(prep.train, size, seed)
    else:
        raise CoreselectError(f"unknown baseline {method!r}")
    w = np.zeros(prep.train.n)
    w[np.asarray(idx, dtype=np.int64)] = 1.0
    return select.CoresetState(tuple(idx), w)


def _evaluate(prep: _Prepared, cfg: ExperimentConfig, state: select.CoresetState,
              seed: int, full_reference: dict) -> dict:
    family = cfg.model.get("family", "ridge")
    l2 = float(cfg.model.get("l2_reg", 0.0))
    train = prep.train
    out: dict = {}
    if family == "gmm-nll":
        k = int(prep.n_components or cfg.model.get("n_components", 1))
        fitted = models.gmm_em_fit(train, k, state.weights, seed=seed)
        nll = models.gmm_nll(train, fitted, np.ones(train.n))
        full_nll = full_reference["nll"]
        out["relative_nll_error"] = (nll - full_nll) / abs(full_nll)
        return out
    problem = models.InnerProblem(train, family, l2, prep.n_classes)
    fitted = models.solve_inner(problem, state.weights)
    if "outer_loss" in cfg.metrics:
        outer = models.OuterObjective(prep.outer_ds, family, prep.n_classes)
        out["outer_loss"] = models.outer_loss(outer, fitted)
    if "test_accuracy" in cfg.metrics:
        if prep.test is None:
            raise CoreselectError("test_accuracy needs a test_split")
        pred = models.predict(fitted, prep.test.features)
        out["test_accuracy"] = float((pred == prep.test.labels).mean())
    return out


def _run_cell_summarize(prep, cfg, method, size, seed, full_reference):
    if method == "bilevel":
        state = _select_bilevel(prep, cfg, size, seed)
    else:
        state = _select_baseline(prep, method, size, seed)
    return _evaluate(prep, cfg, state, seed, full_reference)


# ---------------------------------------------------------------------------
# dictionary-selection experiments


def _prepare_dict(cfg: ExperimentConfig):
    spec = cfg.dataset
    if spec.get("kind") != "synthetic_sparse":
        raise CoreselectError("dict-select needs dataset kind synthetic_sparse")
    signals = compsense.make_sparse_signals(
        int(spec["n"]), int(spec["dim"]), int(spec.get("sparsity", 3)),
        int(spec.get("seed", 0)), spec.get("support_pool"))
    dspec = cfg.dictionary or {}
    d = int(spec["dim"])
    rng = np.random.default_rng(int(dspec.get("seed", 0)))
    atoms = rng.standard_normal((int(dspec.get("m", 2 * d)), d))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    if dspec.get("include_basis", False):
        atoms = np.vstack([np.eye(d), atoms])
    test_spec = cfg.test_split or {}
    n_test = int(round(signals.shape[0] * float(test_spec.get("fraction", 0.25))))
    split_rng = np.random.default_rng(int(test_spec.get("seed", 0)))
    perm = split_rng.permutation(signals.shape[0])
    test = signals[np.sort(perm[:n_test])]
    train = signals[np.sort(perm[n_test:])]
    reg = float(cfg.model.get("l2_reg", 1e-3))
    return train, test, atoms, reg


def _run_cell_dict(cfg, train, test, atoms, reg, method, size, seed):
    p_train = compsense.CompressedSensingProblem(train, atoms, reg)
    eval_signals = test if len(test) else train
    if method == "bilevel":
        chosen = compsense.dict_select(
            p_train, size, batch=int(cfg.selection.get("batch", 1)), seed=seed)
        p_eval = compsense.CompressedSensingProblem(eval_signals, atoms, reg)
        err = compsense.sup_error(p_eval, chosen)
    elif method == "approx-greedy":
        chosen = compsense.approx_greedy_baseline(p_train, size)
        p_eval = compsense.CompressedSensingProblem(eval_signals, atoms, reg)
        err = compsense.sup_error(p_eval, chosen)
    elif method == "random-gaussian":
        rows = compsense.random_gaussian_baseline(atoms.shape[1], size, seed)
        p_eval = compsense.CompressedSensingProblem(eval_signals, rows, reg)
        err = compsense.sup_error(p_eval, list(range(size)))
    else:
        raise CoreselectError(f"unknown dict-select method {method!r}")
    return {"reconstruction_error": err}


# ---------------------------------------------------------------------------
# experiment driver


def run_experiment(cfg: ExperimentConfig) -> list[dict]:
    """Run every (method, size, seed) cell; failures are recorded per cell and
    the run continues. Returns long-format rows sorted for stable output."""
    methods = ["bilevel"] + list(cfg.baselines)
    rows: list[dict] = []

    if cfg.kind == "summarize":
        prep = _prepare(cfg)
        full_reference: dict = {}
        if cfg.model.get("family") == "gmm-nll":
            k = int(cfg.model.get("n_components", 1))
            full_fit = models.gmm_em_fit(prep.train, k,
                                         np.ones(prep.train.n),
                                         seed=cfg.seeds[0])
            full_reference["nll"] = models.gmm_nll(prep.train, full_fit,
                                                   np.ones(prep.train.n))

        def job(cell):
            method, size, seed = cell
            try:
                metrics = _run_cell_summarize(prep, cfg, method, size, seed,
                                              full_reference)
                return [dict(method=method, size=size, seed=seed,
                             metric=name, value=value, status="ok")
                        for name, value in sorted(metrics.items())]
            except Exception as exc:  # noqa: BLE001 - cell isolation
                logger.warning("cell %s failed: %s", cell, exc)
                return [dict(method=method, size=size, seed=seed,
                             metric="", value=float("nan"),
                             status=f"error:{type(exc).__name__}")]
    else:
        train, test, atoms, reg = _prepare_dict(cfg)

        def job(cell):
            method, size, seed = cell
            try:
                metrics = _run_cell_dict(cfg, train, test, atoms, reg,
                                         method, size, seed)
                return [dict(method=method, size=size, seed=seed,
                             metric=name, value=value, status="ok")
                        for name, value in sorted(metrics.items())]
            except Exception as exc:  # noqa: BLE001
                logger.warning("cell %s failed: %s", cell, exc)
                return [dict(method=method, size=size, seed=seed,
                             metric="", value=float("nan"),
                             status=f"error:{type(exc).__name__}")]

    cells = [(method, size, seed) for method in methods
             for size in cfg.sizes for seed in cfg.seeds]
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for result in pool.map(job, cells):
                rows.extend(result)
    else:
        for cell in cells:
            rows.extend(job(cell))
    rows.sort(key=lambda r: (r["method"], r["size"], r["seed"], r["metric"]))
    return rows


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_results(rows: list[dict], out_dir) -> None:
    """results.csv (long format) + summary.json (mean/stdev per cell)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "size", "seed", "metric", "value", "status"])
        for r in rows:
            writer.writerow([r["method"], r["size"], r["seed"], r["metric"],
                             _fmt(r["value"]), r["status"]])

    cells: dict = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        cells.setdefault((r["metric"], r["method"], r["size"]), []).append(
            r["value"])
    summary = {"schema_version": SCHEMA_VERSION, "cells": []}
    for (metric, method, size), values in sorted(cells.items()):
        stdev = statistics.stdev(values) if len(values) > 1 else 0.0
        summary["cells"].append({
            "metric": metric, "method": method, "size": size,
            "mean": statistics.fmean(values), "stdev": stdev,
            "n_seeds": len(values), "stdev_degenerate": len(values) < 2,
        })
    summary["n_failed"] = sum(1 for r in rows if r["status"] != "ok")
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def emit_plotdata(rows: list[dict], out_dir) -> list[Path]:
    """Per-metric CSV series (size on x, mean/stdev per method) for plotting."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grouped: dict = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        grouped.setdefault(r["metric"], {}).setdefault(
            (r["method"], r["size"]), []).append(r["value"])
    written = []
    for metric, cells in sorted(grouped.items()):
        path = out / f"series_{metric}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "size", "mean", "stdev", "n_seeds",
                             "stdev_degenerate"])
            for (method, size), values in sorted(cells.items()):
                stdev = statistics.stdev(values) if len(values) > 1 else 0.0
                writer.writerow([method, size, _fmt(statistics.fmean(values)),
                                 _fmt(stdev), len(values),
                                 int(len(values) < 2)])
        written.append(path)
    return written


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="summarize",
        description="Run a coreset-selection experiment from a JSON config.")
    parser.add_argument("--config", required=True, help="path to JSON config")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config's seed list with one seed")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    with open(args.config) as fh:
        doc = json.load(fh)
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    cfg = ExperimentConfig.from_dict(doc)
    rows = run_experiment(cfg)
    write_results(rows, args.out)
    emit_plotdata(rows, args.out)
    failed = sum(1 for r in rows if r["status"] != "ok")
    if failed:
        logger.warning("%d cell(s) failed", failed)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
