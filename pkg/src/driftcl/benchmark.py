"""Multi-seed benchmark and ablation runs, the JSON report and plot-ready CSVs.

Report layout (``schema: driftcl-report``, version 1)::

    {
      "schema", "version", "kind": "benchmark" | "ablate",
      "models": [labels in display order], "seeds": [...], "config": {...},
      "runs": [ {"seed", "base_experiment", "task_order", "threshold",
                 "models": {label: {"matrix", "a_prime", "final_rmse", "final_r2",
                                    "overall_rmse", "bwt", "fwt", "forgetting",
                                    "forgetting_mean", "bwt_series", "fwt_series",
                                    "gate_log", "timings"}}} ],
      "aggregate": {label: {"overall_rmse", "per_task_rmse", "per_task_r2", "bwt",
                            "fwt", "forgetting_mean", "per_task_forgetting"}}
    }

Every aggregate is ``{"mean", "std"}`` (population std over seeds) of the
matching per-seed values, so it can be recomputed from ``runs``. Matrices
are indexed by position in ``task_order`` (base experiment first).
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .config import RunConfig
from .data import FormatError, TaskSequence, load_csv, make_windows, save_csv, synthesize_suite
from .metrics import AccuracyMatrix, bwt, bwt_series, forgetting, fwt, fwt_series, r2
from .trainer import RunResult, TrainerConfig, base_snapshot, run_continual, train_baseline, train_rr_variant, train_tl

log = logging.getLogger(__name__)

REPORT_SCHEMA = "driftcl-report"
REPORT_VERSION = 1
BENCHMARK_MODELS = ("baseline", "TL", "CL", "RR-adaptive")
ABLATION_MODELS = ("baseline", "TL", "RR-adaptive", "RR+adaptive")
TIMING_KEYS = ("timings", "wall_clock")


# ---------------------------------------------------------------------------
# data


def load_tasks(cfg: RunConfig, seed: int) -> TaskSequence:
    if cfg.csv_mode:
        train = [load_csv(p, i) for i, p in enumerate(cfg.train_csv)]
        test = [load_csv(p, i) for i, p in enumerate(cfg.test_csv)]
    else:
        train, test = synthesize_suite(cfg.suite, seed)
    return TaskSequence.from_experiments(train, test)


def generate(cfg: RunConfig, out: Path, seed: int) -> list[Path]:
    """Write the nine train and nine test experiments of one suite as CSV."""
    out.mkdir(parents=True, exist_ok=True)
    train, test = synthesize_suite(cfg.suite, seed)
    paths = []
    for split, exps in (("train", train), ("test", test)):
        for e in exps:
            p = out / f"{split}_{e.experiment_id:02d}.csv"
            save_csv(e, p)
            paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# one seed


def _model_record(result: RunResult, tasks: TaskSequence, trainer: TrainerConfig) -> dict:
    m = AccuracyMatrix(result.matrix, result.a_prime)
    f_vec, f_mean = forgetting(m)
    r2s = [r2(result.model.predict(w.windows), w.targets)
           for w in (make_windows(t, trainer.window_length) for t in tasks.test)]
    return {
        "matrix": m.a.tolist(),
        "a_prime": m.a_prime.tolist(),
        "final_rmse": m.a[-1].tolist(),
        "final_r2": r2s,
        "overall_rmse": float(m.a[-1].mean()),
        "bwt": bwt(m),
        "fwt": fwt(m),
        "forgetting": f_vec.tolist(),
        "forgetting_mean": f_mean,
        "bwt_series": _nan_to_none(bwt_series(m)),
        "fwt_series": _nan_to_none(fwt_series(m)),
        "gate_log": [{"task_id": int(g.task_id), "min_distance": float(g.min_distance), "threshold": float(g.threshold),
                      "decision": bool(g.decision), "nearest_task": int(g.nearest_task)} for g in result.gate_log],
        "timings": dict(result.timings),
    }


def _nan_to_none(a: np.ndarray) -> list:
    return [None if math.isnan(x) else float(x) for x in a]


def _traces(result: RunResult, tasks: TaskSequence, trainer: TrainerConfig) -> list[dict]:
    out = []
    for pos, t in enumerate(tasks.test):
        w = make_windows(t, trainer.window_length)
        out.append({"task": pos, "experiment": t.experiment_id, "sample": w.end_index.tolist(),
                    "true": w.targets.tolist(), "pred": result.model.predict(w.windows).tolist()})
    return out


def run_seed(cfg: RunConfig, seed: int, kind: str = "benchmark", traces: bool = False) -> dict:
    """Train every model of ``kind`` on one seeded suite."""
    t0 = time.perf_counter()
    tasks = load_tasks(cfg, seed)
    trainer = replace(cfg.trainer, seed=seed)
    base = base_snapshot(tasks, trainer)
    labels = BENCHMARK_MODELS if kind == "benchmark" else ABLATION_MODELS
    runners = {
        "baseline": lambda: train_baseline(tasks, trainer),
        "TL": lambda: train_tl(tasks, trainer, base),
        "CL": lambda: run_continual(tasks, trainer, base),
        "RR-adaptive": lambda: train_rr_variant(tasks, trainer, False, base),
        "RR+adaptive": lambda: train_rr_variant(tasks, trainer, True, base),
    }
    models, trace = {}, {}
    for label in labels:
        t = time.perf_counter()
        result = runners[label]()
        models[label] = _model_record(result, tasks, trainer)
        models[label]["timings"]["total"] = time.perf_counter() - t
        if traces:
            trace[label] = _traces(result, tasks, trainer)
        log.info("seed %d %s: overall RMSE %.3f (%.1fs)", seed, label, models[label]["overall_rmse"],
                 time.perf_counter() - t)
    return {
        "seed": seed,
        "base_experiment": int(tasks.train[0].experiment_id),
        "task_order": [int(e.experiment_id) for e in tasks.train],
        "threshold": float(base[1].gate.threshold),
        "models": models,
        "wall_clock": time.perf_counter() - t0,
        "traces": trace,
    }


def _run_seed_job(args):
    return run_seed(*args)


# ---------------------------------------------------------------------------
# aggregate


def _stat(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": np.mean(a, axis=0).tolist(), "std": np.std(a, axis=0).tolist()}


def aggregate(runs: list[dict], labels: Iterable[str]) -> dict:
    out = {}
    for label in labels:
        recs = [r["models"][label] for r in runs]
        out[label] = {
            "overall_rmse": _stat([x["overall_rmse"] for x in recs]),
            "per_task_rmse": _stat([x["final_rmse"] for x in recs]),
            "per_task_r2": _stat([x["final_r2"] for x in recs]),
            "bwt": _stat([x["bwt"] for x in recs]),
            "fwt": _stat([x["fwt"] for x in recs]),
            "forgetting_mean": _stat([x["forgetting_mean"] for x in recs]),
            "per_task_forgetting": _stat([x["forgetting"] for x in recs]),
        }
    return out


def run(cfg: RunConfig, kind: str = "benchmark") -> tuple[dict, dict]:
    """All seeds of one benchmark or ablation; returns (report, traces by seed)."""
    if kind not in ("benchmark", "ablate"):
        raise ValueError(f"unknown run kind {kind!r}")
    cfg.validate()
    labels = BENCHMARK_MODELS if kind == "benchmark" else ABLATION_MODELS
    jobs = [(cfg, s, kind, i < cfg.trace_seeds) for i, s in enumerate(cfg.seeds)]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(jobs))) as pool:
            runs = list(pool.map(_run_seed_job, jobs))
    else:
        runs = [_run_seed_job(j) for j in jobs]
    runs.sort(key=lambda r: r["seed"])
    traces = {r["seed"]: r.pop("traces") for r in runs}
    report = {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "kind": kind,
        "models": list(labels),
        "seeds": [r["seed"] for r in runs],
        "config": cfg.as_dict(),
        "runs": runs,
        "aggregate": aggregate(runs, labels),
    }
    return report, traces


# ---------------------------------------------------------------------------
# files


def strip_timings(obj):
    """Copy of a report without wall-clock fields, for reproducibility checks."""
    if isinstance(obj, dict):
        return {k: strip_timings(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timings(v) for v in obj]
    return obj


def _write_csv(path: Path, header: list[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_outputs(report: dict, traces: dict, out: Path) -> list[Path]:
    """report.json plus one CSV per figure analog; returns the written paths."""
    out.mkdir(parents=True, exist_ok=True)
    labels = report["models"]
    paths = {name: out / f"{name}.csv" for name in
             ("rmse_table", "per_seed", "overall", "transfer", "gates", "traces")}
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    order = report["runs"][0]["task_order"]
    agg = report["aggregate"]
    _write_csv(paths["rmse_table"], ["model", "task", "experiment", "rmse_mean", "rmse_std", "r2_mean", "r2_std"],
               [(m, j, order[j], agg[m]["per_task_rmse"]["mean"][j], agg[m]["per_task_rmse"]["std"][j],
                 agg[m]["per_task_r2"]["mean"][j], agg[m]["per_task_r2"]["std"][j])
                for m in labels for j in range(len(order))])
    _write_csv(paths["per_seed"], ["model", "seed", "task", "experiment", "rmse", "r2"],
               [(m, r["seed"], j, r["task_order"][j], rec["final_rmse"][j], rec["final_r2"][j])
                for r in report["runs"] for m in labels for rec in [r["models"][m]]
                for j in range(len(rec["final_rmse"]))])
    _write_csv(paths["overall"], ["model", "overall_rmse_mean", "overall_rmse_std", "bwt_mean", "bwt_std",
                                  "fwt_mean", "fwt_std", "forgetting_mean", "forgetting_std"],
               [(m, agg[m]["overall_rmse"]["mean"], agg[m]["overall_rmse"]["std"], agg[m]["bwt"]["mean"],
                 agg[m]["bwt"]["std"], agg[m]["fwt"]["mean"], agg[m]["fwt"]["std"],
                 agg[m]["forgetting_mean"]["mean"], agg[m]["forgetting_mean"]["std"]) for m in labels])
    _write_csv(paths["transfer"], ["model", "seed", "task", "bwt", "fwt", "forgetting"],
               [(m, r["seed"], j, _blank(rec["bwt_series"][j]), _blank(rec["fwt_series"][j]), rec["forgetting"][j])
                for r in report["runs"] for m in labels for rec in [r["models"][m]]
                for j in range(len(rec["forgetting"]))])
    _write_csv(paths["gates"], ["model", "seed", "task", "min_distance", "threshold", "decision", "nearest_task"],
               [(m, r["seed"], g["task_id"], g["min_distance"], g["threshold"], int(g["decision"]), g["nearest_task"])
                for r in report["runs"] for m in labels for g in r["models"][m]["gate_log"]])
    _write_csv(paths["traces"], ["model", "seed", "task", "experiment", "sample", "true", "pred"],
               [(m, seed, tr["task"], tr["experiment"], s, y, p)
                for seed, by_model in sorted(traces.items()) for m, items in by_model.items() for tr in items
                for s, y, p in zip(tr["sample"], tr["true"], tr["pred"])])
    return [path, *paths.values()]


def _blank(x):
    return "" if x is None else x


def read_report(path: str | Path) -> dict:
    try:
        report = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(report, dict) or report.get("schema") != REPORT_SCHEMA:
        raise FormatError(f"{path}: not a {REPORT_SCHEMA} document")
    if report.get("version") != REPORT_VERSION:
        raise FormatError(f"{path}: unsupported report version {report.get('version')!r}")
    for key in ("models", "runs", "aggregate"):
        if key not in report:
            raise FormatError(f"{path}: missing field {key!r}")
    for m in report["models"]:
        if m not in report["aggregate"]:
            raise FormatError(f"{path}: no aggregate for model {m!r}")
    return report


def summary_rows(report: dict) -> list[tuple[str, float, float, float, float]]:
    """(model, overall RMSE mean, std, BWT mean, forgetting mean) in report order."""
    agg = report["aggregate"]
    try:
        return [(m, agg[m]["overall_rmse"]["mean"], agg[m]["overall_rmse"]["std"], agg[m]["bwt"]["mean"],
                 agg[m]["forgetting_mean"]["mean"]) for m in report["models"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed aggregate block ({exc})") from exc


def render(report: dict) -> str:
    """Plain-text tables: overall scores, then per-task RMSE (mean +- std)."""
    lines = [f"{report['kind']} over seeds {report['seeds']}", "",
             f"{'model':<12} {'overall RMSE':>18} {'BWT':>9} {'forgetting':>11}"]
    for m, mean, std, b, f in summary_rows(report):
        lines.append(f"{m:<12} {mean:>9.3f} +- {std:<5.3f} {b:>9.3f} {f:>11.3f}")
    order = report["runs"][0]["task_order"] if report["runs"] else []
    lines += ["", "per-task RMSE (degrees), columns are experiment ids, base first",
              f"{'model':<12} " + " ".join(f"{'exp' + str(e):>13}" for e in order)]
    for m in report["models"]:
        a = report["aggregate"][m]["per_task_rmse"]
        lines.append(f"{m:<12} " + " ".join(f"{mu:>6.2f} +-{sd:>5.2f}" for mu, sd in zip(a["mean"], a["std"])))
    return "\n".join(lines)
