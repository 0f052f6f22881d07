"""Command-line pipeline: synthesize data, train, bootstrap, sample, score.

Subcommands
-----------
synth             write a synthetic dentition dataset
train-boundary    train the cylinder-bound regressor
train-denoiser    train the generative noise predictor (stage 1 or 2)
bootstrap-pseudo  fill edentulous gaps with generated placeholder teeth
sample            generate crowns for masked test scenarios
evaluate          score generated crowns against ground truth
stats             reader-study statistics from a score table

Every command is deterministic given (config, seed): outputs are
byte-identical across reruns and across ``--jobs`` settings.  Each run
writes a ``run_manifest.json`` recording the command, seed, config hash,
and package version.  Exit codes: 0 success, 2 validation error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .boundary import CylBound, fit_bound
from .dentition import (
    Dentition,
    FDI_CODES,
    MIRROR_MAP,
    Role,
    Scenario,
    SynthConfig,
    Tooth,
    make_scenario,
    read_dentition,
    synth_dentition,
    write_dentition,
    zigzag_index,
)
from .diffusion import make_schedule
from .metrics import evaluate_scenario
from .nets import (
    BoundaryRegressor,
    Denoiser,
    DenoiserConfig,
    RegressorConfig,
    TrainConfig,
    bounds_from_predictions,
    load_denoiser,
    load_regressor,
    predict_bounds,
    sample_crowns,
    save_denoiser,
    save_regressor,
    train_denoiser,
    train_regressor,
)
from .stats import NiConfig, ScoreTable, summarize_reader_study

# Desk-scale defaults.  The "full_scale_reference" block records the
# production-scale training recipe these defaults stand in for; it is
# documentation only and never read by the pipeline.
DEFAULT_CONFIG: dict = {
    "seed": 0,
    "synth": {
        "count": 64,
        "points_per_tooth": 64,
        "jitter": 0.03,
        "missing_lo": 0,
        "missing_hi": 0,
    },
    "schedule": {"T": 200, "beta_min": 1e-4, "beta_max": 2e-2},
    "denoiser": {
        "enc_hidden": 32,
        "latent": 64,
        "heads": 4,
        "attn_layers": 2,
        "time_dim": 32,
        "dec_hidden": 64,
        "dropout": 0.1,
    },
    "regressor": {
        "enc_hidden": 32,
        "latent": 64,
        "heads": 4,
        "attn_layers": 2,
        "dropout": 0.3,
        "out_scale": 20.0,
    },
    "train_denoiser": {
        "epochs": 200,
        "lr": 1e-3,
        "lr_decay": 0.4,
        "lr_decay_every": 100,
        "min_targets": 1,
        "max_targets": 6,
        "augment": True,
    },
    "train_regressor": {
        "epochs": 300,
        "lr": 3e-3,
        "lr_decay": 0.5,
        "lr_decay_every": 100,
        "min_targets": 1,
        "max_targets": 6,
        "augment": True,
    },
    "sample": {
        # scenarios per dentition for 1..6 missing teeth
        "scenarios_per_missing": [2, 1, 1, 0, 0, 0],
        "use_predicted_bounds": True,
    },
    "evaluate": {"mode": "both"},
    "stats": {
        "ni_margin": -0.10,
        "level": 0.95,
        "bootstrap_iters": 10000,
        "workflows": ["assisted", "manual"],
    },
    "full_scale_reference": {
        "generation": {
            "points_per_tooth": 1024,
            "T": 1000,
            "beta": [1e-4, 2e-2],
            "stage1": {"epochs": 3000, "lr": 4e-5, "decay_factor": 0.4, "decay_at_epoch": 1500},
            "stage2": {"epochs": 2400, "lr": 2e-5, "decay_factor": 0.45, "decay_every": 800},
            "optimizer": "adam",
            "dropout": 0.1,
        },
        "boundary": {
            "points_per_tooth": 512,
            "epochs": 1000,
            "lr_init": 3e-4,
            "lr_final": 3e-6,
            "lr_schedule": "cosine_annealing",
            "optimizer": "adam",
            "dropout": 0.3,
        },
    },
}


class ValidationFailure(Exception):
    """Bad inputs or configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

def _deep_update(base: dict, patch: dict) -> dict:
    for key, value in patch.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def load_config(path: str | None, overrides: list[str], seed: int | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ValidationFailure(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationFailure(f"malformed config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ValidationFailure(f"config {path} must be a JSON object")
        _deep_update(cfg, user)
    for item in overrides or []:
        if "=" not in item:
            raise ValidationFailure(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValidationFailure(f"--set path {key!r} crosses a non-object")
        node[parts[-1]] = value
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, doc) -> None:
    _write_text_atomic(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    _write_text_atomic(path, "\n".join(lines) + "\n")


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _prepare_out(out: str, force: bool) -> Path:
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ValidationFailure(
            f"output directory {out_dir} is not empty (use --force to overwrite)"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _run_manifest(out_dir: Path, command: str, cfg: dict, extra: dict | None = None):
    doc = {
        "command": command,
        "seed": cfg["seed"],
        "config_sha256": config_hash(cfg),
        "version": __version__,
    }
    doc.update(extra or {})
    _write_json(out_dir / "run_manifest.json", doc)


def _scenario_seed(master_seed: int, scenario_id: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{scenario_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


# ---------------------------------------------------------------------------
# Dataset helpers
# ---------------------------------------------------------------------------

def _load_dataset(data_dir: str) -> list[tuple[str, Dentition]]:
    index = Path(data_dir) / "dataset.json"
    try:
        doc = json.loads(index.read_text())
    except OSError as exc:
        raise ValidationFailure(f"cannot read dataset index {index}: {exc}") from exc
    entries = []
    for entry in doc.get("entries", []):
        dentition = read_dentition(Path(data_dir) / entry["manifest"])
        entries.append((entry["id"], dentition))
    if not entries:
        raise ValidationFailure(f"dataset {data_dir} is empty")
    return entries


def cmd_synth(cfg: dict, out: str, force: bool) -> int:
    out_dir = _prepare_out(out, force)
    sc = cfg["synth"]
    synth_cfg = SynthConfig(
        points_per_tooth=int(sc["points_per_tooth"]), jitter=float(sc["jitter"])
    )
    rng = np.random.default_rng(cfg["seed"])
    entries = []
    for i in range(int(sc["count"])):
        dent_seed = int(rng.integers(0, 2**31 - 1))
        dentition = synth_dentition(dent_seed, synth_cfg)
        missing: list[int] = []
        lo, hi = int(sc["missing_lo"]), int(sc["missing_hi"])
        if hi > 0:
            n_missing = int(rng.integers(lo, hi + 1))
            if n_missing > 0:
                picks = rng.choice(28, size=n_missing, replace=False)
                missing = sorted(int(FDI_CODES[p]) for p in picks)
                dentition = dentition.without(missing)
        name = f"dent_{i:04d}"
        write_dentition(dentition, out_dir / name / "manifest.json")
        entries.append(
            {
                "id": name,
                "manifest": f"{name}/manifest.json",
                "seed": dent_seed,
                "n_teeth": len(dentition),
                "missing": missing,
            }
        )
    _write_json(
        out_dir / "dataset.json",
        {
            "entries": entries,
            "points_per_tooth": sc["points_per_tooth"],
            "seed": cfg["seed"],
        },
    )
    _run_manifest(out_dir, "synth", cfg, {"count": len(entries)})
    print(f"wrote {len(entries)} dentitions to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Training commands
# ---------------------------------------------------------------------------

def _train_cfg(section: dict) -> TrainConfig:
    return TrainConfig(
        epochs=int(section["epochs"]),
        lr=float(section["lr"]),
        lr_decay=float(section.get("lr_decay", 1.0)),
        lr_decay_every=int(section.get("lr_decay_every", 0)),
        min_targets=int(section.get("min_targets", 1)),
        max_targets=int(section.get("max_targets", 6)),
        augment=bool(section.get("augment", True)),
    )


def _write_loss_csv(path: Path, trace: list[float]) -> None:
    _write_csv(path, ["epoch", "loss"], [(i, loss) for i, loss in enumerate(trace)])


def cmd_train_boundary(cfg: dict, data: str, out: str, force: bool) -> int:
    out_dir = _prepare_out(out, force)
    dataset = _load_dataset(data)
    print(f"dataset: {len(dataset)} dentitions")
    model = BoundaryRegressor(RegressorConfig(**cfg["regressor"]), seed=cfg["seed"])
    trace = train_regressor(
        model, [d for _, d in dataset], _train_cfg(cfg["train_regressor"]), cfg["seed"]
    )
    save_regressor(out_dir / "boundary.ckpt", model, {"seed": cfg["seed"]})
    _write_loss_csv(out_dir / "loss.csv", trace)
    _run_manifest(out_dir, "train-boundary", cfg, {"epochs": len(trace)})
    print(f"final loss {trace[-1]:.4f} (initial {trace[0]:.4f})")
    return 0


def cmd_train_denoiser(
    cfg: dict, data: str, out: str, force: bool, init: str | None
) -> int:
    out_dir = _prepare_out(out, force)
    dataset = _load_dataset(data)
    print(f"dataset: {len(dataset)} dentitions")
    incomplete = [name for name, d in dataset if len(d) < 28]
    if incomplete:
        raise ValidationFailure(
            f"denoiser training needs fully dentate scans; incomplete: {incomplete[:5]}"
        )
    if init is not None:
        model = load_denoiser(init)
        stage = 2
    else:
        model = Denoiser(DenoiserConfig(**cfg["denoiser"]), seed=cfg["seed"])
        stage = 1
    sch_cfg = cfg["schedule"]
    schedule = make_schedule(
        int(sch_cfg["T"]), float(sch_cfg["beta_min"]), float(sch_cfg["beta_max"])
    )
    trace = train_denoiser(
        model,
        [d for _, d in dataset],
        schedule,
        _train_cfg(cfg["train_denoiser"]),
        cfg["seed"],
    )
    save_denoiser(out_dir / "denoiser.ckpt", model, {"seed": cfg["seed"], "stage": stage})
    _write_loss_csv(out_dir / "loss.csv", trace)
    _run_manifest(out_dir, "train-denoiser", cfg, {"epochs": len(trace), "stage": stage})
    print(f"stage {stage}: final loss {trace[-1]:.4f} (initial {trace[0]:.4f})")
    return 0


# ---------------------------------------------------------------------------
# Pseudo-tooth bootstrapping
# ---------------------------------------------------------------------------

def _heuristic_bound(dentition: Dentition, fdi: int) -> CylBound:
    """Estimate a gap's cylinder from the mirrored twin or arch neighbors."""
    twin = MIRROR_MAP[fdi]
    if twin in dentition:
        b = fit_bound(dentition.get(twin).points)
        return CylBound(-b.c_x, b.c_y, b.c_z, b.r, b.h)
    quadrant, pos = divmod(fdi, 10)
    same_arch = [
        t for t in dentition.teeth if t.fdi // 10 in ((1, 2) if quadrant in (1, 2) else (3, 4))
    ]
    if not same_arch:
        same_arch = list(dentition.teeth)
    ranked = sorted(
        same_arch, key=lambda t: abs(zigzag_index(t.fdi) - zigzag_index(fdi))
    )[:2]
    fitted = [fit_bound(t.points) for t in ranked]
    arr = np.mean([b.as_array() for b in fitted], axis=0)
    return CylBound(*[float(v) for v in arr])


def _gap_bounds(
    dentition: Dentition, gaps: list[int], regressor: BoundaryRegressor | None
) -> dict[int, CylBound]:
    if regressor is not None:
        params = predict_bounds(regressor, dentition, gaps)
        return bounds_from_predictions(params, sorted(gaps, key=zigzag_index))
    return {f: _heuristic_bound(dentition, f) for f in gaps}


def cmd_bootstrap_pseudo(
    cfg: dict,
    data: str,
    checkpoint: str,
    out: str,
    force: bool,
    boundary_checkpoint: str | None,
) -> int:
    out_dir = _prepare_out(out, force)
    if not Path(checkpoint).exists():
        raise ValidationFailure(f"missing denoiser checkpoint: {checkpoint}")
    model = load_denoiser(checkpoint)
    regressor = (
        load_regressor(boundary_checkpoint) if boundary_checkpoint is not None else None
    )
    dataset = _load_dataset(data)
    sch_cfg = cfg["schedule"]
    schedule = make_schedule(
        int(sch_cfg["T"]), float(sch_cfg["beta_min"]), float(sch_cfg["beta_max"])
    )

    entries = []
    n_filled = 0
    for name, dentition in dataset:
        gaps = sorted(set(FDI_CODES) - set(dentition.fdis), key=zigzag_index)
        if gaps:
            # Spans of more than six missing teeth are filled in chunks.
            filled = dentition
            for start in range(0, len(gaps), 6):
                chunk = gaps[start : start + 6]
                bounds = _gap_bounds(filled, chunk, regressor)
                scenario = Scenario(
                    context=frozenset(filled.fdis), targets=frozenset(chunk)
                )
                clouds = sample_crowns(
                    model,
                    filled,
                    scenario,
                    bounds,
                    schedule,
                    _scenario_seed(cfg["seed"], f"bootstrap:{name}:{start}"),
                    n_points=filled.teeth[0].n_points,
                )
                new_teeth = list(filled.teeth) + [
                    Tooth(fdi=f, role=Role.CONTEXT, points=clouds[f], pseudo=True)
                    for f in chunk
                ]
                filled = Dentition(teeth=tuple(new_teeth), frame=filled.frame)
            dentition = filled
            n_filled += len(gaps)
        write_dentition(dentition, out_dir / name / "manifest.json")
        entries.append(
            {
                "id": name,
                "manifest": f"{name}/manifest.json",
                "n_teeth": len(dentition),
                "pseudo": [t.fdi for t in dentition.teeth if t.pseudo],
            }
        )
    _write_json(
        out_dir / "dataset.json",
        {
            "entries": entries,
            "points_per_tooth": dataset[0][1].teeth[0].n_points,
            "seed": cfg["seed"],
        },
    )
    _run_manifest(out_dir, "bootstrap-pseudo", cfg, {"pseudo_teeth": n_filled})
    print(f"filled {n_filled} gaps across {len(entries)} dentitions")
    return 0


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

_WORKER_STATE: dict = {}


def _build_test_scenarios(cfg: dict, dataset) -> list[dict]:
    per_missing = cfg["sample"]["scenarios_per_missing"]
    if len(per_missing) != 6:
        raise ValidationFailure("sample.scenarios_per_missing must have 6 entries")
    scenarios = []
    for name, dentition in dataset:
        for n_missing, count in enumerate(per_missing, start=1):
            for rep in range(int(count)):
                sid = f"{name}-m{n_missing}-r{rep}"
                rng = np.random.default_rng(
                    np.random.SeedSequence([cfg["seed"], _stable_hash32(sid)])
                )
                picks = rng.choice(len(dentition), size=n_missing, replace=False)
                targets = sorted(
                    int(dentition.teeth[i].fdi) for i in sorted(picks)
                )
                scenarios.append({"id": sid, "dentition": name, "targets": targets})
    return scenarios


def _stable_hash32(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


def _sample_one(task: dict) -> dict:
    """Worker: generate one scenario.  Loads models lazily per process."""
    key = (task["checkpoint"], task.get("boundary_checkpoint"))
    if _WORKER_STATE.get("key") != key:
        _WORKER_STATE["model"] = load_denoiser(task["checkpoint"])
        _WORKER_STATE["regressor"] = (
            load_regressor(task["boundary_checkpoint"])
            if task.get("boundary_checkpoint")
            else None
        )
        _WORKER_STATE["key"] = key
    model = _WORKER_STATE["model"]
    regressor = _WORKER_STATE["regressor"]

    dentition = read_dentition(task["manifest"])
    targets = task["targets"]
    scenario = make_scenario(dentition, targets, seed=0)
    context = dentition.without(targets)
    if task["use_predicted_bounds"] and regressor is not None:
        params = predict_bounds(regressor, context, targets)
        bounds = bounds_from_predictions(params, sorted(targets, key=zigzag_index))
    else:
        bounds = {f: fit_bound(dentition.get(f).points) for f in targets}
    sch = task["schedule"]
    schedule = make_schedule(sch["T"], sch["beta_min"], sch["beta_max"])
    clouds = sample_crowns(
        model,
        context,
        scenario,
        bounds,
        schedule,
        _scenario_seed(task["seed"], task["id"]),
        n_points=context.teeth[0].n_points,
    )
    out_manifest = Path(task["out_dir"]) / task["id"] / "manifest.json"
    generated = Dentition(
        teeth=tuple(
            Tooth(fdi=f, role=Role.TARGET, points=clouds[f]) for f in sorted(clouds)
        )
    )
    write_dentition(generated, out_manifest)
    return {
        "id": task["id"],
        "dentition": task["dentition"],
        "targets": sorted(targets),
        "manifest": f"{task['id']}/manifest.json",
    }


def cmd_sample(
    cfg: dict,
    data: str,
    checkpoint: str,
    out: str,
    force: bool,
    jobs: int,
    boundary_checkpoint: str | None,
) -> int:
    out_dir = _prepare_out(out, force)
    if not Path(checkpoint).exists():
        raise ValidationFailure(f"missing denoiser checkpoint: {checkpoint}")
    dataset = _load_dataset(data)
    incomplete = [name for name, d in dataset if len(d) < 28]
    if incomplete:
        raise ValidationFailure(
            f"test dentitions must be fully dentate; incomplete: {incomplete[:5]}"
        )
    scenarios = _build_test_scenarios(cfg, dataset)
    manifests = {name: str(Path(data) / f"{name}/manifest.json") for name, _ in dataset}
    sch_cfg = cfg["schedule"]
    tasks = [
        {
            "id": s["id"],
            "dentition": s["dentition"],
            "targets": s["targets"],
            "manifest": manifests[s["dentition"]],
            "checkpoint": checkpoint,
            "boundary_checkpoint": boundary_checkpoint,
            "use_predicted_bounds": bool(cfg["sample"]["use_predicted_bounds"]),
            "schedule": {
                "T": int(sch_cfg["T"]),
                "beta_min": float(sch_cfg["beta_min"]),
                "beta_max": float(sch_cfg["beta_max"]),
            },
            "seed": cfg["seed"],
            "out_dir": str(out_dir),
        }
        for s in scenarios
    ]
    results = _run_tasks(_sample_one, tasks, jobs)
    results.sort(key=lambda r: r["id"])
    _write_json(
        out_dir / "samples.json",
        {
            "scenarios": results,
            "run": {
                "seed": cfg["seed"],
                "T": int(sch_cfg["T"]),
                "beta_min": float(sch_cfg["beta_min"]),
                "beta_max": float(sch_cfg["beta_max"]),
                "bounds": "predicted" if boundary_checkpoint else "fitted",
            },
        },
    )
    _run_manifest(out_dir, "sample", cfg, {"scenarios": len(results)})
    print(f"sampled {len(results)} scenarios to {out_dir}")
    return 0


def _run_tasks(fn, tasks: list, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _evaluate_one(task: dict) -> dict:
    generated = read_dentition(task["generated_manifest"])
    truth = read_dentition(task["truth_manifest"])
    gen_clouds = {t.fdi: t.points for t in generated.teeth}
    missing_truth = [f for f in gen_clouds if f not in truth]
    if missing_truth:
        raise ValidationFailure(
            f"scenario {task['id']}: truth dentition lacks teeth {missing_truth}"
        )
    truth_clouds = {f: truth.get(f).points for f in gen_clouds}
    gen_normals = {
        t.fdi: t.normals for t in generated.teeth if t.normals is not None
    }
    truth_normals = {
        f: truth.get(f).normals
        for f in gen_clouds
        if truth.get(f).normals is not None
    }
    reports = evaluate_scenario(
        gen_clouds,
        truth_clouds,
        mode=task["mode"],
        scenario_id=task["id"],
        generated_normals=gen_normals,
        truth_normals=truth_normals,
    )
    rows = []
    for rep in reports:
        rows.extend(rep.rows())
    return {"id": task["id"], "n_targets": len(gen_clouds), "rows": rows}


def cmd_evaluate(
    cfg: dict, truth: str, generated: str, out: str, force: bool, jobs: int
) -> int:
    out_dir = _prepare_out(out, force)
    index_path = Path(generated) / "samples.json"
    try:
        index = json.loads(index_path.read_text())
    except OSError as exc:
        raise ValidationFailure(f"cannot read sample index {index_path}: {exc}") from exc
    truth_entries = dict(
        (name, str(Path(truth) / f"{name}/manifest.json"))
        for name, _ in _load_dataset(truth)
    )
    tasks = []
    for s in index["scenarios"]:
        if s["dentition"] not in truth_entries:
            raise ValidationFailure(
                f"scenario {s['id']}: dentition {s['dentition']} not in truth dataset"
            )
        tasks.append(
            {
                "id": s["id"],
                "generated_manifest": str(Path(generated) / s["manifest"]),
                "truth_manifest": truth_entries[s["dentition"]],
                "mode": cfg["evaluate"]["mode"],
            }
        )
    results = _run_tasks(_evaluate_one, tasks, jobs)
    results.sort(key=lambda r: r["id"])

    rows = []
    for res in results:
        rows.extend(res["rows"])
    _write_csv(out_dir / "metrics.csv", ["scenario", "tooth", "metric", "value"], rows)

    # Summary: mean per metric, stratified by number of missing teeth.
    by_missing: dict = {}
    for res in results:
        pooled = [r for r in res["rows"] if r[1] == "ALL"]
        strata = by_missing.setdefault(res["n_targets"], {})
        for _, _, metric, value in pooled:
            strata.setdefault(metric, []).append(value)
    summary = {
        "per_missing_count": {
            str(k): {m: float(np.mean(v)) for m, v in sorted(ms.items())}
            for k, ms in sorted(by_missing.items())
        },
        "n_scenarios": len(results),
    }
    _write_json(out_dir / "metrics_summary.json", summary)
    _run_manifest(out_dir, "evaluate", cfg, {"scenarios": len(results)})
    print(f"evaluated {len(results)} scenarios to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Reader-study statistics
# ---------------------------------------------------------------------------

def _flatten_stats(doc: dict) -> list:
    rows = []

    def endpoint_rows(level: str, group: str, block: dict):
        rows.append((level, group, "mean_difference", block["mean_difference"]))
        rows.append((level, group, "bootstrap_lo", block["bootstrap_ci"][0]))
        rows.append((level, group, "bootstrap_hi", block["bootstrap_ci"][1]))
        rows.append((level, group, "t_lo", block["t_ci"][0]))
        rows.append((level, group, "t_hi", block["t_ci"][1]))
        rows.append((level, group, "ni_decision", block["ni_decision"]))
        p = block["paired_t"]["pvalue"]
        rows.append((level, group, "t_pvalue", "degenerate" if p is None else p))

    for crit, block in doc["criteria"].items():
        endpoint_rows("criterion", crit, block)
    endpoint_rows("composite", "composite", doc["composite"])
    for level_name, groups in doc["agreement"].items():
        if level_name == "overall":
            groups = {"overall": groups}
        for group, block in groups.items():
            for metric in ("gwet_ac2", "brennan_prediger", "kendall_w", "opa_percent"):
                value = block[metric]
                rows.append(
                    (f"agreement_{level_name}", group, metric,
                     "degenerate" if value is None else value)
                )
    return rows


def cmd_stats(cfg: dict, scores: str, out: str, force: bool) -> int:
    out_dir = _prepare_out(out, force)
    table = ScoreTable.from_csv(scores)
    st = cfg["stats"]
    workflows = tuple(st["workflows"])
    for wf in workflows:
        if wf not in table.workflows:
            raise ValidationFailure(
                f"workflow {wf!r} not in score table (has {table.workflows})"
            )
    summary = summarize_reader_study(
        table,
        workflows=workflows,
        config=NiConfig(
            margin=float(st["ni_margin"]),
            level=float(st["level"]),
            bootstrap_iters=int(st["bootstrap_iters"]),
        ),
        seed=cfg["seed"],
    )
    _write_json(out_dir / "stats.json", summary)
    _write_csv(out_dir / "stats.csv", ["level", "group", "metric", "value"],
               _flatten_stats(summary))
    _run_manifest(out_dir, "stats", cfg, {"cases": summary["n_cases"]})
    print(
        f"composite: mean diff {summary['composite']['mean_difference']:+.4f}, "
        f"NI {summary['composite']['ni_decision']}"
    )
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowndiff", description="Crown-generation pipeline commands"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="JSON config file (defaults used if omitted)")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--set", action="append", dest="overrides", metavar="KEY=VALUE",
                       help="override a config entry (dot-separated path)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--force", action="store_true", help="overwrite existing output")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="synthesize a dentition dataset")
    common(p)

    p = sub.add_parser("train-boundary", help="train the bound regressor")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("train-denoiser", help="train the noise predictor")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--init", help="checkpoint to fine-tune from (stage 2)")

    p = sub.add_parser("bootstrap-pseudo", help="fill gaps with generated teeth")
    common(p)
    p.add_argument("--data", required=True, help="edentulous dataset directory")
    p.add_argument("--checkpoint", required=True, help="stage-1 denoiser checkpoint")
    p.add_argument("--boundary-checkpoint", help="bound regressor checkpoint")

    p = sub.add_parser("sample", help="generate crowns for test scenarios")
    common(p)
    p.add_argument("--data", required=True, help="fully dentate test dataset")
    p.add_argument("--checkpoint", required=True, help="denoiser checkpoint")
    p.add_argument("--boundary-checkpoint", help="bound regressor checkpoint")

    p = sub.add_parser("evaluate", help="score generated crowns")
    common(p)
    p.add_argument("--truth", required=True, help="ground-truth dataset directory")
    p.add_argument("--generated", required=True, help="sample output directory")

    p = sub.add_parser("stats", help="reader-study statistics")
    common(p)
    p.add_argument("--scores", required=True, help="score table CSV")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        if args.command == "synth":
            return cmd_synth(cfg, args.out, args.force)
        if args.command == "train-boundary":
            return cmd_train_boundary(cfg, args.data, args.out, args.force)
        if args.command == "train-denoiser":
            return cmd_train_denoiser(cfg, args.data, args.out, args.force, args.init)
        if args.command == "bootstrap-pseudo":
            return cmd_bootstrap_pseudo(
                cfg, args.data, args.checkpoint, args.out, args.force,
                args.boundary_checkpoint,
            )
        if args.command == "sample":
            return cmd_sample(
                cfg, args.data, args.checkpoint, args.out, args.force, args.jobs,
                args.boundary_checkpoint,
            )
        if args.command == "evaluate":
            return cmd_evaluate(
                cfg, args.truth, args.generated, args.out, args.force, args.jobs
            )
        if args.command == "stats":
            return cmd_stats(cfg, args.scores, args.out, args.force)
        raise ValidationFailure(f"unknown command {args.command!r}")
    except (ValidationFailure, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
