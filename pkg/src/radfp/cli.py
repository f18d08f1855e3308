"""Batch pipeline commands: gen, train-persona, reconstruct, extract, train, eval, explain.

Every command is driven by one JSON config (``--config``, ``--set k=v``
overrides, ``--seed`` for the master seed) and is deterministic: re-running
with the same config produces byte-identical artifacts.  Exit codes: 0 ok,
1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import diffusion, fingerprint, metrics
from .config import ConfigError, config_snapshot, load_config
from .dataset import (VIEWS, SubjectRecord, load_dataset, persona_path,
                      view_path, write_labels, write_subject)
from .features import (assemble_features, feature_vector_length,
                       read_features_csv, write_features_csv)
from .metrics import ScoredLabels, aggregate_runs, confusion_at, roc_auc, save_eval_report
from .phantom import PhantomConfig, gen_cohort
from .volume import central_mask, read_volume, write_volume, Volume


def _write_json(path: Path, blob: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(blob, sort_keys=True, indent=1) + "\n")


def _paths(cfg: dict, out_dir: Path) -> dict[str, Path]:
    return {key: out_dir / cfg["paths"][key] for key in ("data_dir", "model_dir", "report_dir")}


def _phantom_config(cfg: dict) -> PhantomConfig:
    ph = cfg["phantom"]
    return PhantomConfig(
        dims=tuple(cfg["dims"]), grid_n=cfg["grid_n"],
        acl_prob=ph["acl_prob"], men_prob=ph["men_prob"],
        base_range=tuple(ph["base_range"]), noise_sigma=ph["noise_sigma"],
        acl_amplitude=ph["acl_amplitude"], men_amplitude=ph["men_amplitude"])


def split_records(records: list[SubjectRecord], val_fraction: float):
    """Deterministic split: leading subjects train, trailing subjects validate."""
    n_val = int(round(len(records) * val_fraction))
    n_train = len(records) - n_val
    return records[:n_train], records[n_train:]


def cmd_gen(cfg: dict, out_dir: Path) -> None:
    paths = _paths(cfg, out_dir)
    data_dir = paths["data_dir"]
    pcfg = _phantom_config(cfg)
    seed = cfg["training"]["seed"]
    records = gen_cohort(seed, cfg["phantom"]["subjects"], pcfg)
    labels = {}
    for record in records:
        write_subject(data_dir, record)
        labels[record.subject_id] = record.labels
    write_labels(data_dir, labels)
    counts = {task: sum(r.labels[task] for r in records) for task in ("abn", "acl", "men")}
    _write_json(data_dir / "manifest.json", {
        "command": "gen", "seed": seed, "subjects": len(records),
        "label_counts": counts, "config": config_snapshot(cfg),
    })
    print(f"gen: wrote {len(records)} subjects to {data_dir} (labels: {counts})")


def _persona_train_records(cfg: dict, records: list[SubjectRecord]) -> list[SubjectRecord]:
    train, _ = split_records(records, cfg["phantom"]["val_fraction"])
    if cfg["diffusion"]["persona_split"] == "healthy-train":
        return [r for r in train if r.healthy]
    return train


def _diffusion_train_config(cfg: dict) -> diffusion.DiffusionTrainConfig:
    d = cfg["diffusion"]
    return diffusion.DiffusionTrainConfig(
        timesteps=d["timesteps"], beta_start=d["beta_start"], beta_end=d["beta_end"],
        steps=d["steps"], lr=d["lr"], momentum=d["momentum"], batch_size=d["batch_size"],
        mask_fractions=tuple(cfg["mask_fractions"]), widths=tuple(d["widths"]),
        embed_dim=d["embed_dim"], out_kernel=d["out_kernel"], val_volumes=d["val_volumes"],
        val_every=d["val_every"], seed=cfg["training"]["seed"], dtype=d["train_dtype"])


def cmd_train_persona(cfg: dict, out_dir: Path) -> None:
    paths = _paths(cfg, out_dir)
    records = load_dataset(paths["data_dir"])
    train = _persona_train_records(cfg, records)
    if not train:
        raise ValueError("persona training set is empty")
    model = diffusion.train_persona(train, _diffusion_train_config(cfg))
    model_path = paths["model_dir"] / "persona.json"
    diffusion.save_diffusion_model(model, model_path)
    _write_json(paths["model_dir"] / "persona.meta.json", {
        "command": "train-persona", "subjects": len(train),
        "final_val_loss": model.history[-1][1], "config": config_snapshot(cfg),
    })
    print(f"train-persona: {len(train)} healthy subjects, "
          f"val loss {model.history[0][1]:.4f} -> {model.history[-1][1]:.4f}, saved {model_path}")


def cmd_reconstruct(cfg: dict, out_dir: Path) -> None:
    paths = _paths(cfg, out_dir)
    model = diffusion.load_diffusion_model(paths["model_dir"] / "persona.json")
    records = load_dataset(paths["data_dir"])
    mask = central_mask(tuple(cfg["dims"]), tuple(cfg["mask_fractions"]))
    dtype = np.float32 if cfg["diffusion"]["sample_dtype"] == "float32" else np.float64
    jobs = [(r.subject_id, view) for r in records for view in VIEWS]
    stack = np.stack([r.views[view].data for r in records for view in VIEWS])
    out = diffusion.reconstruct_many(
        model, stack, mask, cfg["training"]["seed"],
        chunk=cfg["diffusion"]["reconstruct_chunk"], dtype=dtype,
        processes=cfg["diffusion"]["reconstruct_processes"])
    outside = ~mask.to_array(tuple(cfg["dims"]))
    for row, (sid, view) in enumerate(jobs):
        persona = Volume(out[row].astype(np.float64))
        if not np.array_equal(persona.data[outside].astype(np.float32),
                              stack[row][outside].astype(np.float32)):
            raise ValueError(f"context not preserved for {sid}/{view}")
        write_volume(persona, persona_path(paths["data_dir"], sid, view))
    _write_json(paths["data_dir"] / "reconstruct.meta.json", {
        "command": "reconstruct", "volumes": len(jobs), "config": config_snapshot(cfg),
    })
    print(f"reconstruct: wrote {len(jobs)} persona volumes under {paths['data_dir']}")


def _load_features(cfg: dict, paths: dict) -> list[tuple[str, object]]:
    return read_features_csv(paths["data_dir"] / "features.csv", cfg["grid_n"], cfg["mode"])


def _extract_one(args):
    record, grid_n, mode = args
    personas = None
    if mode != "path_only":
        personas = {view: record.views[f"{view}.persona"] for view in VIEWS}
    views = {view: record.views[view] for view in VIEWS}
    return record.subject_id, assemble_features(views, personas, grid_n, mode)


def extract_all(records, grid_n: int, mode: str, processes: int = 1):
    """Per-subject feature extraction, optionally across processes (order preserved)."""
    jobs = [(r, grid_n, mode) for r in records]
    if processes <= 1 or len(jobs) < 4:
        return [_extract_one(job) for job in jobs]
    import multiprocessing as mp

    with mp.get_context("fork").Pool(processes) as pool:
        return pool.map(_extract_one, jobs, chunksize=8)


def cmd_extract(cfg: dict, out_dir: Path) -> None:
    paths = _paths(cfg, out_dir)
    with_personas = cfg["mode"] != "path_only"
    records = load_dataset(paths["data_dir"], with_personas=with_personas)
    rows = extract_all(records, cfg["grid_n"], cfg["mode"], cfg["extract_processes"])
    csv_path = paths["data_dir"] / "features.csv"
    write_features_csv(csv_path, rows)
    n = feature_vector_length(cfg["grid_n"], cfg["mode"])
    _write_json(paths["data_dir"] / "features.meta.json", {
        "command": "extract", "subjects": len(rows), "features_per_subject": n,
        "rows": len(rows) * n, "config": config_snapshot(cfg),
    })
    print(f"extract: {len(rows)} subjects x {n} features -> {csv_path}")


def _fingerprint_train_config(cfg: dict, task: str, seed: int) -> fingerprint.FingerprintTrainConfig:
    tr = cfg["training"]
    return fingerprint.FingerprintTrainConfig(
        task=task, mode=cfg["mode"], grid_n=cfg["grid_n"],
        usage_threshold=cfg["usage_threshold"], lambda_u=cfg["lambda_u"],
        lambda_beta=cfg["lambda_beta"], lr=tr["lr"], momentum=tr["momentum"],
        epochs=tr["epochs"], batch_size=tr["batch_size"], seed=seed,
        use_usage_predictor=cfg["use_usage_predictor"],
        use_intercept=tr["use_intercept"], usage_widths=tuple(tr["usage_widths"]),
        threshold_every=tr["threshold_every"])


def _task_data(cfg: dict, records, features_rows, task: str):
    features_by_subject = dict(features_rows)
    with_views = cfg["use_usage_predictor"]
    train_recs, val_recs = split_records(records, cfg["phantom"]["val_fraction"])
    train = fingerprint.build_fingerprint_data(train_recs, features_by_subject, task, with_views)
    val = fingerprint.build_fingerprint_data(val_recs, features_by_subject, task, with_views)
    return train, val


def cmd_train(cfg: dict, out_dir: Path) -> None:
    paths = _paths(cfg, out_dir)
    records = load_dataset(paths["data_dir"])
    rows = _load_features(cfg, paths)
    seed = cfg["training"]["seed"]
    for task in cfg["tasks"]:
        train, val = _task_data(cfg, records, rows, task)
        model = fingerprint.train_fingerprint(train, val, _fingerprint_train_config(cfg, task, seed))
        model_path = paths["model_dir"] / f"fingerprint_{task}.json"
        fingerprint.save_fingerprint_model(model, model_path)
        _write_json(paths["model_dir"] / f"fingerprint_{task}.meta.json", {
            "command": "train", "task": task,
            "decision_threshold": model.decision_threshold,
            "final_epoch_loss": model.history["epoch_loss"][-1],
            "val_auc": model.history["val_auc"], "config": config_snapshot(cfg),
        })
        print(f"train[{task}]: loss {model.history['epoch_loss'][-1]:.4f}, "
              f"val AUC {model.history['val_auc'][-1][1]:.3f}, t*={model.decision_threshold:.3f}, "
              f"saved {model_path}")


def run_task_metrics(cfg: dict, records, features_rows, task: str, seed: int) -> dict:
    """Train one model and score the validation split; returns acc/sen/spe/auc."""
    train, val = _task_data(cfg, records, features_rows, task)
    model = fingerprint.train_fingerprint(train, val, _fingerprint_train_config(cfg, task, seed))
    scores = fingerprint.predict_scores(model, val)
    sl = ScoredLabels(scores, val.labels)
    acc, sen, spe = confusion_at(sl, model.decision_threshold)
    return {"acc": acc, "sen": sen, "spe": spe, "auc": roc_auc(sl)}


def cmd_eval(cfg: dict, out_dir: Path) -> None:
    paths = _paths(cfg, out_dir)
    records = load_dataset(paths["data_dir"])
    rows = _load_features(cfg, paths)
    seed = cfg["training"]["seed"]
    runs = cfg["training"]["runs"]
    per_run = []
    for run in range(runs):
        run_metrics = {}
        for task in cfg["tasks"]:
            run_metrics[task] = run_task_metrics(cfg, records, rows, task, seed + run)
        per_run.append(run_metrics)
    report = aggregate_runs(per_run, config=config_snapshot(cfg))
    report_path = paths["report_dir"] / "eval_report.json"
    save_eval_report(report, report_path)
    for task in cfg["tasks"]:
        m, s = report.means[task], report.stds[task]
        print(f"eval[{task}]: " + "  ".join(
            f"{name} {m[name]:.3f}+/-{s[name]:.3f}" for name in metrics.METRIC_NAMES))
    print(f"eval: {runs} runs -> {report_path}")


def cmd_explain(cfg: dict, out_dir: Path, subject: str, tasks=None) -> None:
    paths = _paths(cfg, out_dir)
    with_personas = cfg["mode"] != "path_only"
    labels_needed = tasks or cfg["tasks"]
    record_views = {view: read_volume(view_path(paths["data_dir"], subject, view))
                    for view in VIEWS}
    personas = None
    if with_personas:
        personas = {view: read_volume(persona_path(paths["data_dir"], subject, view))
                    for view in VIEWS}
    fv = assemble_features(record_views, personas, cfg["grid_n"], cfg["mode"])
    for task in labels_needed:
        model = fingerprint.load_fingerprint_model(paths["model_dir"] / f"fingerprint_{task}.json")
        report = fingerprint.explain(model, record_views, fv)
        base = paths["report_dir"] / f"{subject}.{task}"
        fingerprint.write_report_csv(report, Path(f"{base}.features.csv"))
        summary = fingerprint.report_summary_jsonable(report)
        summary["config"] = config_snapshot(cfg)
        summary["subject_id"] = subject
        summary["task"] = task
        _write_json(Path(f"{base}.summary.json"), summary)
        print(f"explain[{task}]: p={report.probability:.3f} logit={report.logit:+.3f} "
              f"selected={report.selected_count} -> {base}.features.csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radfp",
        description="Radiomic fingerprint pipeline over synthetic volumetric phantoms.")
    parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override training.seed")
    parser.add_argument("--out", type=Path, default=Path("."), help="output root directory")
    parser.add_argument("--set", action="append", default=[], dest="overrides",
                        metavar="KEY=VALUE", help="dot-path config override, repeatable")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("gen", "generate the synthetic phantom dataset"),
        ("train-persona", "train the diffusion inpainting model on healthy subjects"),
        ("reconstruct", "write healthy persona volumes for every subject and view"),
        ("extract", "extract candidate radiomic features to CSV"),
        ("train", "train one fingerprint model per task"),
        ("eval", "repeated-seed training and evaluation report"),
    ):
        sub.add_parser(name, help=help_text)
    explain = sub.add_parser("explain", help="per-subject interpretability report")
    explain.add_argument("--subject", required=True, help="subject id, e.g. subj00412")
    explain.add_argument("--task", action="append", default=None,
                         help="task to explain (repeatable; default: all configured)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        out_dir = args.out
        if args.command == "gen":
            cmd_gen(cfg, out_dir)
        elif args.command == "train-persona":
            cmd_train_persona(cfg, out_dir)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg, out_dir)
        elif args.command == "extract":
            cmd_extract(cfg, out_dir)
        elif args.command == "train":
            cmd_train(cfg, out_dir)
        elif args.command == "eval":
            cmd_eval(cfg, out_dir)
        elif args.command == "explain":
            cmd_explain(cfg, out_dir, args.subject, args.task)
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigError(f"unknown command {args.command!r}")
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
