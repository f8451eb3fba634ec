"""Command-line entry point: ``qlife <command> [options]``.

Every command resolves a :class:`~qlife.config.RunConfig` (bundled desk
defaults, then ``--config``, then flags), writes ``report.json`` plus any
artifacts into ``<out>/<timestamp>-<command>/`` and prints a one-line JSON
status to stdout. Failures print a JSON error to stderr and exit with a
code that identifies the kind of failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (ConfigError, RunConfig, backbone_config, dann_config, default_config_path, dump_config,
                     hypothesis_config, load_config, stage_schedule, synthetic_spec, train_config)
from .data import (CLASSES, Dataset, DatasetError, DataSplit, assert_no_leakage, class_index,
                   generate, ingest, split, write_dataset)
from .model import QualityModel, embed, evaluate, train_baseline
from .novelty import (CalibratedThresholds, DegenerateLdaError, LdaModel, calibrate_vote_threshold,
                      detection_rates, fit_lda, projection_histogram, test_batch)

log = logging.getLogger("qlife")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_DATA = 5
EXIT_NUMERIC = 6

COMMANDS = ("gen-data", "train-baseline", "calibrate", "detect", "incremental", "adapt", "eval")


class UsageError(ValueError):
    pass


# -- plumbing ----------------------------------------------------------------

def _make_run_dir(out: str, command: str) -> Path:
    root = Path(out)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = root / f"{stamp}-{command}"
    n = 1
    while run.exists():
        n += 1
        run = root / f"{stamp}-{command}-{n}"
    (run / "artifacts").mkdir(parents=True)
    return run


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def _resolve_new_class(args, cfg: RunConfig) -> str:
    picks = {CLASSES[class_index(v)] for v in (getattr(args, "new_class", None), getattr(args, "scenario", None)) if v}
    if len(picks) > 1:
        raise ConfigError(f"--new-class and --scenario disagree: {sorted(picks)}")
    return picks.pop() if picks else cfg.new_class


def _config_from_args(args) -> RunConfig:
    overrides = {"seed": args.seed}
    if getattr(args, "alpha", None) is not None:
        overrides["detection.alpha"] = args.alpha
    if getattr(args, "shots", None) is not None:
        key = "dann.shots" if args.command == "adapt" else "incremental.shots"
        overrides[key] = args.shots
    path = args.config if args.config else default_config_path()
    cfg = load_config(path, overrides)
    new = _resolve_new_class(args, cfg)
    if new != cfg.new_class:
        cfg.new_class = new
    return cfg


def _load_data(cfg: RunConfig, data_path: str | None) -> tuple[Dataset, DataSplit]:
    if data_path:
        ds, sp = ingest(data_path)
        if sp is None:
            sp = split(ds, cfg.data.split, seed=cfg.seed)
        return ds, sp
    ds = generate(synthetic_spec(cfg))
    return ds, split(ds, cfg.data.split, seed=cfg.seed)


def _require_checkpoint(args) -> tuple[QualityModel, dict]:
    if not args.checkpoint:
        raise UsageError(f"{args.command} needs --checkpoint")
    return load_checkpoint(args.checkpoint)


def _parts(ds: Dataset, sp: DataSplit, domain: str, classes=None):
    tr, va, te = ds.subset(sp.train), ds.subset(sp.val), ds.subset(sp.test)
    return tuple(p.subset(p.where(domain, classes)) for p in (tr, va, te))


def _history_summary(history: list[dict]) -> list[dict]:
    return [{k: (round(v, 6) if isinstance(v, float) else v) for k, v in h.items()} for h in history]


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig, run: Path) -> dict:
    ds, sp = _load_data(cfg, args.data)
    root = write_dataset(ds, run / "artifacts" / "dataset", sp)
    counts = {f"{d}/{c}": n for (d, c), n in sorted(ds.counts().items())}
    return {"metrics": {"counts": counts, "n": len(ds), "split_sizes": {k: len(v) for k, v in
                                                                        (("train", sp.train), ("val", sp.val),
                                                                         ("test", sp.test))}},
            "artifacts": [str(root.relative_to(run))]}


def cmd_train_baseline(args, cfg: RunConfig, run: Path) -> dict:
    ds, sp = _load_data(cfg, args.data)
    known = [c for c in CLASSES if c != cfg.new_class]
    tr, _, te = _parts(ds, sp, "source", known)
    model = QualityModel(backbone_config(cfg, 2), known, seed=cfg.seed)
    model, history = train_baseline(model, tr, train_config(cfg))
    metrics = evaluate(model, te)
    ckpt = save_checkpoint(model, run / "model.qlc", {
        "command": "train-baseline", "seed": cfg.seed, "epochs": cfg.train.epochs, "new_class": cfg.new_class,
        "losses": [h["loss"] for h in history]})
    return {"metrics": {"test": metrics, "known_classes": known, "history": _history_summary(history)},
            "artifacts": [str(ckpt.relative_to(run))]}


def _embed_by_class(model: QualityModel, part: Dataset, classes) -> dict[str, np.ndarray]:
    out = {}
    for c in classes:
        idx = part.where(classes=[c])
        if len(idx):
            out[c] = embed(model, part.x[idx])
    return out


def cmd_calibrate(args, cfg: RunConfig, run: Path) -> dict:
    model, meta = _require_checkpoint(args)
    if model.num_classes != 2:
        raise UsageError("calibrate expects a 2-class baseline checkpoint")
    ds, sp = _load_data(cfg, args.data)
    known = list(model.label_map)
    tr, va, te = _parts(ds, sp, "source")
    train_feats = _embed_by_class(model, tr, known)
    if len(train_feats) != 2:
        raise DatasetError(f"training split lacks one of the known classes {known}")
    val_feats = _embed_by_class(model, va, known)
    calib_feats = val_feats if len(val_feats) == 2 else train_feats
    d = cfg.detection
    lda = fit_lda(train_feats[known[0]], train_feats[known[1]], ridge=d.ridge)
    th = calibrate_vote_threshold(lda, [calib_feats[c] for c in known], hypothesis_config(cfg), seed=cfg.seed)
    test_feats = _embed_by_class(model, te, CLASSES)
    rates = detection_rates(lda, th, test_feats, trials=d.eval_trials, seed=cfg.seed)

    art = run / "artifacts"
    calib = _write_json(art / "calibration.json", {"known_classes": known, "lda": lda.to_dict(),
                                                    "thresholds": th.to_dict()})
    curve_rows = [{"t": t, "misid_rate": r,
                   **{f"misid_{known[int(k)]}": th.per_class_curves[k][t] for k in th.per_class_curves}}
                  for t, r in enumerate(th.misid_curve)]
    curve = _write_csv(art / "calibration_curve.csv", curve_rows,
                       ["t", "misid_rate"] + [f"misid_{c}" for c in known])
    hist = _write_csv(art / "projection_histogram.csv",
                      projection_histogram(lda, {f"{c} ({'known' if c in known else 'new'})": f
                                                 for c, f in test_feats.items()}),
                      ["bin_center", "count", "class"])
    rng = np.random.default_rng(cfg.seed)
    batches = []
    (art / "batches").mkdir()
    for c, f in test_feats.items():
        if len(f) >= d.batch_size:
            pick = f[rng.choice(len(f), d.batch_size, replace=False)]
            p = art / "batches" / f"{c}.npy"
            np.save(p, pick)
            batches.append(str(p.relative_to(run)))
    monotone = bool(np.all(np.diff(th.misid_curve) <= 0))
    metrics = {"known_classes": known, "new_class": meta.get("new_class"), "t_sample": th.t_sample,
               "t_vote": th.t_vote, "flagged_uncontrolled": th.flagged, "lda_degenerate": lda.degenerate,
               "curve_monotone": monotone, "detection_rates": rates,
               "calibration_source": "val" if calib_feats is val_feats else "train"}
    return {"metrics": metrics, "artifacts": [str(p.relative_to(run)) for p in (calib, curve, hist)] + batches}


def _load_batch(path: Path) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"batch file {path} does not exist")
    if path.suffix == ".npy":
        return np.load(path, allow_pickle=False)
    if path.suffix == ".csv":
        rows = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
        return rows
    raise DatasetError(f"unsupported batch file {path} (use .npy or .csv)")


def cmd_detect(args, cfg: RunConfig, run: Path) -> dict:
    if not args.calibration or not args.batch:
        raise UsageError("detect needs --calibration and --batch")
    cal_path = Path(args.calibration)
    try:
        cal = json.loads(cal_path.read_text())
        lda = LdaModel.from_dict(cal["lda"])
        th = CalibratedThresholds.from_dict(cal["thresholds"])
    except FileNotFoundError:
        raise UsageError(f"calibration file {cal_path} does not exist") from None
    except (KeyError, json.JSONDecodeError) as exc:
        raise DatasetError(f"calibration file {cal_path} is malformed: {exc}") from None
    batch = _load_batch(Path(args.batch))
    if batch.ndim > 2:
        model, _ = _require_checkpoint(args)
        batch = embed(model, batch.astype(np.float32))
    decision = test_batch(lda, th, batch)
    return {"metrics": decision.to_dict(), "artifacts": []}


def cmd_incremental(args, cfg: RunConfig, run: Path) -> dict:
    from .incremental import run_scenario, write_sweep_csv

    model, meta = _require_checkpoint(args)
    if model.num_classes != 2:
        raise UsageError("incremental expects a 2-class baseline checkpoint")
    missing = [c for c in CLASSES if c not in model.label_map]
    explicit = args.new_class or args.scenario
    if explicit and CLASSES[class_index(explicit)] != missing[0]:
        raise ConfigError(f"checkpoint was trained without {missing[0]!r}, not {explicit!r}")
    new_class = missing[0]
    ds, sp = _load_data(cfg, args.data)
    tr, _, te = _parts(ds, sp, "source")
    assert_no_leakage(sp.train, sp.test)
    inc = cfg.incremental
    schedule = stage_schedule(cfg)
    train = train_config(cfg)
    opts = dict(schedule=schedule, train=train, zero_init_head=inc.zero_init_head,
                replay_total=inc.replay_reading == "total", baseline_k_shots=inc.baseline == "k-shots")
    res = run_scenario(model, tr, te, new_class, inc.shots, seed=cfg.seed, with_baseline=args.baseline, **opts)
    artifacts = []
    if args.sweep:
        rows = []
        for k in inc.sweep_shots:
            for s in range(inc.sweep_seeds):
                r = run_scenario(model, tr, te, new_class, k, seed=cfg.seed + s, with_baseline=True, **opts)
                rows.append({k_: r[k_] for k_ in ("scenario", "K", "seed", "accuracy", "baseline_accuracy")})
        artifacts.append(str(write_sweep_csv(rows, run / "artifacts" / "shots.csv").relative_to(run)))
    rs = res["rehearsal"]
    ckpt = save_checkpoint(res["model"], run / "model.qlc", {"command": "incremental", "seed": cfg.seed, "K": inc.shots,
                                                   "new_class": new_class, "parent": meta})
    cm_rows = [{"true": t, **{p: res["metrics"]["confusion_matrix"][i][j] for j, p in enumerate(res["metrics"]["labels"])}}
               for i, t in enumerate(res["metrics"]["labels"])]
    cm = _write_csv(run / "artifacts" / "confusion_matrix.csv", cm_rows, ["true"] + res["metrics"]["labels"])
    metrics = {k: res[k] for k in ("scenario", "K", "seed", "accuracy", "old_recall_before", "old_recall_after")}
    metrics["test"] = res["metrics"]
    metrics["rehearsal_ids"] = sorted(rs.dataset.ids)
    if "baseline_accuracy" in res:
        metrics["baseline_accuracy"] = res["baseline_accuracy"]
    return {"metrics": metrics, "artifacts": [str(ckpt.relative_to(run)), str(cm.relative_to(run))] + artifacts}


def cmd_adapt(args, cfg: RunConfig, run: Path) -> dict:
    from .dann import (adapt, baselines, class_probe, domain_probe, few_shot_target, summarize, train_source_model,
                       write_comparison_csv, write_pca_csv)

    ds, sp = _load_data(cfg, args.data)
    src_tr, _, src_te = _parts(ds, sp, "source")
    tgt_tr, _, tgt_te = _parts(ds, sp, "target")
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        if model.num_classes != 3:
            raise UsageError("adapt expects a 3-class checkpoint")
    else:
        model = train_source_model(src_tr, backbone_config(cfg, 3), train_config(cfg, epochs=cfg.dann.source_epochs),
                                   seed=cfg.seed)
    k = cfg.dann.shots
    shots = few_shot_target(tgt_tr, k, seed=cfg.seed)
    assert_no_leakage(sp.train, sp.test)
    rest = tgt_tr.subset(np.setdiff1d(np.arange(len(tgt_tr)), shots.indices))
    src_x, tgt_x = ds.x[ds.where("source")], ds.x[ds.where("target")]
    pre = {"source": evaluate(model, src_te), "target": evaluate(model, tgt_te),
           "domain_probe": domain_probe(model, src_x, tgt_x, seed=cfg.seed)}
    dm, history = adapt(model, src_tr, shots, rest, dann_config(cfg, cfg.seed))
    adapted = dm.model
    post = {"source": evaluate(adapted, src_te), "target": evaluate(adapted, tgt_te),
            "domain_probe": domain_probe(adapted, src_x, tgt_x, seed=cfg.seed),
            "class_probe": class_probe(adapted, src_te.x, src_te.y, seed=cfg.seed)}
    art = run / "artifacts"
    both_te = Dataset.concat([src_te, tgt_te])
    paths = [write_pca_csv(model, both_te, art / "pca_before.csv"), write_pca_csv(adapted, both_te, art / "pca_after.csv")]
    ckpt = save_checkpoint(adapted, run / "model.qlc", {"command": "adapt", "seed": cfg.seed, "K": k,
                                                        "losses": [h["L_total"] for h in history]})
    paths.append(ckpt)
    if args.baselines:
        rows = []
        for kk in range(1, k + 1):
            for s in range(cfg.incremental.sweep_seeds):
                seed = cfg.seed + s
                fs = few_shot_target(tgt_tr, kk, seed=seed)
                rem = tgt_tr.subset(np.setdiff1d(np.arange(len(tgt_tr)), fs.indices))
                cands = baselines(model, fs, train_config(cfg, seed=seed), seed=seed)
                cands["dann"] = adapt(model, src_tr, fs, rem, dann_config(cfg, seed))[0].model
                for name, mdl in cands.items():
                    for dom, part in (("source", src_te), ("target", tgt_te)):
                        rows.append({"shots": kk, "domain": dom, "method": name,
                                     "accuracy": evaluate(mdl, part)["accuracy"]})
        paths.append(write_comparison_csv(summarize(rows), art / "comparison.csv"))
    metrics = {"K": k, "pre": pre, "post": post, "history": _history_summary(history),
               "shot_ids": sorted(shots.dataset.ids)}
    return {"metrics": metrics, "artifacts": [str(p.relative_to(run)) for p in paths]}


def cmd_eval(args, cfg: RunConfig, run: Path) -> dict:
    model, meta = _require_checkpoint(args)
    ds, sp = _load_data(cfg, args.data)
    te = ds.subset(sp.test)
    domains = ["source", "target"] if args.domain == "all" else [args.domain]
    out = {}
    for dom in domains:
        part = te.subset(te.where(dom, model.label_map))
        if len(part):
            out[dom] = evaluate(model, part)
    if not out:
        raise DatasetError("no test samples for the model's classes in the requested domain")
    rows = []
    for dom, m in out.items():
        for i, t in enumerate(m["labels"]):
            rows.append({"domain": dom, "true": t, **{p: m["confusion_matrix"][i][j] for j, p in enumerate(m["labels"])}})
    cm = _write_csv(run / "artifacts" / "confusion_matrix.csv", rows, ["domain", "true"] + list(model.label_map))
    return {"metrics": {"domains": out, "label_map": model.label_map, "checkpoint_metadata": meta},
            "artifacts": [str(cm.relative_to(run))]}


HANDLERS = {"gen-data": cmd_gen_data, "train-baseline": cmd_train_baseline, "calibrate": cmd_calibrate,
            "detect": cmd_detect, "incremental": cmd_incremental, "adapt": cmd_adapt, "eval": cmd_eval}


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qlife", description="Quality-model lifecycle toolkit")
    parser.add_argument("--version", action="version", version=f"qlife {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults to the bundled desk config)")
    common.add_argument("--seed", type=int, help="seed for data, splits and training")
    common.add_argument("--out", default="runs", help="root directory for run outputs (default: runs)")
    common.add_argument("--data", help="dataset directory (with manifest) or feature table; generated if omitted")
    common.add_argument("-v", "--verbose", action="store_true")
    helps = {"gen-data": "generate the synthetic two-domain dataset",
             "train-baseline": "train the 2-class baseline with one class held out",
             "calibrate": "fit the discriminant and calibrate detection thresholds",
             "detect": "test one batch of embeddings (or images) for a new class",
             "incremental": "add the held-out class with two-stage rehearsal fine-tuning",
             "adapt": "few-shot domain-adversarial adaptation to the target domain",
             "eval": "evaluate a checkpoint on the test split"}
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name in ("train-baseline", "calibrate", "incremental"):
            p.add_argument("--new-class", help="class held out as new")
            p.add_argument("--scenario", help="rotation name; same as --new-class")
        if name in ("calibrate", "detect", "incremental", "adapt", "eval"):
            p.add_argument("--checkpoint", help="model checkpoint (.qlc)")
        if name in ("calibrate", "detect"):
            p.add_argument("--alpha", type=float, help="significance level for the vote threshold")
        if name in ("incremental", "adapt"):
            p.add_argument("--shots", type=int, help="K, shots per class")
        if name == "detect":
            p.add_argument("--calibration", help="calibration.json written by calibrate")
            p.add_argument("--batch", help=".npy or .csv batch of N embeddings (or .npy images with --checkpoint)")
        if name == "incremental":
            p.add_argument("--baseline", action="store_true", help="also train the single-stage baseline")
            p.add_argument("--sweep", action="store_true", help="write the accuracy-vs-shots table")
        if name == "adapt":
            p.add_argument("--baselines", action="store_true", help="write the method comparison table")
        if name == "eval":
            p.add_argument("--domain", choices=["source", "target", "all"], default="all")
    return parser


def _error_payload(exc: BaseException, code: int) -> dict:
    return {"status": "error", "exit_code": code,
            "error": {"type": type(exc).__name__, "message": str(exc), "problems": getattr(exc, "problems", [])}}


def _classify(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, UsageError)):
        return EXIT_CONFIG
    if isinstance(exc, CheckpointError):
        return EXIT_CHECKPOINT
    if isinstance(exc, (DatasetError, DegenerateLdaError)):
        return EXIT_DATA
    if isinstance(exc, FloatingPointError):
        return EXIT_NUMERIC
    return EXIT_FAILURE


def run(argv=None) -> tuple[int, Path | None]:
    """Run one command. Returns ``(exit_code, run_dir)``."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    run_dir = None
    try:
        cfg = _config_from_args(args)
        run_dir = _make_run_dir(args.out, args.command)
        result = HANDLERS[args.command](args, cfg, run_dir)
        report = {"command": args.command, "status": "ok", "version": __version__, "seed": cfg.seed,
                  "config": dump_config(cfg), "metrics": result["metrics"], "artifacts": result["artifacts"]}
        _write_json(run_dir / "report.json", report)
        print(json.dumps({"status": "ok", "command": args.command, "run_dir": str(run_dir)}))
        return EXIT_OK, run_dir
    except Exception as exc:  # every failure becomes a JSON error and an exit code
        code = _classify(exc)
        payload = _error_payload(exc, code)
        log.debug("command failed", exc_info=True)
        if run_dir is not None:
            _write_json(run_dir / "error.json", payload)
        print(json.dumps(payload), file=sys.stderr)
        return code, run_dir


def main(argv=None) -> int:
    return run(argv)[0]


if __name__ == "__main__":
    sys.exit(main())
