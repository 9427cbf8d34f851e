"""Command-line entry point: ``emobev <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import corpus, dsp, metrics
from .config import ConfigError, RunConfig, dump_config, load_config
from .models import CheckpointError, ReducedContextModel, conv_specs, load_checkpoint, save_checkpoint
from .nn import LayerSpec, receptive_field, receptive_field_table
from .pipelines import (
    FreezeViolation,
    TrainConfig,
    read_predictions,
    train_behavior_context,
    train_behavior_reduced,
    train_ec,
    train_er,
    write_predictions,
)
from .synth import SyntheticEmotionSpec, SyntheticRuleSpec, audit_histograms, synth_behavior_corpus, synth_emotion_corpus
from .tensor import NumericalError

log = logging.getLogger("emobev")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _config(args) -> RunConfig:
    overrides = {}
    for kv in args.set or []:
        if "=" not in kv:
            raise UsageError(f"--set expects KEY=VALUE, got {kv!r}")
        key, val = kv.split("=", 1)
        overrides[key.strip()] = val
    for key in ("seed", "epochs", "lr", "jobs", "manifest", "er_checkpoint", "ec_dir", "l",
                "n_avg_pools", "n", "rule_kind"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = str(val)
    return load_config(getattr(args, "config", None), overrides)


def _prepare_out(out: str, cfg: RunConfig | None, command: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (path / "config.resolved.txt").write_text(dump_config(cfg))
    # timestamps live only in this sidecar log
    with open(path / "run.log", "a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {command}\n")
    return path


def _train_config(cfg: RunConfig, batch_size: int | None = None) -> TrainConfig:
    return TrainConfig(lr=cfg.lr, epochs=cfg.epochs, batch_size=batch_size or cfg.batch_size,
                       seed=cfg.resolved_seed(), patience=cfg.patience, lr_power=cfg.lr_power,
                       lr_floor=cfg.lr_floor, jobs=cfg.jobs)


def _write_history(path: Path, history: list[dict]) -> None:
    keys = sorted({k for row in history for k in row}, key=lambda k: (k != "epoch", k))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys or ["epoch"])
        for row in history:
            w.writerow([row.get(k, "") for k in keys])


def _write_series(path: Path, xs, ys, header=("x", "y")) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for x, y in zip(xs, ys):
            fh.write(f"{x}\t{y}\n")


def _require(path: str, what: str) -> Path:
    if not path:
        raise DataError(f"missing prerequisite: {what} (set it in the config or on the command line)")
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing prerequisite: {what} not found at {p}")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _extract_one(rec: corpus.UtteranceRecord, out: Path):
    w = dsp.read_wav(rec.waveform_path)
    feats = dsp.extract_features(w)
    path = out / f"{rec.id}.ebft"
    corpus.write_features(path, feats)
    rec.feature_path = str(path)
    return rec


def cmd_extract_features(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out, cfg, "extract-features")
    manifest = args.manifest or cfg.manifest
    if not manifest:
        raise UsageError("extract-features needs --manifest")
    records = corpus.load_manifest(manifest, check_files=False)
    errors, done = [], []

    def job(rec):
        try:
            if rec.waveform_path is None:
                raise ValueError("record has no waveform_path")
            return _extract_one(rec, out), None
        except Exception as exc:  # noqa: BLE001 - every failure is reported, the run continues
            return None, (rec.id, rec.waveform_path, f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max(1, cfg.jobs)) as pool:
        for rec, err in pool.map(job, records):
            if err:
                errors.append(err)
            else:
                done.append(rec)
    corpus.write_manifest(out / "manifest.jsonl", done, kind="utterance")
    with open(out / "errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "path", "error"])
        w.writerows(errors)
    print(f"extracted {len(done)} of {len(records)} utterances; {len(errors)} errors")
    if errors and args.strict:
        return EXIT_DATA
    return EXIT_OK


def _rule_from(cfg: RunConfig) -> SyntheticRuleSpec:
    return SyntheticRuleSpec(rule_kind=cfg.rule_kind, first_emotion=cfg.first_emotion,
                             second_emotion=cfg.second_emotion, theta=cfg.theta,
                             noise_std=cfg.noise_std, event_rating=cfg.event_rating,
                             n_couples=cfg.n_couples)


def cmd_synth(args) -> int:
    cfg = _config(args)
    seed = cfg.resolved_seed()
    try:
        rule = _rule_from(cfg) if args.kind == "behavior" else None
    except ValueError as exc:
        raise UsageError(f"invalid rule spec: {exc}") from None
    out = _prepare_out(args.out, cfg, f"synth {args.kind}")
    feat_dir = out / "features"
    feat_dir.mkdir(exist_ok=True)
    if cfg.n == 0:
        log.warning("n = 0: writing an empty corpus")
    if args.kind == "emotion":
        utts = synth_emotion_corpus(SyntheticEmotionSpec(noise_std=cfg.noise_std), cfg.n, seed)
        for u in utts:
            u.feature_path = str(feat_dir / f"{u.id}.ebft")
            corpus.write_features(u.feature_path, u.features)
        corpus.write_manifest(out / "manifest.jsonl", utts, kind="utterance")
        print(f"wrote {len(utts)} utterances to {out}")
        return EXIT_OK
    sessions = synth_behavior_corpus(rule, cfg.n, seed)
    written: dict[int, str] = {}
    for s in sessions:
        for i, seg in enumerate(s.segments):
            # twin sessions share segment objects; write each once
            if id(seg) not in written:
                path = feat_dir / f"{s.id}_{i:03d}.ebft"
                corpus.write_features(path, seg.features)
                written[id(seg)] = str(path)
            seg.feature_path = written[id(seg)]
    corpus.write_manifest(out / "manifest.jsonl", sessions, kind="session")
    audit = audit_histograms(sessions, rule.behavior) if sessions else {}
    (out / "audit.json").write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n")
    if audit:
        print(f"wrote {len(sessions)} sessions; class histogram divergence {audit['max_divergence']:.4f}")
    return EXIT_OK


def _split_utterances(records):
    train = [r for r in records if r.split == "train"]
    valid = [r for r in records if r.split == "valid"]
    return train, valid


def _sessions_with_labels(cfg: RunConfig) -> list[corpus.SessionRecord]:
    sessions = corpus.load_manifest(_require(cfg.manifest, "session manifest"))
    if not sessions:
        raise DataError("session manifest is empty")
    if not isinstance(sessions[0], corpus.SessionRecord):
        raise DataError("behavior training needs a session manifest")
    if not any(any(s.mask) for s in sessions):
        sessions = corpus.apply_behavior_labels(sessions, cfg.n_extreme, cfg.per_gender)
    return sessions


def _load_er(cfg: RunConfig):
    model, _ = load_checkpoint(_require(cfg.er_checkpoint, "ER checkpoint (train er first)"), expect_kind="er")
    return model


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out, cfg, f"train {args.kind}")
    seed = cfg.resolved_seed()
    tcfg = _train_config(cfg)
    snapshot = {k: v for k, v in vars(tcfg).items()}

    if args.kind == "er":
        train, valid = _split_utterances(corpus.load_manifest(_require(cfg.manifest, "utterance manifest")))
        model, hist = train_er(train, valid, tcfg)
        save_checkpoint(model, out / "er.ckpt", seed=seed, train_config=snapshot, history=hist)
        _write_history(out / "history_er.csv", hist)
        _emit_history_plot(args, out, "er", hist)
        print(f"er: {len(hist)} epochs -> {out / 'er.ckpt'}")
        return EXIT_OK

    if args.kind == "ec":
        er = _load_er(cfg)
        train, valid = _split_utterances(corpus.load_manifest(_require(cfg.manifest, "utterance manifest")))
        emotions = range(len(corpus.EMOTIONS)) if cfg.emotion < 0 else [cfg.emotion]
        for k in emotions:
            kcfg = _train_config(cfg, cfg.ec_batch_sizes[k])
            model, hist = train_ec(er, k, train, valid, kcfg)
            save_checkpoint(model, out / f"ec_{k}.ckpt", seed=seed, train_config=vars(kcfg), history=hist)
            _write_history(out / f"history_ec_{k}.csv", hist)
            _emit_history_plot(args, out, f"ec_{k}", hist)
            print(f"ec[{corpus.EMOTIONS[k]}]: {len(hist)} epochs")
        return EXIT_OK

    sessions = _sessions_with_labels(cfg)
    folds = corpus.cv_split(sessions, cfg.k_couples_out, cfg.n_valid_couples, seed)
    if args.kind == "bbp-behavior":
        ec_dir = _require(cfg.ec_dir, "directory of emotion-classifier checkpoints (train ec first)")
        ecs = []
        for k in range(len(corpus.EMOTIONS)):
            path = ec_dir / f"ec_{k}.ckpt"
            if not path.exists():
                raise DataError(f"missing prerequisite: {path}")
            ecs.append(load_checkpoint(path, expect_kind="ec")[0])
        run = train_behavior_context("bbp", sessions, folds, tcfg, ec_models=ecs, keep_models=True)
    elif args.kind == "ebp-behavior":
        er = _load_er(cfg) if cfg.l > 0 or cfg.er_checkpoint else None
        run = train_behavior_context("ebp", sessions, folds, tcfg, l=cfg.l, er=er, keep_models=True)
    else:
        run = train_behavior_reduced(cfg.n_avg_pools, sessions, folds, tcfg, _load_er(cfg), keep_models=True)
    for idx, model in run.models.items():
        save_checkpoint(model, out / f"{run.kind}_fold{idx}.ckpt", seed=seed, train_config=snapshot,
                        history=run.histories[idx])
        _write_history(out / f"history_fold{idx}.csv", run.histories[idx])
        _emit_history_plot(args, out, f"fold{idx}", run.histories[idx])
    meta = {"run": run.kind, **run.info, "folds": len(folds), "seed": seed}
    write_predictions(out / "predictions.csv", run.predictions, meta)
    report = metrics.aggregate_folds(run.predictions)
    (out / "report.json").write_text(json.dumps({**meta, **report}, indent=2, sort_keys=True) + "\n")
    _print_table({run.kind: report})
    return EXIT_OK


def _emit_history_plot(args, out: Path, name: str, hist: list[dict]) -> None:
    if getattr(args, "plot_data", False) and hist:
        _write_series(out / f"plot_{name}_loss.tsv", [h["epoch"] for h in hist],
                      [h["valid_loss"] for h in hist], ("epoch", "valid_loss"))


def _print_table(reports: dict[str, dict]) -> None:
    names = list(corpus.BEHAVIORS)
    print("run".ljust(16) + "".join(n[:10].rjust(11) for n in names) + "average".rjust(11))
    for run, rep in reports.items():
        cells = [rep["accuracy"][n] for n in names] + [rep["average"]]
        print(run[:16].ljust(16) + "".join(("-" if v is None else f"{v:.2f}").rjust(11) for v in cells))


def cmd_eval(args) -> int:
    runs = {}
    for item in args.pred:
        name, _, path = item.rpartition("=")
        if not name:
            name = Path(path).parent.name or Path(path).stem
            if name in runs:
                name = path
        if name in runs:
            raise UsageError(f"run name {name!r} given twice")
        if not Path(path).exists():
            raise DataError(f"prediction file not found: {path}")
        runs[name] = read_predictions(path)
    out = _prepare_out(args.out, None, "eval")
    reports, rows = {}, []
    for name, (preds, meta) in runs.items():
        rep = metrics.aggregate_folds(preds)
        rep["rf_seconds"] = meta.get("rf_seconds")
        rep["pooled_accuracy"] = metrics.accuracy([p.label for p in preds], [p.predicted for p in preds])
        reports[name] = rep
        for beh in corpus.BEHAVIORS:
            rows.append([name, beh, rep["accuracy"][beh], rep["weighted_accuracy"][beh], rep["n"][beh],
                         rep["rf_seconds"]])
        rows.append([name, "average", rep["average"], "", sum(rep["n"].values()), rep["rf_seconds"]])
    comparisons = []
    for a, b in itertools.combinations(runs, 2):
        pa = {(p.session_id, p.behavior): p for p in runs[a][0]}
        pb = {(p.session_id, p.behavior): p for p in runs[b][0]}
        if set(pa) != set(pb):
            raise DataError(f"runs {a!r} and {b!r} predict different session/behavior sets")
        keys = sorted(pa)
        y = [pa[k].label for k in keys]
        bc = metrics.discordant_counts(y, [pa[k].predicted for k in keys], [pb[k].predicted for k in keys])
        comparisons.append({"run_a": a, "run_b": b,
                            "pur": metrics.pur(reports[a]["pooled_accuracy"], reports[b]["pooled_accuracy"]),
                            "b": bc[0], "c": bc[1], "mcnemar_p": metrics.mcnemar(*bc)})
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "behavior", "accuracy", "weighted_accuracy", "n", "rf_seconds"])
        w.writerows(rows)
    with open(out / "comparisons.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["run_a", "run_b", "pur", "b", "c", "mcnemar_p"])
        w.writeheader()
        w.writerows(comparisons)
    (out / "report.json").write_text(json.dumps({"runs": reports, "comparisons": comparisons},
                                                indent=2, sort_keys=True) + "\n")
    if args.plot_data:
        with_rf = [(r["rf_seconds"], r["average"]) for r in reports.values() if r["rf_seconds"] is not None]
        if with_rf:
            with_rf.sort()
            _write_series(out / "plot_rf_accuracy.tsv", *zip(*with_rf), header=("rf_seconds", "average_accuracy"))
    _print_table(reports)
    for c in comparisons:
        print(f"{c['run_a']} vs {c['run_b']}: PUR {c['pur']:+.4f}, McNemar p {c['mcnemar_p']:.4g}")
    return EXIT_OK


def parse_stack(text: str) -> list[LayerSpec]:
    """``conv:k:s,avgpool:k:s,...``; kinds conv, avgpool, relu, dropout, adaptive_max_pool."""
    specs = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        kind, *nums = item.split(":")
        if kind in ("conv", "avgpool"):
            if len(nums) not in (1, 2):
                raise UsageError(f"malformed layer {item!r}: expected {kind}:kernel[:stride]")
            try:
                k, s = int(nums[0]), int(nums[1]) if len(nums) == 2 else 1
            except ValueError:
                raise UsageError(f"malformed layer {item!r}") from None
            if k < 1 or s < 1:
                raise UsageError(f"malformed layer {item!r}: kernel and stride must be >= 1")
            specs.append(LayerSpec(kind, k, s))
        elif kind in ("relu", "dropout", "adaptive_max_pool") and not nums:
            specs.append(LayerSpec(kind))
        else:
            raise UsageError(f"malformed layer {item!r}")
    return specs


def cmd_rf(args) -> int:
    if args.model == "er":
        stack = conv_specs()
    elif args.model == "reduced":
        stack = ReducedContextModel(args.n_avg_pools).stack()
    else:
        stack = parse_stack(args.stack or "")
    rows = receptive_field_table(stack, args.frame_shift)
    frames, seconds = receptive_field(stack, args.frame_shift)
    result = {"layers": rows, "frames": frames, "seconds": round(seconds, 6)}
    if args.json:
        print(json.dumps(result, indent=2))
    else:
        for r in rows:
            print(f"{r['index']:>3} {r['kind']:<8} k={r['kernel']:<3} s={r['stride']:<3} "
                  f"rf={r['frames']:>5} frames  {r['seconds']:.2f} s")
        print(f"receptive field: {frames} frames, {seconds:.2f} s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emobev", description="Emotion primitives to behavior classification pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("extract-features", help="waveforms -> 84-dim feature files")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--strict", action="store_true", help="nonzero exit if any file fails")
    sp.set_defaults(func=cmd_extract_features)

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    common(sp)
    sp.add_argument("kind", choices=("emotion", "behavior"))
    sp.add_argument("--n", type=int)
    sp.add_argument("--rule-kind", dest="rule_kind", choices=("order_dependent", "bag_based"))
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one of the networks")
    common(sp)
    sp.add_argument("kind", choices=("er", "ec", "bbp-behavior", "ebp-behavior", "reduced"))
    sp.add_argument("--manifest")
    sp.add_argument("--er-checkpoint", dest="er_checkpoint")
    sp.add_argument("--ec-dir", dest="ec_dir")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--l", type=int)
    sp.add_argument("--n-avg-pools", dest="n_avg_pools", type=int)
    sp.add_argument("--plot-data", action="store_true", help="write x/y series files")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metrics and significance over prediction dumps")
    sp.add_argument("pred", nargs="+", metavar="[NAME=]PREDICTIONS.csv")
    sp.add_argument("--out", required=True)
    sp.add_argument("--plot-data", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("rf", help="receptive field of a layer stack")
    group = sp.add_mutually_exclusive_group()
    group.add_argument("--stack", help="e.g. conv:10:2,conv:5:2,avgpool:2:2")
    group.add_argument("--model", choices=("er", "reduced"))
    sp.add_argument("--n-avg-pools", dest="n_avg_pools", type=int, default=0)
    sp.add_argument("--frame-shift", dest="frame_shift", type=float, default=0.010)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_rf)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"emobev: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"emobev: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, corpus.ManifestError, corpus.InsufficientDataError, CheckpointError,
            FreezeViolation, FileNotFoundError, ValueError) as exc:
        print(f"emobev: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
