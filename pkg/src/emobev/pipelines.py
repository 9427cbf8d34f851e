"""Training and inference pipelines for the emotion and behavior networks."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import (
    EMOTIONS,
    BalancedSampler,
    Fold,
    InsufficientDataError,
    SessionRecord,
    UtteranceRecord,
    binarize_emotions,
    segment_utterance,
    session_windows,
)
from .metrics import ConfusionCounts, Prediction, accuracy, weighted_accuracy
from .models import (
    BaseModel,
    BBPContextModel,
    EBPContextModel,
    ECModel,
    ERModel,
    ReducedContextModel,
    er_receptive_field,
    frozen_checksum,
    load_state,
    state_dict,
)
from .optim import Adam, PolySchedule, cross_entropy_2class, masked_bce_logits, mse_loss, schedule_lr
from .tensor import NumericalError, ShapeError, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    patience: int = 20
    lr_power: float = 1.0
    lr_floor: float = 0.0
    jobs: int = 1


class FreezeViolation(RuntimeError):
    pass


def _best_update(best, loss, epoch, model):
    """Keep the lowest loss; ties go to the earlier epoch."""
    if best is None or loss < best[0]:
        return loss, epoch, state_dict(model)
    return best


def _guard(step_fn, where: str):
    try:
        return step_fn()
    except NumericalError as exc:
        raise NumericalError(f"training diverged at {where}: {exc}") from None


# ---------------------------------------------------------------------------
# emotion recognition / classification
# ---------------------------------------------------------------------------


def _tiled(utts: Sequence[UtteranceRecord]):
    xs, owners = [], []
    for i, u in enumerate(utts):
        segs = segment_utterance(u.load(), mode="tile_all")
        xs.append(segs)
        owners += [i] * len(segs)
    if not xs:
        return np.zeros((0, 84, 100)), np.zeros(0, dtype=int)
    return np.concatenate(xs), np.array(owners)


def _batched(fn, x: np.ndarray, size: int = 256) -> np.ndarray:
    with no_grad():
        return np.concatenate([fn(x[i:i + size]).data for i in range(0, len(x), size)])


def train_er(train: Sequence[UtteranceRecord], valid: Sequence[UtteranceRecord],
             cfg: TrainConfig) -> tuple[ERModel, list[dict]]:
    """Joint regression of all six ratings on random 1 s segments, MSE loss."""
    if not train:
        raise InsufficientDataError("no training utterances")
    rng = np.random.default_rng([cfg.seed, 1])
    model = ERModel(np.random.default_rng(cfg.seed))
    model.norm.fit(np.concatenate([u.load() for u in train], axis=1))
    vx, vown = _tiled(valid)
    vy = np.array([valid[i].ratings for i in vown]) if len(vown) else None
    opt = Adam(model.trainable_parameters(), cfg.lr)
    ratings = np.array([u.ratings for u in train])
    history, best, since = [], None, 0
    for epoch in range(cfg.epochs):
        model.train()
        segs = np.concatenate([segment_utterance(u.load(), mode="random_one", rng=rng) for u in train])
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]

            def step():
                opt.zero_grad()
                loss = mse_loss(model(segs[idx]), ratings[idx])
                loss.backward()
                opt.step(cfg.lr)
                return loss.item()

            losses.append(_guard(step, f"epoch {epoch}, batch {start // cfg.batch_size}"))
        model.eval()
        train_loss = float(np.mean(losses))
        valid_loss = float(np.mean((_batched(model, vx) - vy) ** 2)) if vy is not None else train_loss
        history.append({"epoch": epoch, "lr": cfg.lr, "train_loss": train_loss, "valid_loss": valid_loss})
        prev = best
        best = _best_update(best, valid_loss, epoch, model)
        since = 0 if best is not prev else since + 1
        if since >= cfg.patience:
            break
    if best is not None:
        load_state(model, best[2])
    return model.eval(), history


def emotion_labels(utts: Sequence[UtteranceRecord], k: int) -> np.ndarray:
    return np.array([binarize_emotions(u.ratings)[k] for u in utts], dtype=int)


def train_ec(er: ERModel, k: int, train: Sequence[UtteranceRecord], valid: Sequence[UtteranceRecord],
             cfg: TrainConfig) -> tuple[ECModel, list[dict]]:
    """Binary head for emotion ``k`` on the frozen emotion network, class-balanced batches."""
    labels = emotion_labels(train, k)
    if labels.sum() == 0 or labels.sum() == len(labels):
        raise InsufficientDataError(f"emotion {EMOTIONS[k]} has an empty class in training data")
    rng = np.random.default_rng([cfg.seed, 2, k])
    model = ECModel(er, k, np.random.default_rng([cfg.seed, 3, k]))
    before = frozen_checksum(model)
    sampler = BalancedSampler(labels, cfg.batch_size, rng)
    vx, vown = _tiled(valid)
    vlab = emotion_labels(valid, k) if len(valid) else None
    opt = Adam(model.trainable_parameters(), cfg.lr)
    history, best, since = [], None, 0
    for epoch in range(cfg.epochs):
        model.train()
        segs = np.concatenate([segment_utterance(u.load(), mode="random_one", rng=rng) for u in train])
        losses = []
        for bi, idx in enumerate(sampler.epoch()):

            def step():
                opt.zero_grad()
                loss = cross_entropy_2class(model(segs[idx]), labels[idx])
                loss.backward()
                opt.step(cfg.lr)
                return loss.item()

            losses.append(_guard(step, f"epoch {epoch}, batch {bi}"))
        model.eval()
        row = {"epoch": epoch, "lr": cfg.lr, "train_loss": float(np.mean(losses))}
        if vlab is not None:
            logits = _batched(model, vx)
            with no_grad():
                row["valid_loss"] = cross_entropy_2class(logits, vlab[vown]).item()
            row["valid_wa"] = _vote_wa(logits, vown, vlab)
        else:
            row["valid_loss"] = row["train_loss"]
        history.append(row)
        prev = best
        best = _best_update(best, row["valid_loss"], epoch, model)
        since = 0 if best is not prev else since + 1
        if since >= cfg.patience:
            break
    if best is not None:
        load_state(model, best[2])
    if frozen_checksum(model) != before:
        raise FreezeViolation("frozen emotion-network parameters changed during head training")
    return model.eval(), history


def _votes(logits: np.ndarray) -> int:
    """Majority vote over per-segment decisions; a tie counts as presence."""
    ones = int(np.sum(logits[:, 1] > logits[:, 0]))
    return int(2 * ones >= len(logits))


def _vote_wa(logits, owners, labels) -> float:
    preds = [_votes(logits[owners == i]) for i in range(len(labels))]
    cc = ConfusionCounts.from_predictions(labels, preds)
    return weighted_accuracy(cc) if cc.p and cc.n else float("nan")


def predict_emotion_binary(ec: ECModel, features: np.ndarray) -> int:
    """Tile into 1 s segments, classify each, majority vote (tie -> 1)."""
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[1] == 0:
        raise ValueError("empty feature sequence")
    segs = segment_utterance(feats, mode="tile_all")
    return _votes(_batched(ec.eval(), segs))


def extract_bbp(ec_models: Sequence[ECModel], session: SessionRecord) -> np.ndarray:
    """Per non-overlapping 1 s window, the six presence bits -> (T, 6) ints."""
    by_emotion = {m.emotion: m for m in ec_models}
    if sorted(by_emotion) != list(range(len(EMOTIONS))):
        raise ValueError("need one classifier per emotion")
    windows = session_windows(session)
    cache: dict[int, np.ndarray] = {}
    bits = np.zeros((len(windows), len(EMOTIONS)), dtype=int)
    for k in range(len(EMOTIONS)):
        m = by_emotion[k].eval()
        key = id(m.er)
        if key not in cache:
            cache[key] = _batched(m.er.penultimate, windows)
        with no_grad():
            logits = m.head(cache[key]).data
        bits[:, k] = logits[:, 1] > logits[:, 0]
    return bits


def extract_ebp(er: ERModel, l: int, segment: np.ndarray, pool: bool = False) -> np.ndarray:
    """Output map of conv layer ``l`` for one (84, L) segment, or its time-max when pooled."""
    if not 1 <= l <= 4:
        raise ValueError("l must be in 1..4")
    seg = np.asarray(segment)
    need = er_receptive_field(l)
    if seg.ndim != 2 or seg.shape[1] < need:
        raise ShapeError(f"segment of {seg.shape[-1]} frames is shorter than the layer-{l} receptive field ({need})")
    with no_grad():
        fmap = er.eval().feature_map(seg[None], l).data[0]
    return fmap.max(axis=1) if pool else fmap


# ---------------------------------------------------------------------------
# behavior models
# ---------------------------------------------------------------------------


@dataclass
class BehaviorRun:
    kind: str
    predictions: list[Prediction] = field(default_factory=list)
    histories: dict[int, list[dict]] = field(default_factory=dict)
    models: dict[int, BaseModel] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def accuracy(self) -> float:
        return accuracy([p.label for p in self.predictions], [p.predicted for p in self.predictions])


def _masked_eval(model, inputs, sessions) -> tuple[float, float]:
    losses, y, yhat = [], [], []
    with no_grad():
        for s in sessions:
            mask = s.mask_array()
            if not mask.any():
                continue
            logits = model.forward_frozen(inputs[s.id])
            losses.append(masked_bce_logits(logits, s.label_array()[None], mask[None]).item())
            y += list(s.label_array()[mask])
            yhat += list((logits.data[0] > 0)[mask])
    if not losses:
        return float("nan"), float("nan")
    return float(np.mean(losses)), accuracy(y, yhat)


def fit_behavior(model: BaseModel, inputs: dict, train: Sequence[SessionRecord],
                 valid: Sequence[SessionRecord], cfg: TrainConfig,
                 rng: np.random.Generator) -> list[dict]:
    """Masked BCE over all behaviors with Adam and polynomial decay; keeps the best-validation state."""
    train = [s for s in train if any(s.mask)]
    if not train:
        raise InsufficientDataError("no labeled training sessions")
    opt = Adam(model.trainable_parameters(), cfg.lr)
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    sched = PolySchedule(cfg.lr, max(1, cfg.epochs * per_epoch), cfg.lr_power, cfg.lr_floor)
    history, best, since, t = [], None, 0, 0
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            lr_t = schedule_lr(sched, t)

            def step():
                opt.zero_grad()
                total = 0.0
                for s in batch:
                    logits = model.forward_frozen(inputs[s.id])
                    loss = masked_bce_logits(logits, s.label_array()[None], s.mask_array()[None])
                    (loss * (1.0 / len(batch))).backward()
                    total += loss.item()
                opt.step(lr_t)
                return total / len(batch)

            losses.append(_guard(step, f"epoch {epoch}, step {t}"))
            t += 1
        model.eval()
        train_loss = float(np.mean(losses))
        valid_loss, valid_acc = _masked_eval(model, inputs, valid)
        if math.isnan(valid_loss):
            valid_loss = train_loss
        history.append({"epoch": epoch, "lr": lr_t, "train_loss": train_loss,
                        "valid_loss": valid_loss, "valid_acc": valid_acc})
        prev = best
        best = _best_update(best, valid_loss, epoch, model)
        since = 0 if best is not prev else since + 1
        if since >= cfg.patience:
            break
    if best is not None:
        load_state(model, best[2])
    model.eval()
    return history


def _predict(model, inputs, sessions, fold: int) -> list[Prediction]:
    out = []
    with no_grad():
        for s in sessions:
            if not any(s.mask):
                continue
            logits = model.forward_frozen(inputs[s.id]).data[0]
            for b, lab in enumerate(s.binary_labels):
                if lab is not None:
                    out.append(Prediction(s.id, b, int(lab), float(logits[b]), fold))
    return out


def _run_folds(kind: str, make: Callable[[np.random.Generator], BaseModel], inputs: dict,
               sessions: Sequence[SessionRecord], folds: Sequence[Fold], cfg: TrainConfig,
               keep_models: bool) -> BehaviorRun:
    def job(fold: Fold):
        model = make(np.random.default_rng([cfg.seed, 100 + fold.index]))
        before = frozen_checksum(model)
        train, valid, test = fold.split(sessions)
        hist = fit_behavior(model, inputs, train, valid, cfg, np.random.default_rng([cfg.seed, 200 + fold.index]))
        if frozen_checksum(model) != before:
            raise FreezeViolation(f"frozen parameters changed in fold {fold.index}")
        log.info("%s fold %d: %d epochs, best valid loss %.4f", kind, fold.index, len(hist),
                 min((h["valid_loss"] for h in hist), default=float("nan")))
        return fold.index, hist, _predict(model, inputs, test, fold.index), model

    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(job, folds))
    else:
        results = [job(f) for f in folds]
    run = BehaviorRun(kind)
    for idx, hist, preds, model in sorted(results, key=lambda r: r[0]):
        run.histories[idx] = hist
        run.predictions += preds
        if keep_models:
            run.models[idx] = model
    return run


def behavior_inputs(kind: str, sessions: Sequence[SessionRecord], *, l: int = 4,
                    er: ERModel | None = None, ec_models: Sequence[ECModel] | None = None,
                    n_avg_pools: int = 0) -> dict:
    """Frozen-part outputs per session id, computed once and reused by every fold and epoch."""
    if kind == "bbp":
        if ec_models is None:
            raise ValueError("bbp inputs need the six emotion classifiers")
        return {s.id: extract_bbp(ec_models, s).astype(np.float64) for s in sessions}
    if kind == "ebp":
        if l > 0 and er is None:
            raise ValueError(f"ebp({l}) needs a trained emotion network")
        template = EBPContextModel(l, er, seed=0)
        with no_grad():
            return {s.id: template.frozen_features(session_windows(s)) for s in sessions}
    if kind == "reduced":
        if er is None:
            raise ValueError("the reduced-context model needs a trained emotion network")
        template = ReducedContextModel(n_avg_pools, er, seed=0)
        need = template.min_frames()
        out, short = {}, []
        with no_grad():
            for s in sessions:
                feats = s.features()
                if feats.shape[1] < need:
                    short.append(s.id)
                out[s.id] = template.frozen_features(feats)
        if short:
            warnings.warn(f"{len(short)} session(s) shorter than the receptive field ({need} frames) "
                          f"were zero-padded on the right, e.g. {short[0]}")
        return out
    raise ValueError(f"unknown behavior model kind {kind!r}")


def train_behavior_context(kind: str, sessions: Sequence[SessionRecord], folds: Sequence[Fold],
                           cfg: TrainConfig, *, l: int = 4, er: ERModel | None = None,
                           ec_models: Sequence[ECModel] | None = None, inputs: dict | None = None,
                           keep_models: bool = False) -> BehaviorRun:
    """Context GRU on B-BP sequences (``kind='bbp'``) or E-BP_l embeddings (``kind='ebp'``)."""
    if inputs is None:
        inputs = behavior_inputs(kind, sessions, l=l, er=er, ec_models=ec_models)
    if kind == "bbp":
        make = lambda rng: BBPContextModel(rng)
    else:
        make = lambda rng: EBPContextModel(l, er, rng)
    run = _run_folds(kind if kind == "bbp" else f"ebp{l}", make, inputs, sessions, folds, cfg, keep_models)
    run.info = {"l": l} if kind == "ebp" else {}
    return run


def train_behavior_reduced(n_avg_pools: int, sessions: Sequence[SessionRecord], folds: Sequence[Fold],
                           cfg: TrainConfig, er: ERModel, *, inputs: dict | None = None,
                           keep_models: bool = False) -> BehaviorRun:
    """Reduced-context model at the receptive field set by ``n_avg_pools``."""
    if inputs is None:
        inputs = behavior_inputs("reduced", sessions, er=er, n_avg_pools=n_avg_pools)
    make = lambda rng: ReducedContextModel(n_avg_pools, er, rng)
    run = _run_folds(f"reduced{n_avg_pools}", make, inputs, sessions, folds, cfg, keep_models)
    frames, seconds = ReducedContextModel(n_avg_pools).receptive_field()
    run.info = {"n_avg_pools": n_avg_pools, "rf_frames": frames, "rf_seconds": round(seconds, 6)}
    return run


def epochs_to_reach(history: Sequence[dict], threshold: float, key: str = "valid_acc") -> int | None:
    """1-based epoch count at which ``key`` first reaches ``threshold``, or None."""
    for i, row in enumerate(history):
        if row.get(key) is not None and row[key] >= threshold:
            return i + 1
    return None


# ---------------------------------------------------------------------------
# prediction dumps
# ---------------------------------------------------------------------------

PREDICTION_COLUMNS = ("session_id", "behavior", "label", "logit", "fold")


def write_predictions(path: str | Path, predictions: Sequence[Prediction], meta: dict | None = None) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_COLUMNS)
        for p in predictions:
            w.writerow([p.session_id, p.behavior, p.label, repr(float(p.logit)), p.fold])
    if meta is not None:
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> tuple[list[Prediction], dict]:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != set(PREDICTION_COLUMNS):
        raise ValueError(f"{path}: expected columns {PREDICTION_COLUMNS}")
    preds = [Prediction(r["session_id"], int(r["behavior"]), int(r["label"]), float(r["logit"]),
                        int(r["fold"])) for r in rows]
    meta_path = path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return preds, meta


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
