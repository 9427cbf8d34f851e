from dataclasses import replace

import numpy as np
import pytest

from emobev.corpus import cv_split, shuffle_labels
from emobev.metrics import ConfusionCounts, aggregate_folds, weighted_accuracy
from emobev.models import BBPContextModel, ERModel, param_checksum, state_dict
from emobev.pipelines import (
    FreezeViolation,
    TrainConfig,
    _run_folds,
    behavior_inputs,
    emotion_labels,
    epochs_to_reach,
    fit_behavior,
    predict_emotion_binary,
    read_predictions,
    train_behavior_context,
    train_ec,
    train_er,
    write_predictions,
)
from emobev.synth import SyntheticEmotionSpec, SyntheticRuleSpec, synth_behavior_corpus, synth_emotion_corpus
from emobev.tensor import Tensor


@pytest.fixture(scope="module")
def emotion_data():
    corpus = synth_emotion_corpus(SyntheticEmotionSpec(), 700, seed=0)
    train = [u for u in corpus if u.split == "train"]
    valid = [u for u in corpus if u.split == "valid"]
    test = synth_emotion_corpus(SyntheticEmotionSpec(), 300, seed=99)
    return train, valid, test


@pytest.fixture(scope="module")
def trained_er(emotion_data):
    train, valid, _ = emotion_data
    return train_er(train, valid, TrainConfig(lr=1e-3, epochs=15, seed=0))


def _wa(ec, k, utts):
    y = emotion_labels(utts, k)
    p = [predict_emotion_binary(ec, u.load()) for u in utts]
    return weighted_accuracy(ConfusionCounts.from_predictions(y, p))


def test_er_beats_mean_predictor(trained_er, emotion_data):
    _, valid, _ = emotion_data
    _, hist = trained_er
    variance = np.array([u.ratings for u in valid]).var(axis=0).mean()
    assert min(h["valid_loss"] for h in hist) < 0.5 * variance


def test_er_zero_lr_and_determinism(emotion_data):
    train, valid, _ = emotion_data
    small = train[:40]
    cfg = TrainConfig(lr=0.0, epochs=2, seed=3)
    m0, h0 = train_er(small, valid[:10], cfg)
    fresh = ERModel(np.random.default_rng(3))
    assert all(np.array_equal(a, state_dict(fresh)[n]) for n, a in state_dict(m0).items()
               if not n.startswith("norm"))
    assert h0[0]["valid_loss"] == h0[1]["valid_loss"]
    cfg = TrainConfig(lr=1e-3, epochs=2, seed=3)
    _, ha = train_er(small, valid[:10], cfg)
    _, hb = train_er(small, valid[:10], cfg)
    assert ha == hb


def test_ec_learns_decodable_emotion(trained_er, emotion_data):
    er, _ = trained_er
    train, valid, test = emotion_data
    before = param_checksum(er.parameters())
    ec, hist = train_ec(er, 0, train, valid, TrainConfig(lr=1e-3, epochs=5, batch_size=64, seed=0))
    assert param_checksum(ec.er.parameters()) == before
    assert all(not p.requires_grad for p in ec.er.parameters())
    assert _wa(ec, 0, test) >= 0.85
    assert "valid_wa" in hist[0]


def test_ec_shuffled_labels_are_chance(trained_er, emotion_data):
    # A head on informative frozen features lands far from 0.5 in either
    # direction on any single run, so the control is the mean over 16 shuffles.
    er, _ = trained_er
    train, _, test = emotion_data
    was = []
    for s in range(16):
        rng = np.random.default_rng([7, s])
        shuffled = [replace(u, ratings=train[j].ratings) for u, j in zip(train, rng.permutation(len(train)))]
        ec, _ = train_ec(er, 0, shuffled, [], TrainConfig(lr=1e-3, epochs=2, batch_size=64, seed=s))
        was.append(_wa(ec, 0, test))
    assert 0.45 <= np.mean(was) <= 0.55


def test_ec_empty_class_is_error(trained_er, emotion_data):
    er, _ = trained_er
    train, _, _ = emotion_data
    none = [replace(u, ratings=[0.0] * 6) for u in train[:20]]
    with pytest.raises(ValueError):
        train_ec(er, 0, none, [], TrainConfig(epochs=1))


@pytest.fixture(scope="module")
def bag_corpus():
    rule = SyntheticRuleSpec(rule_kind="bag_based", n_couples=8)
    sessions = synth_behavior_corpus(rule, 32, seed=1)
    return sessions, cv_split(sessions, 4, 2, seed=0)


def _bbp_inputs(sessions):
    # ground-truth presence bits stand in for trained emotion classifiers
    from emobev.synth import segment_emotions
    out = {}
    for s in sessions:
        seq = np.zeros((len(s.segments), 6))
        for i, e in enumerate(segment_emotions(s)):
            if e >= 0:
                seq[i, e] = 1.0
        out[s.id] = seq
    return out


def test_behavior_run_predicts_each_test_session_once(bag_corpus):
    sessions, folds = bag_corpus
    inputs = _bbp_inputs(sessions)
    cfg = TrainConfig(lr=1e-3, epochs=3, batch_size=4, seed=0)
    run = train_behavior_context("bbp", sessions, folds, cfg, inputs=inputs)
    expected = [(s.id, 0) for s in sessions]
    report = aggregate_folds(run.predictions, expected=expected)
    assert report["n"]["acceptance"] == len(sessions)
    assert set(run.histories) == {f.index for f in folds}
    run2 = train_behavior_context("bbp", sessions, folds, cfg, inputs=inputs)
    assert run.histories == run2.histories
    assert [p.logit for p in run.predictions] == [p.logit for p in run2.predictions]
    par = train_behavior_context("bbp", sessions, folds, replace(cfg, jobs=3), inputs=inputs)
    assert par.histories == run.histories


def test_behavior_zero_lr_keeps_parameters(bag_corpus):
    sessions, folds = bag_corpus
    inputs = _bbp_inputs(sessions)
    model = BBPContextModel(np.random.default_rng(0))
    before = state_dict(model)
    train, valid, _ = folds[0].split(sessions)
    hist = fit_behavior(model, inputs, train, valid, TrainConfig(lr=0.0, epochs=2, batch_size=4),
                        np.random.default_rng(0))
    assert all(np.array_equal(before[n], a) for n, a in state_dict(model).items())
    assert hist[0]["valid_loss"] == hist[1]["valid_loss"]


def test_label_shuffled_sessions_keep_class_balance(bag_corpus):
    sessions, _ = bag_corpus
    sh = shuffle_labels(sessions, 1)
    assert sum(s.binary_labels[0] for s in sh) == sum(s.binary_labels[0] for s in sessions)


class _LeakyModel(BBPContextModel):
    """Frozen parameter that drifts during training, to exercise the guard."""

    def __init__(self, seed=0):
        super().__init__(seed)
        self.frozen = Tensor(np.zeros(1))

    def forward_frozen(self, seq):
        self.frozen.data += 1.0
        return super().forward_frozen(seq)


def test_freeze_violation_is_detected(bag_corpus):
    sessions, folds = bag_corpus
    inputs = _bbp_inputs(sessions)
    cfg = TrainConfig(lr=1e-3, epochs=1, batch_size=4)
    with pytest.raises(FreezeViolation):
        _run_folds("leaky", _LeakyModel, inputs, sessions, folds[:1], cfg, False)


def test_behavior_inputs_require_prerequisites(bag_corpus):
    sessions, _ = bag_corpus
    with pytest.raises(ValueError):
        behavior_inputs("bbp", sessions)
    with pytest.raises(ValueError):
        behavior_inputs("ebp", sessions, l=2)
    with pytest.raises(ValueError):
        behavior_inputs("reduced", sessions)
    assert behavior_inputs("ebp", sessions[:2], l=0)[sessions[0].id].shape[0] == len(sessions[0].segments)


def test_epochs_to_reach():
    hist = [{"valid_acc": 0.5}, {"valid_acc": 0.95}, {"valid_acc": 1.0}]
    assert epochs_to_reach(hist, 0.9) == 2
    assert epochs_to_reach(hist, 1.01) is None


def test_prediction_dump_round_trip(tmp_path, bag_corpus):
    sessions, folds = bag_corpus
    run = train_behavior_context("bbp", sessions, folds[:1], TrainConfig(epochs=1, batch_size=4),
                                 inputs=_bbp_inputs(sessions))
    path = tmp_path / "predictions.csv"
    write_predictions(path, run.predictions, {"kind": "bbp"})
    back, meta = read_predictions(path)
    assert back == run.predictions and meta == {"kind": "bbp"}
    assert path.read_text().splitlines()[0] == "session_id,behavior,label,logit,fold"
