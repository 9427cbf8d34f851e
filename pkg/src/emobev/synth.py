"""Synthetic stand-ins for the emotion and behavior corpora.

Emotion ``j`` owns the feature band ``[12j, 12j + 12)``. Its signature is a
slow sinusoidal envelope ``1 + 0.5 sin(2 pi t / P_j + phase)`` with a
distinct period per emotion, scaled by the rating and added to Gaussian
noise. Behavior sessions are sequences of 1 s segments built from those
signatures, labeled by a deterministic rule over the segment emotions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import (
    EMOTIONS,
    SEGMENT_FRAMES,
    Segment,
    SessionRecord,
    UtteranceRecord,
)
from .dsp import N_FEATURES

NEUTRAL = -1
RULE_KINDS = ("order_dependent", "bag_based")


@dataclass
class SyntheticEmotionSpec:
    n_features: int = N_FEATURES
    band_width: int = 12
    periods: tuple[int, ...] = (6, 8, 10, 13, 17, 23)
    gain: float = 1.0
    noise_std: float = 0.5
    presence_prob: float = 0.35
    min_frames: int = 100
    max_frames: int = 300
    split_fracs: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if self.band_width * len(EMOTIONS) > self.n_features:
            raise ValueError("emotion bands do not fit in the feature dimension")
        if len(self.periods) != len(EMOTIONS):
            raise ValueError("need one period per emotion")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("frame range must satisfy 1 <= min <= max")


def emotion_features(ratings, n_frames: int, spec: SyntheticEmotionSpec,
                     rng: np.random.Generator) -> np.ndarray:
    """Noise plus the rating-scaled signature of every emotion -> (n_features, n_frames)."""
    x = rng.normal(0.0, spec.noise_std, size=(spec.n_features, n_frames))
    t = np.arange(n_frames)
    for j, r in enumerate(ratings):
        if r <= 0:
            continue
        phase = rng.uniform(0, 2 * np.pi)
        env = 1.0 + 0.5 * np.sin(2 * np.pi * t / spec.periods[j] + phase)
        lo = j * spec.band_width
        x[lo:lo + spec.band_width] += spec.gain * r * env
    return x


def _draw_ratings(spec: SyntheticEmotionSpec, rng: np.random.Generator) -> list[float]:
    # ratings are averages of three integer annotations, so multiples of 1/3
    present = rng.random(len(EMOTIONS)) < spec.presence_prob
    levels = rng.integers(1, 10, size=len(EMOTIONS)) / 3.0
    return [float(lv) if p else 0.0 for p, lv in zip(present, levels)]


def synth_emotion_corpus(spec: SyntheticEmotionSpec, n: int, seed: int) -> list[UtteranceRecord]:
    """``n`` utterances with planted ratings; features are kept in memory."""
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    bounds = np.cumsum(spec.split_fracs) / np.sum(spec.split_fracs)
    out = []
    for i in range(n):
        ratings = _draw_ratings(spec, rng)
        T = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        feats = emotion_features(ratings, T, spec, rng)
        u = (i + 0.5) / n
        split = ("train", "valid", "test")[int(np.searchsorted(bounds, u))]
        out.append(UtteranceRecord(id=f"u{i:05d}", ratings=ratings, split=split,
                                   features=feats.astype(np.float32).astype(np.float64)))
    return out


@dataclass
class SyntheticRuleSpec:
    """Behavior rule over per-second emotion sequences.

    ``order_dependent``: label 1 iff the first ``first_emotion`` segment comes
    before the first ``second_emotion`` segment. ``bag_based``: label 1 iff the
    fraction of ``first_emotion`` segments is at least ``theta``.
    """

    rule_kind: str = "order_dependent"
    first_emotion: int = 0
    second_emotion: int = 3
    theta: float = 0.3
    behavior: int = 0
    n_couples: int = 50
    noise_std: float = 0.5
    event_rating: tuple[float, float] = (1.5, 3.0)
    distractor_prob: float = 0.25
    block_len: tuple[int, int] = (2, 3)
    gap_len: tuple[int, int] = (5, 6)
    session_len: tuple[int, int] = (20, 24)
    bag_pos_frac: tuple[float, float] = (0.5, 0.7)
    bag_neg_frac: tuple[float, float] = (0.0, 0.1)
    emotion: SyntheticEmotionSpec = field(default_factory=SyntheticEmotionSpec)

    def __post_init__(self):
        if self.rule_kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind {self.rule_kind!r}")
        n_emo = len(EMOTIONS)
        if not (0 <= self.first_emotion < n_emo and 0 <= self.second_emotion < n_emo):
            raise ValueError("emotion index out of range")
        if self.first_emotion == self.second_emotion:
            raise ValueError("rule needs two distinct emotions")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must be in (0, 1]")
        if self.n_couples < 1:
            raise ValueError("need at least one couple")
        if self.rule_kind == "bag_based" and not (self.bag_neg_frac[1] < self.theta <= self.bag_pos_frac[0]):
            raise ValueError("bag fractions must straddle theta")

    def label(self, emotions: list[int]) -> int:
        """Apply the rule to a per-segment emotion sequence (NEUTRAL = no event)."""
        if not emotions:
            raise ValueError("empty emotion sequence")
        if self.rule_kind == "bag_based":
            frac = sum(e == self.first_emotion for e in emotions) / len(emotions)
            return int(frac >= self.theta)
        first = [i for i, e in enumerate(emotions) if e == self.first_emotion]
        second = [i for i, e in enumerate(emotions) if e == self.second_emotion]
        if not first:
            return 0
        if not second:
            return 1
        return int(first[0] < second[0])


def _segment(emotion: int, rule: SyntheticRuleSpec, rng: np.random.Generator) -> Segment:
    ratings = [0.0] * len(EMOTIONS)
    if emotion != NEUTRAL:
        ratings[emotion] = float(rng.uniform(*rule.event_rating))
    espec = rule.emotion
    if espec.noise_std != rule.noise_std:
        espec = SyntheticEmotionSpec(**{**espec.__dict__, "noise_std": rule.noise_std})
    # stored as float32, the same precision as an on-disk feature file
    feats = emotion_features(ratings, SEGMENT_FRAMES, espec, rng).astype(np.float32)
    return Segment(feature_path=None, duration_s=SEGMENT_FRAMES / 100.0, ratings=ratings,
                   features=feats)


def _background(n: int, rule: SyntheticRuleSpec, rng: np.random.Generator) -> list[int]:
    """Neutral filler with occasional emotions outside the rule."""
    others = [j for j in range(len(EMOTIONS)) if j not in (rule.first_emotion, rule.second_emotion)]
    return [int(rng.choice(others)) if rng.random() < rule.distractor_prob else NEUTRAL
            for _ in range(n)]


def _order_pair(rule: SyntheticRuleSpec, rng: np.random.Generator):
    """Twin emotion sequences differing only in which block comes first."""
    gaps = [_background(int(rng.integers(rule.gap_len[0], rule.gap_len[1] + 1)), rule, rng)
            for _ in range(3)]
    a = [rule.first_emotion] * int(rng.integers(rule.block_len[0], rule.block_len[1] + 1))
    b = [rule.second_emotion] * int(rng.integers(rule.block_len[0], rule.block_len[1] + 1))
    pos = gaps[0] + a + gaps[1] + b + gaps[2]
    neg = gaps[0] + b + gaps[1] + a + gaps[2]
    return pos, neg, (len(gaps[0]), len(a), len(gaps[1]), len(b))


def _bag_sequence(label: int, rule: SyntheticRuleSpec, rng: np.random.Generator) -> list[int]:
    T = int(rng.integers(rule.session_len[0], rule.session_len[1] + 1))
    lo, hi = rule.bag_pos_frac if label else rule.bag_neg_frac
    k = int(round(rng.uniform(lo, hi) * T))
    if label:
        k = max(k, int(np.ceil(rule.theta * T)))
    else:
        k = min(k, int(np.ceil(rule.theta * T)) - 1)
    seq = _background(T, rule, rng)
    for i in rng.choice(T, size=k, replace=False):
        seq[int(i)] = rule.first_emotion
    return seq


def synth_behavior_corpus(rule: SyntheticRuleSpec, n_sessions: int, seed: int) -> list[SessionRecord]:
    """Sessions of 1 s segments labeled by ``rule`` on behavior ``rule.behavior``.

    Sessions come in pairs (one per class) that share a couple. For the
    order-dependent rule the pair members reuse the very same segments with the
    two event blocks swapped, so class-conditional emotion histograms match
    exactly.
    """
    if n_sessions < 0:
        raise ValueError("n_sessions must be non-negative")
    rng = np.random.default_rng(seed)
    sessions: list[SessionRecord] = []
    n_pairs = (n_sessions + 1) // 2
    per_couple = max(1, int(np.ceil(n_pairs / rule.n_couples)))
    for p in range(n_pairs):
        couple = f"c{p // per_couple:03d}"
        gender = "F" if p % 2 == 0 else "M"
        if rule.rule_kind == "order_dependent":
            pos_seq, neg_seq, (na, la, nb, lb) = _order_pair(rule, rng)
            segs = [_segment(e, rule, rng) for e in pos_seq]
            pos_segs = segs
            # swap the two blocks, keep every segment object
            blk_a = segs[na:na + la]
            gap_b = segs[na + la:na + la + nb]
            blk_b = segs[na + la + nb:na + la + nb + lb]
            neg_segs = segs[:na] + blk_b + gap_b + blk_a + segs[na + la + nb + lb:]
            pairs = [(pos_seq, pos_segs), (neg_seq, neg_segs)]
        else:
            pairs = []
            for lab in (1, 0):
                seq = _bag_sequence(lab, rule, rng)
                pairs.append((seq, [_segment(e, rule, rng) for e in seq]))
        for seq, segs in pairs:
            if len(sessions) >= n_sessions:
                break
            labels: list[int | None] = [None] * 5
            labels[rule.behavior] = rule.label(seq)
            sessions.append(SessionRecord(id=f"s{len(sessions):04d}", couple_id=couple,
                                          speaker_gender=gender, segments=segs,
                                          binary_labels=labels))
    return sessions


def segment_emotions(session: SessionRecord) -> list[int]:
    """Ground-truth dominant emotion per segment (NEUTRAL when all ratings are 0)."""
    out = []
    for s in session.segments:
        r = s.ratings or [0.0] * len(EMOTIONS)
        out.append(int(np.argmax(r)) if max(r) > 0 else NEUTRAL)
    return out


def audit_histograms(sessions: list[SessionRecord], behavior: int) -> dict:
    """Per-class emotion presence rates (share of segments) and their largest gap."""
    rates = {}
    for cls in (0, 1):
        segs = [e for s in sessions if s.binary_labels[behavior] == cls for e in segment_emotions(s)]
        rates[cls] = [float(np.mean([e == j for e in segs])) if segs else 0.0
                      for j in range(len(EMOTIONS))]
    gap = max(abs(a - b) for a, b in zip(rates[0], rates[1]))
    return {"negative": dict(zip(EMOTIONS, rates[0])), "positive": dict(zip(EMOTIONS, rates[1])),
            "max_divergence": gap,
            "n_positive": sum(s.binary_labels[behavior] == 1 for s in sessions),
            "n_negative": sum(s.binary_labels[behavior] == 0 for s in sessions)}
