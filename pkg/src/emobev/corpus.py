"""Records, on-disk formats, labeling, batching, segmentation and CV splits.

Feature file: 16-byte little-endian header ``<4sIII`` (magic ``EBFT``,
version, n_dims, n_frames) followed by float32 values, row-major
``n_dims x n_frames``.

Manifest: JSON lines. The first line is a header
``{"format": "emobev-manifest", "version": 1, "kind": "utterance" | "session"}``,
every following line is one record. Relative paths resolve against the
manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .dsp import N_FEATURES

EMOTIONS = ("anger", "disgust", "fear", "happy", "sad", "surprise")
BEHAVIORS = ("acceptance", "blame", "positivity", "negativity", "sadness")
SPLITS = ("train", "valid", "test")
FRAME_SHIFT_S = 0.010
SEGMENT_FRAMES = 100

FEATURE_MAGIC = b"EBFT"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")
MANIFEST_FORMAT = "emobev-manifest"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def write_features(path: str | Path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("feature sequence must be 2-D (dims x frames)")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise ManifestError(f"{path}: truncated feature header")
    magic, version, dims, frames = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise ManifestError(f"{path}: not a feature file")
    if version != FEATURE_VERSION:
        raise ManifestError(f"{path}: unsupported feature file version {version}")
    body = raw[_FEATURE_HEADER.size:]
    if len(body) != 4 * dims * frames:
        raise ManifestError(f"{path}: expected {dims}x{frames} floats, file size disagrees")
    return np.frombuffer(body, dtype="<f4").reshape(dims, frames).astype(np.float64)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass
class UtteranceRecord:
    id: str
    ratings: list[float]
    split: str = "train"
    feature_path: str | None = None
    waveform_path: str | None = None
    features: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        validate_ratings(self.ratings, self.id)
        if self.split not in SPLITS:
            raise ManifestError(f"{self.id}: unknown split {self.split!r}")

    def load(self) -> np.ndarray:
        if self.features is None:
            if self.feature_path is None:
                raise ManifestError(f"{self.id}: no features attached")
            self.features = read_features(self.feature_path)
        return self.features


@dataclass
class Segment:
    feature_path: str | None = None
    duration_s: float = 1.0
    ratings: list[float] | None = None  # ground truth, synthetic corpora only
    features: np.ndarray | None = field(default=None, repr=False, compare=False)

    def load(self) -> np.ndarray:
        if self.features is None:
            if self.feature_path is None:
                raise ManifestError("segment has neither features nor a feature path")
            self.features = read_features(self.feature_path)
        return self.features


@dataclass
class SessionRecord:
    id: str
    couple_id: str
    speaker_gender: str
    segments: list[Segment]
    behavior_ratings: list[float | None] = field(default_factory=lambda: [None] * 5)
    binary_labels: list[int | None] = field(default_factory=lambda: [None] * 5)

    @property
    def mask(self) -> list[bool]:
        return [lab is not None for lab in self.binary_labels]

    def label_array(self) -> np.ndarray:
        return np.array([0 if lab is None else lab for lab in self.binary_labels], dtype=float)

    def mask_array(self) -> np.ndarray:
        return np.array(self.mask, dtype=bool)

    def features(self) -> np.ndarray:
        """All segments concatenated in time order, (84, total_frames)."""
        if not self.segments:
            raise InsufficientDataError(f"session {self.id} has no segments")
        return np.concatenate([s.load() for s in self.segments], axis=1).astype(np.float64)


def validate_ratings(ratings: Sequence[float], ident: str = "") -> None:
    if len(ratings) != len(EMOTIONS):
        raise ManifestError(f"{ident}: expected {len(EMOTIONS)} ratings, got {len(ratings)}")
    for r in ratings:
        if not 0.0 <= float(r) <= 3.0:
            raise ManifestError(f"{ident}: rating {r} outside [0, 3]")


def binarize_emotions(ratings: Sequence[float]) -> list[int]:
    """Presence bit per emotion: rating strictly greater than zero."""
    validate_ratings(ratings)
    return [int(float(r) > 0.0) for r in ratings]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None:
        return None
    q = Path(p)
    return str(q if q.is_absolute() else base / q)


def _utterance_from(obj: dict, base: Path, check_files: bool) -> UtteranceRecord:
    try:
        rec = UtteranceRecord(id=str(obj["id"]), ratings=[float(r) for r in obj["ratings"]],
                              split=obj.get("split", "train"),
                              feature_path=_resolve(base, obj.get("feature_path")),
                              waveform_path=_resolve(base, obj.get("waveform_path")))
    except KeyError as exc:
        raise ManifestError(f"record missing field {exc}") from None
    if rec.feature_path is None and rec.waveform_path is None:
        raise ManifestError(f"{rec.id}: needs feature_path or waveform_path")
    if check_files:
        for p in (rec.feature_path, rec.waveform_path):
            if p is not None and not Path(p).exists():
                raise ManifestError(f"{rec.id}: missing file {p}")
    return rec


def _session_from(obj: dict, base: Path, check_files: bool) -> SessionRecord:
    try:
        segs = [Segment(feature_path=_resolve(base, s["feature_path"]),
                        duration_s=float(s.get("duration_s", 1.0)),
                        ratings=s.get("ratings"))
                for s in obj["segments"]]
        rec = SessionRecord(id=str(obj["id"]), couple_id=str(obj["couple_id"]),
                            speaker_gender=str(obj.get("speaker_gender", "U")), segments=segs,
                            behavior_ratings=list(obj.get("behavior_ratings") or [None] * 5),
                            binary_labels=list(obj.get("binary_labels") or [None] * 5))
    except KeyError as exc:
        raise ManifestError(f"record missing field {exc}") from None
    if len(rec.behavior_ratings) != 5 or len(rec.binary_labels) != 5:
        raise ManifestError(f"{rec.id}: expected 5 behavior ratings and labels")
    for r in rec.behavior_ratings:
        if r is not None and not 1.0 <= float(r) <= 9.0:
            raise ManifestError(f"{rec.id}: behavior rating {r} outside [1, 9]")
    for lab in rec.binary_labels:
        if lab not in (None, 0, 1):
            raise ManifestError(f"{rec.id}: binary label must be 0, 1 or null")
    if check_files:
        for s in segs:
            if not Path(s.feature_path).exists():
                raise ManifestError(f"{rec.id}: missing file {s.feature_path}")
    return rec


def load_manifest(path: str | Path, check_files: bool = True) -> list:
    """Parse and validate a manifest; returns utterance or session records in file order."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        return []
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: bad header: {exc}") from None
    if header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: missing manifest header")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {header.get('version')}")
    kind = header.get("kind")
    if kind not in ("utterance", "session"):
        raise ManifestError(f"{path}: unknown record kind {kind!r}")
    build = _utterance_from if kind == "utterance" else _session_from
    records, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        rec = build(obj, path.parent, check_files)
        if rec.id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {rec.id}")
        seen.add(rec.id)
        records.append(rec)
    return records


def _rel(p: str | None, base: Path) -> str | None:
    if p is None:
        return None
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)


def write_manifest(path: str | Path, records: Sequence, kind: str | None = None) -> None:
    path = Path(path)
    if kind is None:
        kind = "session" if records and isinstance(records[0], SessionRecord) else "utterance"
    base = path.parent
    out = [json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "kind": kind})]
    for r in records:
        if kind == "utterance":
            obj = {"id": r.id, "ratings": [float(x) for x in r.ratings], "split": r.split}
            if r.feature_path:
                obj["feature_path"] = _rel(r.feature_path, base)
            if r.waveform_path:
                obj["waveform_path"] = _rel(r.waveform_path, base)
        else:
            obj = {"id": r.id, "couple_id": r.couple_id, "speaker_gender": r.speaker_gender,
                   "segments": [{"feature_path": _rel(s.feature_path, base),
                                 "duration_s": s.duration_s,
                                 **({"ratings": s.ratings} if s.ratings is not None else {})}
                                for s in r.segments],
                   "behavior_ratings": r.behavior_ratings, "binary_labels": r.binary_labels}
        out.append(json.dumps(obj))
    path.write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# behavior labels
# ---------------------------------------------------------------------------


def binarize_behaviors(sessions: Sequence[SessionRecord], behavior: int, n_extreme: int,
                       per_gender: bool = True, fallback: bool = True) -> dict[str, int]:
    """Label the ``n_extreme`` lowest-rated sessions 0 and the highest 1.

    Ranking is by (rating, session id), so ties at the cut are deterministic.
    Groups smaller than ``2 * n_extreme`` fall back to a median split when
    ``fallback`` is set. Sessions that are not returned stay masked.
    """
    groups: dict[str, list[SessionRecord]] = {}
    for s in sessions:
        if s.behavior_ratings[behavior] is None:
            continue
        key = s.speaker_gender if per_gender else "all"
        groups.setdefault(key, []).append(s)
    labels: dict[str, int] = {}
    for key in sorted(groups):
        ranked = sorted(groups[key], key=lambda s: (float(s.behavior_ratings[behavior]), s.id))
        n = n_extreme
        if len(ranked) < 2 * n_extreme:
            if not fallback or len(ranked) < 2:
                raise InsufficientDataError(
                    f"group {key!r} has {len(ranked)} rated sessions, need {2 * n_extreme}")
            n = len(ranked) // 2
        for s in ranked[:n]:
            labels[s.id] = 0
        for s in ranked[len(ranked) - n:]:
            labels[s.id] = 1
    return labels


def apply_behavior_labels(sessions: Sequence[SessionRecord], n_extreme: int,
                          per_gender: bool = True) -> list[SessionRecord]:
    """Copies of ``sessions`` with binary labels set for every behavior that has ratings."""
    out = [replace(s, binary_labels=[None] * 5) for s in sessions]
    for b in range(len(BEHAVIORS)):
        if not any(s.behavior_ratings[b] is not None for s in sessions):
            continue
        labs = binarize_behaviors(sessions, b, n_extreme, per_gender)
        for s in out:
            if s.id in labs:
                s.binary_labels[b] = labs[s.id]
    return out


def shuffle_labels(sessions: Sequence[SessionRecord], seed: int) -> list[SessionRecord]:
    """Permute each behavior's labels across its labeled sessions (control runs)."""
    rng = np.random.default_rng(seed)
    out = [replace(s, binary_labels=list(s.binary_labels)) for s in sessions]
    for b in range(len(BEHAVIORS)):
        idx = [i for i, s in enumerate(out) if s.binary_labels[b] is not None]
        perm = rng.permutation(len(idx))
        vals = [out[i].binary_labels[b] for i in idx]
        for i, j in zip(idx, perm):
            out[i].binary_labels[b] = vals[j]
    return out


# ---------------------------------------------------------------------------
# batching and segmentation
# ---------------------------------------------------------------------------


class BalancedSampler:
    """Batches with equal class counts.

    Each class is drawn from its own shuffled pool and the pool is only
    refilled once exhausted, so within an epoch no example repeats before
    every example of its class has been used.
    """

    def __init__(self, labels: Sequence[int], batch_size: int, rng: np.random.Generator):
        labels = np.asarray(labels, dtype=int)
        self.pos = np.flatnonzero(labels == 1)
        self.neg = np.flatnonzero(labels == 0)
        if self.pos.size == 0 or self.neg.size == 0:
            raise InsufficientDataError("class balancing needs both classes")
        if batch_size < 2:
            raise ValueError("balanced batches need batch_size >= 2")
        self.half = batch_size // 2
        self.rng = rng
        self._pools = {0: [], 1: []}

    def _draw(self, cls: int, k: int) -> list[int]:
        src = self.pos if cls == 1 else self.neg
        out = []
        while len(out) < k:
            if not self._pools[cls]:
                self._pools[cls] = list(self.rng.permutation(src))
            out.append(int(self._pools[cls].pop()))
        return out

    def n_batches(self) -> int:
        return int(np.ceil(max(self.pos.size, self.neg.size) / self.half))

    def batch(self) -> list[int]:
        idx = self._draw(1, self.half) + self._draw(0, self.half)
        return [idx[i] for i in self.rng.permutation(len(idx))]

    def epoch(self) -> Iterator[list[int]]:
        for _ in range(self.n_batches()):
            yield self.batch()


def balance_batch(labels: Sequence[int], batch_size: int, seed: int) -> list[int]:
    """One class-balanced batch of indices into ``labels``."""
    return BalancedSampler(labels, batch_size, np.random.default_rng(seed)).batch()


def segment_utterance(features: np.ndarray, seg_s: float = 1.0, mode: str = "tile_all",
                      rng: np.random.Generator | None = None,
                      frame_shift_s: float = FRAME_SHIFT_S) -> np.ndarray:
    """Cut a (dims, T) sequence into fixed-length windows -> (n, dims, seg_frames).

    ``random_one`` picks one uniformly placed window; ``tile_all`` tiles
    non-overlapping windows and right-aligns the last one. Sequences shorter
    than a window are wrap-padded to full length.
    """
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[1] < 1:
        raise ValueError("empty feature sequence")
    seg = int(round(seg_s / frame_shift_s))
    T = feats.shape[1]
    if T < seg:
        return np.pad(feats, ((0, 0), (0, seg - T)), mode="wrap")[None]
    if mode == "random_one":
        rng = rng or np.random.default_rng()
        start = int(rng.integers(0, T - seg + 1))
        return feats[None, :, start:start + seg]
    if mode != "tile_all":
        raise ValueError(f"unknown segmentation mode {mode!r}")
    starts = list(range(0, T - seg + 1, seg))
    if starts[-1] + seg < T:
        starts.append(T - seg)
    return np.stack([feats[:, s:s + seg] for s in starts])


def session_windows(session: SessionRecord, seg_frames: int = SEGMENT_FRAMES) -> np.ndarray:
    """Non-overlapping 1 s windows over the session's concatenated segments -> (n, 84, seg)."""
    feats = session.features()
    n = feats.shape[1] // seg_frames
    if n == 0:
        raise InsufficientDataError(f"session {session.id} is shorter than one window")
    return np.ascontiguousarray(
        feats[:, :n * seg_frames].reshape(feats.shape[0], n, seg_frames).transpose(1, 0, 2))


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    index: int
    train_couples: tuple[str, ...]
    valid_couples: tuple[str, ...]
    test_couples: tuple[str, ...]

    def split(self, sessions: Sequence[SessionRecord]):
        """(train, valid, test) session lists for this fold."""
        roles = {c: 0 for c in self.train_couples}
        roles.update({c: 1 for c in self.valid_couples})
        roles.update({c: 2 for c in self.test_couples})
        parts = ([], [], [])
        for s in sessions:
            parts[roles[s.couple_id]].append(s)
        return parts


def cv_split(sessions: Sequence[SessionRecord], k_couples_out: int = 4, n_valid_couples: int = 10,
             seed: int = 0) -> list[Fold]:
    """Leave-k-couples-out folds, each with ``n_valid_couples`` random validation couples."""
    couples = sorted({s.couple_id for s in sessions})
    if len(couples) < k_couples_out + n_valid_couples + 1:
        raise InsufficientDataError(
            f"{len(couples)} couples cannot support k={k_couples_out} with {n_valid_couples} validation couples")
    rng = np.random.default_rng(seed)
    order = [couples[i] for i in rng.permutation(len(couples))]
    folds = []
    for fi, start in enumerate(range(0, len(order), k_couples_out)):
        test = tuple(sorted(order[start:start + k_couples_out]))
        rest = sorted(c for c in couples if c not in test)
        pick = np.random.default_rng([seed, fi]).choice(len(rest), size=n_valid_couples, replace=False)
        valid = tuple(sorted(rest[i] for i in pick))
        train = tuple(c for c in rest if c not in valid)
        folds.append(Fold(fi, train, valid, test))
    return folds
