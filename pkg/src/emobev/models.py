"""The emotion and behavior networks plus the checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"EMBVCKPT" | uint32 version | uint32 header_len | JSON header
    | float64 parameter blobs in header order | sha256 of everything before it

The header carries the model kind, its constructor config, parameter names,
shapes and trainable flags, the init seed, the training config and history.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .dsp import N_FEATURES
from .nn import (
    GRU,
    AdaptiveMaxPool1d,
    AvgPool1d,
    Conv1d,
    Dropout,
    LayerSpec,
    Linear,
    Module,
    PReLU,
    ReLU,
    receptive_field,
)
from .tensor import Tensor, as_tensor, relu, take

N_EMOTIONS = 6
N_BEHAVIORS = 5

# (in, out, kernel, stride) of the emotion-recognition conv stack
ER_CONVS = ((N_FEATURES, 96, 10, 2), (96, 96, 5, 2), (96, 96, 5, 2), (96, 128, 3, 2))
# trainable convs of the reduced-context model, and their dropout rates
REDUCED_CONVS = ((128, 96, 3, 2), (96, 96, 3, 2), (96, 96, 3, 1), (96, 128, 3, 1))
REDUCED_DROPOUT = (0.4, 0.4, 0.4, 0.5)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _pool_flat(x: Tensor) -> Tensor:
    """Adaptive max pool over time then drop the length-1 axis: (B, C, L) -> (B, C)."""
    y = AdaptiveMaxPool1d()(x)
    return y.reshape(y.shape[0], y.shape[1])


def conv_specs(n: int = 4) -> list[LayerSpec]:
    return [LayerSpec("conv", k, s, 0, i, o) for i, o, k, s in ER_CONVS[:n]]


def er_receptive_field(n_layers: int = 4) -> int:
    return receptive_field(conv_specs(n_layers))[0]


class Normalizer(Module):
    """Fixed per-dimension standardization of the 84 input features."""

    def __init__(self, dims: int = N_FEATURES):
        self.mean = Tensor(np.zeros(dims))
        self.std = Tensor(np.ones(dims))

    def fit(self, frames: np.ndarray) -> None:
        """``frames``: (dims, n_frames) pooled over the training set."""
        self.mean.data = frames.mean(axis=1)
        self.std.data = np.maximum(frames.std(axis=1), 1e-6)

    def copy_from(self, other: Normalizer) -> None:
        self.mean.data = other.mean.data.copy()
        self.std.data = other.std.data.copy()

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        return (x - self.mean.data[:, None]) / self.std.data[:, None]


class ConvBlock(Module):
    """Conv1d -> optional AvgPool1d -> ReLU -> optional Dropout."""

    def __init__(self, in_ch, out_ch, kernel, stride, rng, pool: bool = False, p_drop: float = 0.0):
        self.conv = Conv1d(in_ch, out_ch, kernel, stride, rng=rng)
        self.pool = AvgPool1d(2, 2) if pool else None
        self.drop = Dropout(p_drop, rng=np.random.default_rng(rng.integers(2**32))) if p_drop else None

    def specs(self) -> list[LayerSpec]:
        out = [self.conv.spec()]
        if self.pool is not None:
            out.append(self.pool.spec())
        return out

    def forward(self, x):
        y = self.conv(x)
        if self.pool is not None:
            y = self.pool(y)
        y = relu(y)
        if self.drop is not None:
            y = self.drop(y)
        return y


def _er_blocks(rng) -> list[ConvBlock]:
    return [ConvBlock(i, o, k, s, rng) for i, o, k, s in ER_CONVS]


def _copy_block(dst: ConvBlock, src: ConvBlock) -> None:
    dst.conv.weight.data = src.conv.weight.data.copy()
    dst.conv.bias.data = src.conv.bias.data.copy()


def _run(blocks, x):
    for b in blocks:
        x = b(x)
    return x


class BaseModel(Module):
    kind = "base"

    def config(self) -> dict:
        return {}


class ERModel(BaseModel):
    """Four strided convs, adaptive max pool, dense 128-128-128-6."""

    kind = "er"

    def __init__(self, seed=0):
        rng = _rng(seed)
        self.norm = Normalizer()
        self.convs = _er_blocks(rng)
        self.fc1 = Linear(128, 128, rng)
        self.fc2 = Linear(128, 128, rng)
        self.out = Linear(128, N_EMOTIONS, rng)

    def feature_map(self, x, l: int = 4) -> Tensor:
        """Output of conv layer ``l`` (after its ReLU) for raw features x (B, 84, L)."""
        x = as_tensor(self.norm(x))
        return _run(self.convs[:l], x)

    def embed(self, x) -> Tensor:
        return _pool_flat(self.feature_map(x))

    def penultimate(self, x) -> Tensor:
        return relu(self.fc2(relu(self.fc1(self.embed(x)))))

    def forward(self, x) -> Tensor:
        return self.out(self.penultimate(x))

    def stack(self) -> list[LayerSpec]:
        return conv_specs() + [LayerSpec("adaptive_max_pool")]


class ECModel(BaseModel):
    """Frozen emotion network up to its penultimate layer plus a 2-way head."""

    kind = "ec"

    def __init__(self, er: ERModel | None = None, emotion: int = 0, seed=0):
        rng = _rng(seed)
        self.emotion = emotion
        self.er = (er if er is not None else ERModel(0)).freeze()
        self.h1 = Linear(128, 64, rng)
        self.a1 = PReLU()
        self.h2 = Linear(64, 64, rng)
        self.a2 = PReLU()
        self.h3 = Linear(64, 2, rng)

    def config(self) -> dict:
        return {"emotion": self.emotion}

    def head(self, z) -> Tensor:
        return self.h3(self.a2(self.h2(self.a1(self.h1(z)))))

    def forward(self, x) -> Tensor:
        return self.head(self.er.penultimate(x))


class _BehaviorHead(Module):
    def __init__(self, rng, sizes=(128, 64)):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes, sizes[1:] + (N_BEHAVIORS,))]

    def forward(self, z):
        for i, layer in enumerate(self.layers):
            z = layer(z)
            if i < len(self.layers) - 1:
                z = relu(z)
        return z


def _last_state(gru: GRU, seq) -> Tensor:
    outputs, _ = gru(seq)
    return take(outputs, (slice(None), outputs.shape[1] - 1))


class BBPContextModel(BaseModel):
    """GRU over per-second 6-bit emotion vectors -> 5 behavior logits."""

    kind = "bbp"

    def __init__(self, seed=0, hidden: int = 128):
        rng = _rng(seed)
        self.hidden = hidden
        self.gru = GRU(N_EMOTIONS, hidden, 2, rng)
        self.head = _BehaviorHead(rng, (hidden, 64))

    def config(self) -> dict:
        return {"hidden": self.hidden}

    def forward(self, seq) -> Tensor:
        """``seq``: (T, 6) or (1, T, 6) -> (1, 5)."""
        seq = as_tensor(seq)
        if seq.ndim == 2:
            seq = seq.reshape(1, *seq.shape)
        return self.head(_last_state(self.gru, seq))

    def frozen_features(self, seq) -> np.ndarray:
        return np.asarray(seq, dtype=np.float64)

    forward_frozen = forward


class EBPContextModel(BaseModel):
    """Per-segment conv embeddings fed to a GRU -> 5 behavior logits.

    The first ``l`` conv layers come from a trained emotion network and stay
    frozen; the rest are trained. ``l = 0`` trains the whole stack from
    scratch.
    """

    kind = "ebp"

    def __init__(self, l: int = 4, er: ERModel | None = None, seed=0, hidden: int = 128):
        if not 0 <= l <= 4:
            raise ValueError("l must be in 0..4")
        rng = _rng(seed)
        self.l, self.hidden = l, hidden
        self.norm = Normalizer()
        self.convs = _er_blocks(rng)
        if er is not None:
            self.norm.copy_from(er.norm)
            for dst, src in zip(self.convs[:l], er.convs[:l]):
                _copy_block(dst, src)
        for b in self.convs[:l]:
            b.freeze()
        self.gru = GRU(128, hidden, 2, rng)
        self.head = _BehaviorHead(rng, (hidden, 64))

    def config(self) -> dict:
        return {"l": self.l, "hidden": self.hidden}

    def frozen_features(self, windows) -> np.ndarray:
        """Frozen part applied to (S, 84, 100) segments; cacheable across epochs."""
        x = as_tensor(self.norm(windows))
        return _run(self.convs[:self.l], x).data

    def forward_frozen(self, cached) -> Tensor:
        """Trainable remainder on the output of :meth:`frozen_features` -> (1, 5)."""
        z = _pool_flat(_run(self.convs[self.l:], as_tensor(cached)))
        return self.head(_last_state(self.gru, z.reshape(1, *z.shape)))

    def forward(self, windows) -> Tensor:
        return self.forward_frozen(self.frozen_features(windows))


class ReducedContextModel(BaseModel):
    """Behavior classifier whose only temporal context is its receptive field.

    A frozen copy of the emotion conv stack runs over the whole session, four
    trainable convs follow with ``n_avg_pools`` average pools after the first
    convs, then one adaptive max pool discards global order.
    """

    kind = "reduced"

    def __init__(self, n_avg_pools: int = 0, er: ERModel | None = None, seed=0):
        if not 0 <= n_avg_pools <= 4:
            raise ValueError("n_avg_pools must be in 0..4")
        rng = _rng(seed)
        self.n_avg_pools = n_avg_pools
        self.norm = Normalizer()
        self.prefix = _er_blocks(rng)
        if er is not None:
            self.norm.copy_from(er.norm)
            for dst, src in zip(self.prefix, er.convs):
                _copy_block(dst, src)
        for b in self.prefix:
            b.freeze()
        self.blocks = [ConvBlock(i, o, k, s, rng, pool=j < n_avg_pools, p_drop=p)
                       for j, ((i, o, k, s), p) in enumerate(zip(REDUCED_CONVS, REDUCED_DROPOUT))]
        self.head = _BehaviorHead(rng, (128, 128, 64))

    def config(self) -> dict:
        return {"n_avg_pools": self.n_avg_pools}

    def stack(self) -> list[LayerSpec]:
        specs = conv_specs()
        for b in self.blocks:
            specs += b.specs()
        return specs + [LayerSpec("adaptive_max_pool")]

    def receptive_field(self) -> tuple[int, float]:
        return receptive_field(self.stack())

    def min_frames(self) -> int:
        """Shortest input yielding one output position (padding-free stack)."""
        return self.receptive_field()[0]

    def frozen_features(self, session_features: np.ndarray) -> np.ndarray:
        """Frozen prefix over a whole (84, T) session, zero-padded to the receptive field."""
        x = self.norm(session_features)
        need = self.min_frames()
        if x.shape[1] < need:
            x = np.pad(x, ((0, 0), (0, need - x.shape[1])))
        return _run(self.prefix, as_tensor(x[None])).data

    def pre_pool(self, cached) -> Tensor:
        """Trainable convs up to (not including) the adaptive max pool."""
        return _run(self.blocks, as_tensor(cached))

    def forward_frozen(self, cached) -> Tensor:
        return self.head(_pool_flat(self.pre_pool(cached)))

    def forward(self, session_features) -> Tensor:
        return self.forward_frozen(self.frozen_features(session_features))


MODEL_KINDS = {m.kind: m for m in (ERModel, ECModel, BBPContextModel, EBPContextModel, ReducedContextModel)}


def build_model(kind: str, config: dict | None = None, seed=0) -> BaseModel:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    return MODEL_KINDS[kind](seed=seed, **(config or {}))


def param_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def frozen_checksum(model: Module) -> str:
    return param_checksum([p for p in model.parameters() if not p.requires_grad])


def state_dict(model: Module) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def load_state(model: Module, state: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        p.data = state[name].copy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"EMBVCKPT"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: BaseModel, path: str | Path, *, seed=None, train_config: dict | None = None,
                    history: list | None = None) -> None:
    named = list(model.named_parameters())
    header = {"kind": model.kind, "config": model.config(), "seed": seed,
              "train_config": train_config or {}, "history": history or [],
              "params": [{"name": n, "shape": list(p.shape), "trainable": bool(p.requires_grad)}
                         for n, p in named]}
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = _PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(hbytes)) + hbytes
    body += b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in named)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen])
    offset = _PREFIX.size + hlen
    state = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=offset)
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        offset += 8 * n
    if offset != len(body):
        raise CheckpointError(f"{path}: parameter blobs do not match header")
    return header, state


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> tuple[BaseModel, dict]:
    """Rebuild the model stored at ``path``; returns (model, header)."""
    header, state = read_checkpoint(path)
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(f"{path}: holds a {header['kind']!r} model, expected {expect_kind!r}")
    model = build_model(header["kind"], header["config"])
    named = dict(model.named_parameters())
    if set(named) != set(state):
        raise CheckpointError(f"{path}: parameter names do not match a {header['kind']!r} model")
    for entry in header["params"]:
        p = named[entry["name"]]
        if list(p.shape) != entry["shape"]:
            raise CheckpointError(f"{path}: shape mismatch for {entry['name']}")
        p.data = state[entry["name"]]
        p.requires_grad = entry["trainable"]
    return model, header
