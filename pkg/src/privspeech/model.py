"""Teacher / student networks with hand-derived per-example gradients.

Architecture::

    a = act(W_audio @ flatten(X) + b_audio)            # audio encoder
    p = act(W_priv  @ m' + b_priv)                     # privileged encoder (multimodal only)
    probs = softmax(W_head @ [a; p] + b_head)          # fusion head

Gradients of dense layers are rank-one per example, so per-example norms and
clipped sums over a batch are computed from the factors without materializing
one full gradient per example (see :class:`BatchGrad`).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CE_FLOOR = 1e-12
CKPT_MAGIC = b"DPM1"
CKPT_VERSION = 1

AUDIO_W, AUDIO_B = "audio.W", "audio.b"
PRIV_W, PRIV_B = "priv.W", "priv.b"
HEAD_W, HEAD_B = "head.W", "head.b"


class ShapeError(ValueError):
    pass


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        t = self.tensors
        h, F = t[AUDIO_W].shape
        if t[AUDIO_B].shape != (h,):
            raise ShapeError("audio bias shape")
        width = h
        if self.multimodal:
            h_m, _ = t[PRIV_W].shape
            if t[PRIV_B].shape != (h_m,):
                raise ShapeError("privileged bias shape")
            width += h_m
        K, head_in = t[HEAD_W].shape
        if head_in != width or t[HEAD_B].shape != (K,):
            raise ShapeError("head shape")
        for name, v in t.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def multimodal(self) -> bool:
        return PRIV_W in self.tensors

    @property
    def K(self) -> int:
        return self.tensors[HEAD_B].shape[0]

    @property
    def F(self) -> int:
        return self.tensors[AUDIO_W].shape[1]

    @property
    def h(self) -> int:
        return self.tensors[AUDIO_W].shape[0]

    @property
    def h_m(self) -> int:
        return self.tensors[PRIV_W].shape[0] if self.multimodal else 0

    @property
    def d_m(self) -> int:
        return self.tensors[PRIV_W].shape[1] if self.multimodal else 0

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.activation)

    def metadata(self) -> dict:
        return {
            "K": self.K, "F": self.F, "h": self.h, "h_m": self.h_m, "d_m": self.d_m,
            "activation": self.activation, "multimodal": self.multimodal,
        }


def init_params(
    K: int,
    F: int,
    h: int = 128,
    d_m: int = 0,
    h_m: int = 16,
    activation: str = "relu",
    seed: int = 0,
) -> ModelParams:
    """Glorot-uniform weights, zero biases. ``d_m=0`` builds an audio-only net."""
    rng = np.random.default_rng(seed)

    def glorot(fan_out, fan_in):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_out, fan_in))

    t = {AUDIO_W: glorot(h, F), AUDIO_B: np.zeros(h)}
    width = h
    if d_m:
        t[PRIV_W] = glorot(h_m, d_m)
        t[PRIV_B] = np.zeros(h_m)
        width += h_m
    t[HEAD_W] = glorot(K, width)
    t[HEAD_B] = np.zeros(K)
    return ModelParams(t, activation)


def _act(z, kind):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(z, a, kind):
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(z.dtype)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(params: ModelParams, X, M):
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(X.shape[0], -1) if X.ndim == 3 else X
    if X.ndim != 2 or X.shape[1] != params.F:
        raise ShapeError(f"expected flattened features of size {params.F}, got {X.shape}")
    if params.multimodal:
        if M is None:
            raise ShapeError("multimodal model needs a privileged input (zero it for audio-only queries)")
        M = np.asarray(M, dtype=np.float64).reshape(X.shape[0], -1)
        if M.shape[1] != params.d_m:
            raise ShapeError(f"privileged input has dim {M.shape[1]}, expected {params.d_m}")
    else:
        M = None
    return X, M


def forward_batch(params: ModelParams, X, M=None) -> dict:
    """Forward pass over a batch; returns every intermediate needed by backprop."""
    X, M = _as_batch(params, X, M)
    t, kind = params.tensors, params.activation
    z1 = X @ t[AUDIO_W].T + t[AUDIO_B]
    a = _act(z1, kind)
    cache = {"X": X, "z1": z1, "a": a, "M": M}
    if M is not None:
        z2 = M @ t[PRIV_W].T + t[PRIV_B]
        pm = _act(z2, kind)
        cache.update(z2=z2, pm=pm)
        H = np.concatenate([a, pm], axis=1)
    else:
        H = a
    logits = H @ t[HEAD_W].T + t[HEAD_B]
    cache.update(H=H, logits=logits, probs=softmax(logits))
    return cache


def predict_proba(params: ModelParams, X, M=None) -> np.ndarray:
    return forward_batch(params, X, M)["probs"]


def forward_teacher(params: ModelParams, x, m=None) -> np.ndarray:
    """Class probabilities for one example; ``m`` is required for multimodal teachers."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    M = None if m is None else np.asarray(m, dtype=np.float64).reshape(1, -1)
    return forward_batch(params, x, M)["probs"][0]


def forward_student(params: ModelParams, x) -> np.ndarray:
    if params.multimodal:
        raise ShapeError("student networks are audio-only")
    return forward_teacher(params, x)


def priv_dropout(m: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Zero the whole privileged vector with probability ``p``."""
    if not 0 <= p <= 1:
        raise ValueError("dropout probability must lie in [0, 1]")
    if rng.random() < p:
        return np.zeros_like(m)
    return m


def weighted_ce_loss(probs: np.ndarray, y: int, w: float) -> float:
    return float(w * -np.log(max(float(probs[y]), CE_FLOOR)))


# --------------------------------------------------------------------------
# gradients


@dataclass
class PerExampleGrad:
    tensors: dict[str, np.ndarray]
    l2_norm: float = field(default=None)

    def __post_init__(self):
        if self.l2_norm is None:
            self.l2_norm = float(np.sqrt(sum(np.sum(v * v) for v in self.tensors.values())))


@dataclass
class BatchGrad:
    """Factorized per-example gradients of a batch.

    For example ``i`` the gradient of a dense layer is ``outer(delta_i, input_i)``
    for the weight and ``delta_i`` for the bias.
    """

    layers: dict[str, tuple[np.ndarray, np.ndarray]]  # layer -> (deltas (B,out), inputs (B,in))
    losses: np.ndarray
    probs: np.ndarray

    @property
    def size(self) -> int:
        return self.losses.shape[0]

    def norms(self) -> np.ndarray:
        sq = np.zeros(self.size)
        for d, x in self.layers.values():
            sq += np.sum(d * d, axis=1) * (np.sum(x * x, axis=1) + 1.0)
        return np.sqrt(sq)

    def weighted_sum(self, coef: np.ndarray) -> dict[str, np.ndarray]:
        """``sum_i coef[i] * g_i`` as named tensors."""
        out = {}
        for layer, (d, x) in self.layers.items():
            dc = d * coef[:, None]
            out[f"{layer}.W"] = dc.T @ x
            out[f"{layer}.b"] = dc.sum(axis=0)
        return out

    def example(self, i: int) -> PerExampleGrad:
        t = {}
        for layer, (d, x) in self.layers.items():
            t[f"{layer}.W"] = np.outer(d[i], x[i])
            t[f"{layer}.b"] = d[i].copy()
        return PerExampleGrad(t)


def backward_from_logits(params: ModelParams, cache: dict, d_logits: np.ndarray) -> dict:
    """Factored per-example layer gradients given ``dL_i/dlogits_i``."""
    t, kind = params.tensors, params.activation
    d_H = d_logits @ t[HEAD_W]
    h = params.h
    d_z1 = d_H[:, :h] * _act_grad(cache["z1"], cache["a"], kind)
    layers = {"head": (d_logits, cache["H"]), "audio": (d_z1, cache["X"])}
    if params.multimodal:
        d_z2 = d_H[:, h:] * _act_grad(cache["z2"], cache["pm"], kind)
        layers["priv"] = (d_z2, cache["M"])
    return layers


def batch_backward(params: ModelParams, X, M, y, w) -> BatchGrad:
    """Per-example gradients of ``w_i * CE(y_i, p(x_i, m_i))`` in factored form."""
    cache = forward_batch(params, X, M)
    y = np.asarray(y, dtype=np.int64)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), y.shape)
    probs = cache["probs"]
    B = y.shape[0]
    py = probs[np.arange(B), y]
    losses = w * -np.log(np.maximum(py, CE_FLOOR))

    onehot = np.zeros_like(probs)
    onehot[np.arange(B), y] = 1.0
    # the floor makes the loss flat where p_y < CE_FLOOR
    live = (py >= CE_FLOOR).astype(np.float64)
    d_logits = (w * live)[:, None] * (probs - onehot)
    return BatchGrad(backward_from_logits(params, cache, d_logits), losses, probs)


def per_example_grad(params: ModelParams, x, m, y: int, w: float = 1.0) -> PerExampleGrad:
    """Exact gradient of the weighted CE loss for a single example."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    M = None if m is None else np.asarray(m, dtype=np.float64).reshape(1, -1)
    return batch_backward(params, x, M, [y], [w]).example(0)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path: str | Path) -> Path:
    """Write a DPM1 checkpoint and its ``.meta.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params.tensors))]
    for name in params.names():
        v = params.tensors[name]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", v.ndim) + struct.pack(f"<{v.ndim}I", *v.shape))
        chunks.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    meta = path.with_name(path.name + ".meta.json")
    meta.write_text(json.dumps(params.metadata(), indent=1, sort_keys=True))
    return meta


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a DPM1 checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * size
    meta_path = path.with_name(path.name + ".meta.json")
    activation = "relu"
    if meta_path.exists():
        activation = json.loads(meta_path.read_text())["activation"]
    return ModelParams(tensors, activation)


def checkpoint_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
