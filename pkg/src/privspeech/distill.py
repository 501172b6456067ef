"""Offline teacher labeling of the auxiliary set and student distillation.

The student only ever sees auxiliary features, auxiliary labels and the
stored teacher probabilities. Nothing in :func:`train_student` accepts the
private data or teacher parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import features as fe
from . import optim
from .datamodel import Dataset
from .dpsgd import ModelConfig, prepare_inputs
from .model import ModelParams, backward_from_logits, forward_batch, init_params, softmax

PROB_FLOOR = 1e-12
QUERY_MODES = ("audio_only", "privileged")


class OneShotViolation(FileExistsError):
    pass


class QueryModeError(ValueError):
    pass


class MissingTeacherProbability(KeyError):
    pass


@dataclass(frozen=True)
class KdConfig:
    tau: float = 2.0
    alpha: float = 0.7
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad batch size or epoch count")


@dataclass
class TeacherProbFile:
    K: int
    mode: str
    teacher_hash: str
    ids: list[str]
    labels: np.ndarray
    probs: np.ndarray  # (n, K)

    def __post_init__(self):
        if self.mode not in QUERY_MODES:
            raise QueryModeError(f"unknown query mode {self.mode!r}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (len(self.ids), self.K):
            raise ValueError("probability table shape does not match ids and K")
        if len(self.ids) and np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("teacher probability rows must sum to 1")
        self._row = {i: r for r, i in enumerate(self.ids)}

    def lookup(self, ids) -> np.ndarray:
        try:
            return self.probs[[self._row[i] for i in ids]]
        except KeyError as exc:
            raise MissingTeacherProbability(f"no teacher probabilities for {exc.args[0]!r}") from None

    def dumps(self) -> str:
        lines = [f"#K={self.K} mode={self.mode} teacher={self.teacher_hash}"]
        for i, y, p in zip(self.ids, self.labels, self.probs):
            lines.append(",".join([i, str(int(y))] + [f"{v:.9g}" for v in p]))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        """Write exactly once; an existing file is never overwritten."""
        try:
            with open(path, "x", encoding="utf-8") as fh:
                fh.write(self.dumps())
        except FileExistsError:
            raise OneShotViolation(f"{path} already exists; teacher labels are one-shot") from None

    @classmethod
    def read(cls, path: str | Path) -> "TeacherProbFile":
        text = Path(path).read_text(encoding="utf-8").splitlines()
        header = dict(tok.split("=", 1) for tok in text[0].lstrip("#").split())
        ids, labels, rows = [], [], []
        for line in text[1:]:
            if not line.strip():
                continue
            parts = line.split(",")
            ids.append(parts[0])
            labels.append(int(parts[1]))
            rows.append([float(v) for v in parts[2:]])
        K = int(header["K"])
        return cls(K, header["mode"], header["teacher"], ids, np.array(labels),
                   np.array(rows).reshape(len(ids), K))


def label_aux(
    teacher: ModelParams,
    aux: Dataset,
    query_mode: str = "audio_only",
    frontend: fe.FrontEndConfig = fe.FrontEndConfig(),
    teacher_hash: str = "unknown",
    out_path: str | Path | None = None,
) -> TeacherProbFile:
    """Query the teacher once per auxiliary example.

    ``audio_only`` feeds a zero privileged vector to a multimodal teacher. An
    audio-only teacher has no privileged path, so both modes give the same file
    and it is recorded as ``audio_only``.
    """
    if query_mode not in QUERY_MODES:
        raise QueryModeError(f"unknown query mode {query_mode!r}")
    if out_path is not None and Path(out_path).exists():
        raise OneShotViolation(f"{out_path} already exists; teacher labels are one-shot")
    if aux.K != teacher.K:
        raise QueryModeError(f"teacher has K={teacher.K}, auxiliary data K={aux.K}")

    X = prepare_inputs(aux, frontend)
    M = None
    mode = query_mode
    if teacher.multimodal:
        if query_mode == "privileged":
            if not aux.multimodal or aux.privileged_dim != teacher.d_m:
                raise QueryModeError("privileged query needs matching privileged vectors on every auxiliary example")
            M = np.stack([e.privileged for e in aux.examples])
        else:
            M = np.zeros((len(aux), teacher.d_m))
    else:
        mode = "audio_only"
    probs = forward_batch(teacher, X, M)["probs"]
    result = TeacherProbFile(aux.K, mode, teacher_hash, aux.ids, aux.labels, probs)
    if out_path is not None:
        result.write(out_path)
    return result


# --------------------------------------------------------------------------
# KD objective


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def temper(p_t: np.ndarray, tau: float) -> np.ndarray:
    """Re-apply temperature to stored probabilities: ``p^(1/tau)`` renormalized."""
    lp = np.log(np.maximum(np.asarray(p_t, dtype=np.float64), PROB_FLOOR)) / tau
    return np.exp(log_softmax(lp))


def kd_loss(student_logits, y: int, p_t, cfg: KdConfig) -> float:
    """``(1 - alpha) CE(y, p_s) + alpha tau^2 KL(p_t^tau || p_s^tau)`` in nats."""
    z = np.asarray(student_logits, dtype=np.float64)
    ce = -log_softmax(z)[y]
    pt_tau = temper(p_t, cfg.tau)
    log_ps_tau = log_softmax(z / cfg.tau)
    mask = pt_tau > 0
    kl = float(np.sum(pt_tau[mask] * (np.log(pt_tau[mask]) - log_ps_tau[mask])))
    return float((1.0 - cfg.alpha) * ce + cfg.alpha * cfg.tau ** 2 * max(kl, 0.0))


def kd_grad_logits(student_logits, y, p_t, cfg: KdConfig) -> np.ndarray:
    """Gradient of :func:`kd_loss` with respect to the logits (batched on the last axis)."""
    z = np.asarray(student_logits, dtype=np.float64)
    batch = z.ndim == 2
    z2 = z if batch else z[None, :]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    pt = np.atleast_2d(np.asarray(p_t, dtype=np.float64))
    ps = softmax(z2)
    onehot = np.zeros_like(ps)
    onehot[np.arange(len(y)), y] = 1.0
    g = (1.0 - cfg.alpha) * (ps - onehot) + cfg.alpha * cfg.tau * (softmax(z2 / cfg.tau) - temper(pt, cfg.tau))
    return g if batch else g[0]


# --------------------------------------------------------------------------
# student training


def train_student(
    aux: Dataset,
    probs: TeacherProbFile,
    cfg: KdConfig = KdConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    frontend: fe.FrontEndConfig = fe.FrontEndConfig(),
    init: ModelParams | None = None,
    steps: int | None = None,
) -> ModelParams:
    """Non-private minibatch AdamW on the mean KD loss over ``aux``.

    ``steps`` caps the number of updates (default: ``cfg.epochs`` full passes).
    """
    if model_cfg.multimodal:
        raise ValueError("the released student is audio-only")
    X = prepare_inputs(aux, frontend)
    y = aux.labels
    P = probs.lookup(aux.ids)
    n = len(aux)
    params = init.copy() if init is not None else init_params(
        aux.K, X.shape[1], model_cfg.h, 0, model_cfg.h_m, model_cfg.activation, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    moments: dict = {}
    t = 0
    limit = steps if steps is not None else cfg.epochs * math.ceil(n / cfg.batch_size)
    while t < limit:
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            if t >= limit:
                break
            idx = order[start:start + cfg.batch_size]
            cache = forward_batch(params, X[idx])
            d_logits = (1.0 / idx.size) * kd_grad_logits(cache["logits"], y[idx], P[idx], cfg)
            layers = backward_from_logits(params, cache, d_logits)
            grads = {}
            for layer, (d, inp) in layers.items():
                grads[f"{layer}.W"] = d.T @ inp
                grads[f"{layer}.b"] = d.sum(axis=0)
            t += 1
            new = optim.adamw_step(params.tensors, grads, moments, t, cfg.lr, cfg.weight_decay)
            params = ModelParams(new, params.activation)
    return params


def kd_batch_loss(params: ModelParams, aux: Dataset, probs: TeacherProbFile, cfg: KdConfig,
                  frontend: fe.FrontEndConfig = fe.FrontEndConfig()) -> float:
    X = prepare_inputs(aux, frontend)
    logits = forward_batch(params, X)["logits"]
    P = probs.lookup(aux.ids)
    return float(np.mean([kd_loss(z, yy, p, cfg) for z, yy, p in zip(logits, aux.labels, P)]))
