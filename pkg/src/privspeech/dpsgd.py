"""DP-SGD teacher training with adaptive class reweighting (AW-DP).

One step: Poisson-sample a batch, weight each example's CE by its class
weight from the realized batch label counts, clip every per-example gradient
to ``C``, add ``N(0, (sigma C)^2)`` to the sum, divide, and hand the result
to SGD or AdamW.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import features as fe
from . import optim
from .accountant import PrivacyLedger
from .datamodel import Dataset, poisson_sample
from .model import ModelParams, PerExampleGrad, batch_backward, init_params, predict_proba, save_checkpoint

log = logging.getLogger(__name__)


class NonFiniteUpdateError(FloatingPointError):
    pass


class ClippingViolation(AssertionError):
    pass


@dataclass(frozen=True)
class DpConfig:
    q: float = 0.0016
    steps: int = 12500
    C: float = 5.0
    sigma: float = 1.0
    delta: float = 1e-5
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # divide the noisy sum by q*N ("expected") or by the realized |B| ("realized")
    divisor: str = "expected"

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError("C must be positive")
        if not 0 < self.q <= 1:
            raise ValueError("q must lie in (0, 1]")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.divisor not in ("expected", "realized"):
            raise ValueError(f"unknown divisor {self.divisor!r}")

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(1.0 / self.q)


@dataclass(frozen=True)
class AwdpConfig:
    enabled: bool = True
    eps_w: float = 1e-6
    w_min: float = 0.1
    w_max: float = 10.0

    def __post_init__(self):
        if self.eps_w <= 0:
            raise ValueError("eps_w must be positive")
        if not 0 < self.w_min <= 1 <= self.w_max:
            raise ValueError("need 0 < w_min <= 1 <= w_max")


@dataclass(frozen=True)
class ModelConfig:
    h: int = 128
    h_m: int = 16
    activation: str = "relu"
    multimodal: bool = False


@dataclass
class TrainState:
    params: ModelParams
    ledger: PrivacyLedger
    t: int = 0
    updates: int = 0
    moments: dict = field(default_factory=dict)  # name -> (m, v)


# --------------------------------------------------------------------------
# mechanism pieces


def awdp_weights(labels: Sequence[int], K: int, cfg: AwdpConfig = AwdpConfig()) -> np.ndarray:
    """Per-class weights ``clip(|B| / (K n_k + eps_w), w_min, w_max)``; 1 for absent classes."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("batch is empty")
    counts = np.bincount(labels, minlength=K).astype(np.float64)
    raw = labels.size / (K * counts + cfg.eps_w)
    w = np.clip(raw, cfg.w_min, cfg.w_max)
    return np.where(counts > 0, w, 1.0)


def clip_factors(norms: np.ndarray, C: float) -> np.ndarray:
    norms = np.asarray(norms, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(norms > C, C / np.where(norms > 0, norms, 1.0), 1.0)


def clip_grad(g: PerExampleGrad, C: float) -> PerExampleGrad:
    if C <= 0:
        raise ValueError("C must be positive")
    c = float(clip_factors(np.array([g.l2_norm]), C)[0])
    if c == 1.0:
        return PerExampleGrad({k: v.copy() for k, v in g.tensors.items()}, g.l2_norm)
    return PerExampleGrad({k: v * c for k, v in g.tensors.items()})


def gaussian_noise(shapes: dict[str, tuple], std: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Noise for every tensor from one draw, laid out by sorted tensor name then row-major."""
    names = sorted(shapes)
    sizes = [int(np.prod(shapes[n])) for n in names]
    flat = rng.standard_normal(sum(sizes))
    flat *= std
    out, pos = {}, 0
    for name, size in zip(names, sizes):
        out[name] = flat[pos:pos + size].reshape(shapes[name])
        pos += size
    return out


def _privatize_sum(grad_sum: dict[str, np.ndarray], B: float, C: float, sigma: float,
                   rng: np.random.Generator) -> dict[str, np.ndarray]:
    if B <= 0:
        raise ValueError("batch divisor must be positive")
    if sigma == 0:
        return {k: v / B for k, v in grad_sum.items()}
    noise = gaussian_noise({k: v.shape for k, v in grad_sum.items()}, sigma * C, rng)
    return {k: (grad_sum[k] + noise[k]) / B for k in grad_sum}


def privatize(batch_grads: Sequence[PerExampleGrad], B: float, C: float, sigma: float,
              rng: np.random.Generator, shapes: dict[str, tuple] | None = None) -> dict[str, np.ndarray]:
    """``(sum of clipped grads + N(0, sigma^2 C^2 I)) / B``.

    ``shapes`` is needed only when ``batch_grads`` is empty.
    """
    if batch_grads:
        total = {k: np.zeros_like(v) for k, v in batch_grads[0].tensors.items()}
        for g in batch_grads:
            for k, v in g.tensors.items():
                total[k] += v
    elif shapes is not None:
        total = {k: np.zeros(s) for k, s in shapes.items()}
    else:
        raise ValueError("need shapes for an empty batch")
    return _privatize_sum(total, B, C, sigma, rng)


def apply_update(state: TrainState, g_tilde: dict[str, np.ndarray], cfg: DpConfig) -> TrainState:
    """SGD or AdamW (decoupled decay, bias-corrected) step; mutates and returns ``state``."""
    params = state.params.tensors
    for name, g in g_tilde.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: update shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteUpdateError(f"non-finite update for {name}")

    tensors = {k: v.copy() for k, v in params.items()}
    if cfg.optimizer == "sgd":
        optim.sgd_step(tensors, g_tilde, cfg.lr)
    else:
        optim.adamw_step(tensors, g_tilde, state.moments, state.updates + 1, cfg.lr,
                         cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)
    state.params = ModelParams(tensors, state.params.activation)
    state.updates += 1
    return state


# --------------------------------------------------------------------------
# training loop


@dataclass
class TeacherResult:
    params: ModelParams
    ledger: PrivacyLedger
    log: list[dict]


def prepare_inputs(data: Dataset, frontend: fe.FrontEndConfig) -> np.ndarray:
    """Stack flattened front-end features into an ``(N, n_mels * L)`` matrix."""
    if data.prenormalized:
        rows = [np.asarray(e.features, dtype=np.float64).ravel() for e in data.examples]
    else:
        rows = [fe.front_end(e.features, frontend).ravel() for e in data.examples]
    return np.stack(rows)


def prepare_privileged(data: Dataset) -> np.ndarray | None:
    if not data.multimodal:
        return None
    return np.stack([e.privileged for e in data.examples]).astype(np.float64)


def _rngs(seed: int):
    sample, dropout, noise = np.random.SeedSequence(seed).spawn(3)
    return (np.random.Generator(np.random.Philox(sample)),
            np.random.Generator(np.random.Philox(dropout)),
            np.random.Generator(np.random.Philox(noise)))


def train_teacher(
    data: Dataset,
    model_cfg: ModelConfig,
    dp: DpConfig,
    awdp: AwdpConfig = AwdpConfig(),
    dropout_p: float = 0.5,
    frontend: fe.FrontEndConfig = fe.FrontEndConfig(),
    *,
    init: ModelParams | None = None,
    probe_size: int = 1000,
    check_clipping: bool = False,
    checkpoint_dir: str | Path | None = None,
    on_step: Callable[[TrainState], None] | None = None,
) -> TeacherResult:
    """Run ``dp.steps`` DP-SGD steps on ``data``.

    Privileged dropout only applies when the model is multimodal. Empty
    Poisson batches make no update but still count as a mechanism invocation.
    With ``check_clipping`` every clipped per-example norm is asserted to be
    at most ``C + 1e-9``.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    X = prepare_inputs(data, frontend)
    y = data.labels
    M = prepare_privileged(data) if model_cfg.multimodal else None
    if model_cfg.multimodal and M is None:
        raise ValueError("multimodal teacher needs privileged vectors on every example")
    N, K = len(data), data.K

    params = init or init_params(K, X.shape[1], model_cfg.h, M.shape[1] if M is not None else 0,
                                 model_cfg.h_m, model_cfg.activation, seed=dp.seed)
    ledger = PrivacyLedger(dp.q, dp.sigma, dp.delta)
    state = TrainState(params=params, ledger=ledger)
    rng_sample, rng_drop, rng_noise = _rngs(dp.seed)

    probe = np.sort(np.random.default_rng(dp.seed).permutation(N)[:min(probe_size, N)])
    spe = dp.steps_per_epoch
    divisor_expected = dp.q * N
    records: list[dict] = []
    epoch_loss, epoch_seen = 0.0, 0

    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    for _ in range(dp.steps):
        idx = poisson_sample(N, dp.q, rng_sample)
        state.t += 1
        state.ledger.record(1)
        if idx.size:
            labels = y[idx]
            cw = awdp_weights(labels, K, awdp) if awdp.enabled else np.ones(K)
            Mb = None
            if M is not None:
                Mb = M[idx].copy()
                if dropout_p > 0:
                    Mb[rng_drop.random(idx.size) < dropout_p] = 0.0
            bg = batch_backward(state.params, X[idx], Mb, labels, cw[labels])
            norms = bg.norms()
            coef = clip_factors(norms, dp.C)
            if check_clipping:
                clipped = coef * norms
                if np.any(clipped > dp.C + 1e-9):
                    raise ClippingViolation(f"clipped norm {clipped.max()!r} exceeds C={dp.C}")
            grad_sum = bg.weighted_sum(coef)
            B = divisor_expected if dp.divisor == "expected" else float(idx.size)
            g_tilde = _privatize_sum(grad_sum, B, dp.C, dp.sigma, rng_noise)
            apply_update(state, g_tilde, dp)
            epoch_loss += float(bg.losses.sum())
            epoch_seen += idx.size
        if on_step is not None:
            on_step(state)

        if state.t % spe == 0 or state.t == dp.steps:
            probs = predict_proba(state.params, X[probe], M[probe] if M is not None else None)
            acc = float(np.mean(np.argmax(probs, axis=1) == y[probe]))
            eps = state.ledger.epsilon()
            rec = {
                "step": state.t,
                "epoch": state.t / spe,
                "loss": epoch_loss / epoch_seen if epoch_seen else None,
                "probe_acc": acc,
                "epsilon": eps if math.isfinite(eps) else None,
            }
            records.append(rec)
            log.info("step %d probe_acc %.4f eps %s", state.t, acc, rec["epsilon"])
            epoch_loss, epoch_seen = 0.0, 0
            if checkpoint_dir is not None:
                save_checkpoint(state.params, Path(checkpoint_dir) / f"epoch{math.ceil(state.t / spe):03d}.dpm")

    return TeacherResult(state.params, state.ledger, records)


def write_log(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def with_overrides(cfg, **kw):
    """``dataclasses.replace`` that ignores ``None`` values."""
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
