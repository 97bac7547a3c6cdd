"""Training loops for real-valued, quantization-aware and ternary models.

RD maps enter the network as per-sample normalized (re, im) channel
pairs: each sample is scaled by 1/max|interfered| and the same factor is
applied to its clean target, so the MSE is comparable across dynamic
ranges; predictions are rescaled back before detection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quant as q
from . import ternary as tern
from .engine import AdamState, Model, adam_step, mse_loss
from .evaluation import CFARConfig, evaluate_predictions
from .sim import LabeledSample, RDMap


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    logit_lr: float = 2e-2  # ternary logits move on a faster schedule


@dataclass
class EpochLog:
    epoch: int
    train_mse: float
    val_f1: float
    gamma: float = 0.0
    avg_bits: float = 0.0


def sample_to_arrays(sample: LabeledSample) -> tuple[np.ndarray, np.ndarray, float]:
    """(input [2,H,W], target [2,H,W], scale); scale = 1/max|interfered|."""
    mx = float(np.max(np.abs(sample.interfered.data)))
    scale = 1.0 / mx if mx > 0 else 1.0
    x = np.stack([sample.interfered.data.real, sample.interfered.data.imag]) * scale
    y = np.stack([sample.clean.data.real, sample.clean.data.imag]) * scale
    return x, y, scale


def channels_to_complex(arr: np.ndarray) -> np.ndarray:
    return arr[0] + 1j * arr[1]


def make_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class Predictor:
    """Eval-mode forward of a trained model on one sample's RD map."""

    def __init__(self, model: Model, qat_state: q.QATState | None = None):
        self.model = model
        self.qat_state = qat_state

    def __call__(self, sample: LabeledSample) -> RDMap:
        x, _, scale = sample_to_arrays(sample)
        if self.qat_state is not None:
            out = q.qat_forward(self.model, x[None], self.qat_state, mode="eval")
        else:
            out = self.model.forward(x[None], mode="eval")
        return RDMap(channels_to_complex(out.data[0]) / scale)


def validation_f1(predict, samples, cfar: CFARConfig) -> float:
    preds = [predict(s) for s in samples]
    return evaluate_predictions(preds, samples, cfar).mean_f1


def _prepare(samples) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for s in samples:
        x, y, _ = sample_to_arrays(s)
        xs.append(x)
        ys.append(y)
    return np.stack(xs), np.stack(ys)


def _check_finite(loss: float):
    if not np.isfinite(loss):
        raise FloatingPointError("training diverged: non-finite loss")


def train_real(
    model: Model,
    train_samples,
    val_samples,
    cfg: TrainConfig,
    cfar: CFARConfig,
) -> list[EpochLog]:
    """Plain MSE training with Adam; returns one log row per epoch."""
    xs, ys = _prepare(train_samples)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamState.for_params(params, lr=cfg.lr)
    logs = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in make_batches(len(xs), cfg.batch_size, rng):
            model.zero_grad()
            pred = model.forward(xs[idx], mode="train")
            loss = mse_loss(pred, ys[idx])
            _check_finite(float(loss.data))
            loss.backward()
            adam_step(params, state)
            losses.append(float(loss.data))
        f1 = validation_f1(Predictor(model), val_samples, cfar)
        logs.append(EpochLog(epoch=epoch, train_mse=float(np.mean(losses)), val_f1=f1))
    return logs


def train_qat(
    model: Model,
    train_samples,
    val_samples,
    qspec: q.QuantSpec,
    cfg: TrainConfig,
    cfar: CFARConfig,
    bit_cfg: q.BitLossConfig | None = None,
) -> tuple[q.QATState, q.QuantSnapshot, list[EpochLog]]:
    """STE training on auxiliary real weights; returns the frozen snapshot.

    In learned-bit-width mode the loss gains gamma * average-bit-width with
    gamma adapted per epoch from the validation F1 trace.
    """
    xs, ys = _prepare(train_samples)
    rng = np.random.default_rng(cfg.seed)
    qat_state = q.init_qat_state(model, qspec)
    if bit_cfg is None:
        bit_cfg = q.BitLossConfig()
    if qspec.learned_bits:
        cs = [2] + list(model.spec.channels)
        bit_cfg.weight_counts = [9 * cs[i] * cs[i + 1] for i in range(model.spec.layers)]
        hw = train_samples[0].interfered.data.size
        bit_cfg.act_counts = [c * hw for c in model.spec.channels[:-1]]
    params = model.parameters() + qat_state.trainables()
    state = AdamState.for_params(params, lr=cfg.lr)
    logs, f1_hist = [], []
    gamma = bit_cfg.gamma0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in make_batches(len(xs), cfg.batch_size, rng):
            model.zero_grad()
            for t in qat_state.trainables():
                t.zero_grad()
            pred = q.qat_forward(model, xs[idx], qat_state, mode="train")
            loss = mse_loss(pred, ys[idx])
            if qspec.learned_bits:
                loss = loss + gamma * q.avg_bitwidth_loss(
                    qat_state.weight_params, qat_state.act_params, bit_cfg
                )
            _check_finite(float(loss.data))
            loss.backward()
            adam_step(params, state)
            losses.append(float(loss.data))
        f1 = validation_f1(Predictor(model, qat_state), val_samples, cfar)
        f1_hist.append(f1)
        avg_bits = 0.0
        if qspec.learned_bits:
            gamma = q.adaptive_bit_scale(f1_hist, bit_cfg)
            kw = qat_state.weight_params.bits() if qat_state.weight_params else []
            ka = qat_state.act_params.bits() if qat_state.act_params else []
            avg_bits = float(np.mean(kw + ka)) if kw + ka else 0.0
        logs.append(EpochLog(epoch=epoch, train_mse=float(np.mean(losses)),
                             val_f1=f1, gamma=gamma, avg_bits=avg_bits))
    qat_state.frozen = True
    snapshot = q.snapshot_weights(model, qat_state)
    return qat_state, snapshot, logs


def train_dist(
    dist: tern.TernaryDist,
    train_samples,
    val_samples,
    cfg: TrainConfig,
    cfar: CFARConfig,
) -> list[EpochLog]:
    """Expected-loss training of the ternary distributions (plus bias/BN)."""
    xs, ys = _prepare(train_samples)
    rng = np.random.default_rng(cfg.seed)
    noise_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    logit_params = [tl.logits for tl in dist.layers]
    other_params = [p for p in dist.parameters() if all(p is not q_ for q_ in logit_params)]
    st_logits = AdamState.for_params(logit_params, lr=cfg.logit_lr)
    st_other = AdamState.for_params(other_params, lr=cfg.lr)
    logs = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in make_batches(len(xs), cfg.batch_size, rng):
            dist.zero_grad()
            loss = tern.expected_loss(dist, xs[idx], ys[idx], rng=noise_rng)
            loss.backward()
            adam_step(logit_params, st_logits)
            adam_step(other_params, st_other)
            losses.append(float(loss.data))
        mp = tern.extract_mp(dist)
        f1 = validation_f1(Predictor(mp), val_samples, cfar)
        logs.append(EpochLog(epoch=epoch, train_mse=float(np.mean(losses)), val_f1=f1))
    return logs


def ensemble_predict(models: list[Model], sample: LabeledSample) -> RDMap:
    """Average the complex outputs of several extracted models."""
    acc = None
    for m in models:
        out = Predictor(m)(sample).data
        acc = out if acc is None else acc + out
    return RDMap(acc / len(models))
