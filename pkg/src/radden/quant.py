"""Quantizers, straight-through training, learned bit-widths and packing.

Two quantizer families: sign (1 bit) and integer rounding (k >= 2 bits) on
a symmetric uniform grid {0, +-step, ..., +-range} with
range = (2^(k-1)-1) * step. Backward passes use surrogate gradients: tanh'
for sign, the clipped identity for round-and-clip. Learned bit-widths
parametrize (log step, log range) per layer with a straight-through ceil
on the derived bit count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import (
    AdamState,
    EngineError,
    Model,
    Tensor,
    adam_step,
    mse_loss,
    relu,
    write_container,
    _f32,
)

LOG2 = float(np.log(2.0))


@dataclass
class QuantSpec:
    target: str = "weights"     # weights | activations | both
    mode: str = "integer"       # binary | integer
    bits: int | str = 8         # k, or "learned"
    range_mode: str = "statistics"  # none | statistics | learned
    per_layer: bool = True

    def __post_init__(self):
        if self.target not in ("weights", "activations", "both"):
            raise ValueError(f"QuantSpec: bad target {self.target!r}")
        if self.mode not in ("binary", "integer"):
            raise ValueError(f"QuantSpec: bad mode {self.mode!r}")
        if self.range_mode not in ("none", "statistics", "learned"):
            raise ValueError(f"QuantSpec: bad range_mode {self.range_mode!r}")
        if self.mode == "binary":
            if self.bits not in (1, "1"):
                raise ValueError("QuantSpec: binary quantization is 1 bit")
            self.bits = 1
        elif self.bits != "learned":
            self.bits = int(self.bits)
            if self.bits < 2:
                raise ValueError("QuantSpec: integer quantization needs k >= 2")

    @property
    def quantize_weights(self) -> bool:
        return self.target in ("weights", "both")

    @property
    def quantize_acts(self) -> bool:
        return self.target in ("activations", "both")

    @property
    def learned_bits(self) -> bool:
        return self.bits == "learned"


@dataclass
class DiscreteGrid:
    k: int
    step: float
    alpha: float

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("DiscreteGrid: k must be >= 2 (use the sign quantizer for 1 bit)")
        if self.step <= 0:
            raise ValueError("DiscreteGrid: step must be positive")
        expected = (2 ** (self.k - 1) - 1) * self.step
        if not np.isclose(self.alpha, expected, rtol=1e-9):
            raise ValueError("DiscreteGrid: alpha must equal (2^(k-1)-1)*step")

    @classmethod
    def from_range(cls, k: int, alpha: float) -> "DiscreteGrid":
        if alpha <= 0:
            raise ValueError("DiscreteGrid: alpha must be positive")
        return cls(k=k, step=alpha / (2 ** (k - 1) - 1), alpha=alpha)

    @property
    def qmax(self) -> int:
        return 2 ** (self.k - 1) - 1

    def levels(self) -> np.ndarray:
        return np.arange(-self.qmax, self.qmax + 1) * self.step


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_binary(x, alpha: float):
    """+alpha for x >= 0, -alpha otherwise."""
    if alpha <= 0:
        raise ValueError("quantize_binary: alpha must be positive")
    return np.where(np.asarray(x, dtype=np.float64) >= 0, alpha, -alpha)


def quantize_integer(x, grid: DiscreteGrid):
    """clip(round(x/step), -qmax, qmax) * step."""
    q = round_half_away(np.asarray(x, dtype=np.float64) / grid.step)
    return np.clip(q, -grid.qmax, grid.qmax) * grid.step


def dynamic_range_statistics(w) -> float:
    """Max absolute value; 1.0 when all weights are zero."""
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("dynamic_range_statistics: empty weight array")
    m = float(np.max(np.abs(w)))
    return m if m > 0 else 1.0


def ste_backward(kind: str, upstream_grad, saved_input, grid: DiscreteGrid | None = None):
    """Surrogate gradients for the two quantizers.

    sign: upstream * (1 - tanh(x)^2); round_clip: upstream inside the
    representable range, zero where the forward pass saturated.
    """
    if saved_input is None:
        raise ValueError("ste_backward: missing saved forward input")
    g = np.asarray(upstream_grad, dtype=np.float64)
    x = np.asarray(saved_input, dtype=np.float64)
    if kind == "sign":
        return g * (1.0 - np.tanh(x) ** 2)
    if kind == "round_clip":
        if grid is None:
            raise ValueError("ste_backward: round_clip needs the grid")
        inside = np.abs(x / grid.step) <= grid.qmax
        return g * inside
    raise ValueError(f"ste_backward: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# tensor-level quantization ops


def ste_sign(x: Tensor, alpha: float) -> Tensor:
    xd = x.data
    out = Tensor(quantize_binary(xd, alpha), (x,))
    out._backward = lambda g: x.accum(ste_backward("sign", g, xd))
    return out


def ste_round_clip(x: Tensor, grid: DiscreteGrid) -> Tensor:
    xd = x.data
    out = Tensor(quantize_integer(xd, grid), (x,))
    out._backward = lambda g: x.accum(ste_backward("round_clip", g, xd, grid))
    return out


def ste_round_clip_learned(x: Tensor, log_step: Tensor, log_range: Tensor) -> Tensor:
    """Integer quantization with trainable step/range (log-parametrized).

    Bit count k = 1 + ceil(log2(range/step + 1)) with the ceil treated as
    identity in the backward pass. Gradients w.r.t. the step follow the
    learned-step-size convention (round residual inside, saturation value
    outside); the range receives gradient only from saturated entries.
    """
    step = float(np.exp(log_step.data))
    alpha = float(np.exp(log_range.data))
    k = derived_bits(step, alpha)
    qmax = 2 ** (k - 1) - 1
    xd = x.data
    t = xd / step
    q = np.clip(round_half_away(t), -qmax, qmax)
    inside = np.abs(t) <= qmax
    out = Tensor(q * step, (x, log_step, log_range))

    def bwd(g):
        x.accum(g * inside)
        dstep = np.where(inside, q - t, np.sign(xd) * qmax)
        log_step.accum(np.sum(g * dstep) * step)  # d/dlog(step) = step * d/dstep
        drange = np.where(inside, 0.0, np.sign(xd))
        log_range.accum(np.sum(g * drange) * alpha)

    out._backward = bwd
    return out


def derived_bits(step: float, alpha: float) -> int:
    """k = 1 + ceil(log2(alpha/step + 1)), clipped to [2, 32]."""
    k = 1 + int(np.ceil(np.log2(alpha / step + 1.0)))
    return int(np.clip(k, 2, 32))


def bits_estimate(log_step: Tensor, log_range: Tensor) -> Tensor:
    """Differentiable real-valued bit count log2(alpha/step + 1) + 1."""
    ratio = (log_range - log_step).exp()
    return (ratio + 1.0).log() * (1.0 / LOG2) + 1.0


# ---------------------------------------------------------------------------
# learned bit-width parameters and the bit-width loss


@dataclass
class LearnedBitwidthParams:
    """Per-layer trainable (log step, log range) pairs."""

    log_step: list[Tensor]
    log_range: list[Tensor]

    @classmethod
    def init(cls, alphas: list[float], k0: int = 8) -> "LearnedBitwidthParams":
        ls, lr = [], []
        for a in alphas:
            a = max(a, 1e-8)
            step = a / (2 ** (k0 - 1) - 1)
            ls.append(Tensor(np.log(step)))
            lr.append(Tensor(np.log(a)))
        return cls(log_step=ls, log_range=lr)

    def tensors(self) -> list[Tensor]:
        return [*self.log_step, *self.log_range]

    def bits(self) -> list[int]:
        return [
            derived_bits(float(np.exp(s.data)), float(np.exp(r.data)))
            for s, r in zip(self.log_step, self.log_range)
        ]

    def ranges(self) -> list[float]:
        return [float(np.exp(r.data)) for r in self.log_range]


@dataclass
class BitLossConfig:
    gamma0: float = 0.01
    f1_slack: float = 0.002
    clamp_lo: float = 1.0 / 64.0
    clamp_hi: float = 64.0
    weight_counts: list[int] = field(default_factory=list)
    act_counts: list[int] = field(default_factory=list)


def avg_bitwidth_loss(
    params_w: LearnedBitwidthParams | None,
    params_a: LearnedBitwidthParams | None,
    cfg: BitLossConfig,
) -> Tensor:
    """Count-weighted mean of the real-valued per-layer bit estimates."""
    terms, total = [], 0.0
    if params_w is not None:
        for n, s, r in zip(cfg.weight_counts, params_w.log_step, params_w.log_range):
            terms.append(bits_estimate(s, r) * float(n))
            total += n
    if params_a is not None:
        for n, s, r in zip(cfg.act_counts, params_a.log_step, params_a.log_range):
            terms.append(bits_estimate(s, r) * float(n))
            total += n
    if total == 0:
        raise ValueError("avg_bitwidth_loss: zero total count")
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / total)


def adaptive_bit_scale(history: list[float], cfg: BitLossConfig) -> float:
    """Double gamma while validation F1 stays near its best, else halve.

    gamma_t = clamp(gamma_{t-1} * 2) when F1_t >= best_so_far - slack,
    otherwise clamp(gamma_{t-1} / 2); clamp bounds are
    [gamma0/64, 64*gamma0]. Recomputed from the full history so the rule
    is stateless.
    """
    if not history:
        raise ValueError("adaptive_bit_scale: need at least one validation point")
    lo, hi = cfg.gamma0 * cfg.clamp_lo, cfg.gamma0 * cfg.clamp_hi
    gamma = cfg.gamma0
    best = -np.inf
    for f1 in history:
        best = max(best, f1)
        gamma = gamma * 2.0 if f1 >= best - cfg.f1_slack else gamma / 2.0
        gamma = float(np.clip(gamma, lo, hi))
    return gamma


# ---------------------------------------------------------------------------
# QAT state and forward


@dataclass
class QATState:
    spec: QuantSpec
    weight_params: LearnedBitwidthParams | None = None
    act_params: LearnedBitwidthParams | None = None
    act_range_ema: list[float] = field(default_factory=list)
    act_momentum: float = 0.9
    frozen: bool = False

    def trainables(self) -> list[Tensor]:
        ts = []
        if self.weight_params is not None:
            ts += self.weight_params.tensors()
        if self.act_params is not None:
            ts += self.act_params.tensors()
        return ts


def init_qat_state(model: Model, qspec: QuantSpec) -> QATState:
    state = QATState(spec=qspec)
    n_layers = model.spec.layers
    alphas_w = [dynamic_range_statistics(lay.weight.data) for lay in model.layers]
    if qspec.learned_bits:
        if qspec.quantize_weights:
            state.weight_params = LearnedBitwidthParams.init(alphas_w)
        if qspec.quantize_acts:
            state.act_params = LearnedBitwidthParams.init([1.0] * (n_layers - 1))
    if qspec.quantize_acts:
        state.act_range_ema = [1.0] * (n_layers - 1)
    return state


def _weight_grid(state: QATState, l: int, w: Tensor) -> DiscreteGrid:
    spec = state.spec
    if spec.range_mode == "none":
        alpha = 1.0
    elif spec.range_mode == "statistics":
        alpha = dynamic_range_statistics(w.data)
    else:
        raise EngineError("learned range handled by the learned-bits path")
    return DiscreteGrid.from_range(int(spec.bits), alpha)


def qat_weight_fn(state: QATState):
    spec = state.spec
    if not spec.quantize_weights:
        return None

    def fn(l: int, w: Tensor) -> Tensor:
        if spec.mode == "binary":
            if spec.range_mode == "none":
                alpha = 1.0
            else:
                alpha = dynamic_range_statistics(w.data)
            return ste_sign(w, alpha)
        if spec.learned_bits or spec.range_mode == "learned":
            if state.weight_params is None:
                raise EngineError("qat_forward: learned range without initialized parameters")
            return ste_round_clip_learned(
                w, state.weight_params.log_step[l], state.weight_params.log_range[l]
            )
        return ste_round_clip(w, _weight_grid(state, l, w))

    return fn


def qat_act_fn(state: QATState, training: bool):
    spec = state.spec
    if not spec.quantize_acts:
        return None

    def fn(l: int, pre: Tensor) -> Tensor:
        if spec.mode == "binary":
            alpha = _track_act_range(state, l, pre.data, training)
            return ste_sign(pre, alpha)
        a = relu(pre)
        if spec.learned_bits or spec.range_mode == "learned":
            if state.act_params is None:
                raise EngineError("qat_forward: learned range without initialized parameters")
            return ste_round_clip_learned(
                a, state.act_params.log_step[l], state.act_params.log_range[l]
            )
        alpha = _track_act_range(state, l, a.data, training)
        return ste_round_clip(a, DiscreteGrid.from_range(int(spec.bits), alpha))

    return fn


def _track_act_range(state: QATState, l: int, values: np.ndarray, training: bool) -> float:
    if state.spec.range_mode == "none":
        return 1.0
    if training and not state.frozen:
        m = state.act_momentum
        batch_max = float(np.max(np.abs(values)))
        if batch_max == 0.0:
            batch_max = 1.0
        state.act_range_ema[l] = m * state.act_range_ema[l] + (1.0 - m) * batch_max
    return max(state.act_range_ema[l], 1e-12)


def qat_forward(model: Model, x, state: QATState, mode: str = "train") -> Tensor:
    """Forward pass with targeted weights/activations quantized in place."""
    return model.forward(
        x,
        mode=mode,
        weight_fn=qat_weight_fn(state),
        act_fn=qat_act_fn(state, training=(mode == "train")),
    )


# ---------------------------------------------------------------------------
# frozen snapshots and packing


@dataclass
class QuantizedLayer:
    k: int
    alpha: float
    codes: np.ndarray  # signed integer codes, flattened


@dataclass
class QuantSnapshot:
    """Weights frozen to their grids plus the per-layer bit report."""

    weight_layers: list[QuantizedLayer]
    weight_bits: list[int]
    act_bits: list[int]
    act_ranges: list[float]


def snapshot_weights(model: Model, state: QATState) -> QuantSnapshot:
    spec = state.spec
    wl, wbits = [], []
    for l, lay in enumerate(model.layers):
        w = lay.weight.data
        if not spec.quantize_weights:
            k, alpha = 32, dynamic_range_statistics(w)
            grid = DiscreteGrid.from_range(k, alpha)
            q = w.copy()
        elif spec.mode == "binary":
            alpha = 1.0 if spec.range_mode == "none" else dynamic_range_statistics(w)
            k = 1
            q = quantize_binary(w, alpha)
        elif spec.learned_bits or spec.range_mode == "learned":
            step = float(np.exp(state.weight_params.log_step[l].data))
            alpha_r = float(np.exp(state.weight_params.log_range[l].data))
            k = derived_bits(step, alpha_r)
            grid = DiscreteGrid(k=k, step=step, alpha=(2 ** (k - 1) - 1) * step)
            q = quantize_integer(w, grid)
            alpha = grid.alpha
        else:
            grid = _weight_grid(state, l, lay.weight)
            k, alpha = grid.k, grid.alpha
            q = quantize_integer(w, grid)
        lay.weight.data = q  # freeze to the grid
        if spec.quantize_weights and spec.mode == "binary":
            codes = (q >= 0).astype(np.int64).ravel()
        elif spec.quantize_weights:
            codes = np.asarray(round_half_away(q.ravel() / (alpha / (2 ** (k - 1) - 1))),
                               dtype=np.int64)
        else:
            codes = None
        wl.append(QuantizedLayer(k=k, alpha=alpha, codes=codes))
        wbits.append(k)
    if spec.quantize_acts:
        if spec.learned_bits:
            abits = state.act_params.bits()
            aranges = state.act_params.ranges()
        elif spec.mode == "binary":
            abits = [1] * (model.spec.layers - 1)
            aranges = list(state.act_range_ema)
        else:
            abits = [int(spec.bits)] * (model.spec.layers - 1)
            aranges = list(state.act_range_ema)
    else:
        abits = [32] * (model.spec.layers - 1)
        aranges = []
    return QuantSnapshot(weight_layers=wl, weight_bits=wbits, act_bits=abits, act_ranges=aranges)


def pack_weights(weights, k: int, alpha: float) -> bytes:
    """Bit-pack grid weights as k-bit signed integers (two's complement).

    The payload is exactly ceil(n*k/8) bytes; the per-layer dynamic range
    travels in the checkpoint header (one f32 per layer).
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    if k == 1:
        codes = (quantize_binary(w, alpha) == alpha).astype(np.uint64)
        if not np.allclose(np.where(codes == 1, alpha, -alpha), w):
            raise ValueError("pack_weights: off-grid value")
    else:
        grid = DiscreteGrid.from_range(k, alpha)
        codes_signed = round_half_away(w / grid.step)
        if np.any(np.abs(codes_signed) > grid.qmax) or not np.allclose(
            codes_signed * grid.step, w, rtol=0, atol=1e-9 * max(grid.step, 1.0)
        ):
            raise ValueError("pack_weights: off-grid value")
        codes = (codes_signed.astype(np.int64) & ((1 << k) - 1)).astype(np.uint64)
    bits = np.unpackbits(codes.astype(">u8").view(np.uint8).reshape(-1, 8), axis=1)[:, 64 - k :]
    return np.packbits(bits.ravel()).tobytes()


def unpack_weights(blob: bytes, k: int, count: int, alpha: float) -> np.ndarray:
    """Inverse of pack_weights."""
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8))[: count * k].reshape(count, k)
    vals = np.zeros(count, dtype=np.int64)
    for b in range(k):
        vals = (vals << 1) | bits[:, b]
    if k == 1:
        return np.where(vals == 1, alpha, -alpha)
    sign_bit = 1 << (k - 1)
    vals = np.where(vals & sign_bit, vals - (1 << k), vals)
    step = alpha / (2 ** (k - 1) - 1)
    return vals.astype(np.float64) * step


def save_qat_model(path, model: Model, snapshot: QuantSnapshot, extra: dict | None = None):
    """Checkpoint with integer-coded weight blobs plus f32 bias/BN arrays."""
    arrays, blobs = [], []

    def put(name, a):
        arrays.append({"name": name, "shape": list(np.shape(a))})
        blobs.append(_f32(a))

    for l, lay in enumerate(model.layers):
        put(f"layer{l}.bias", lay.bias.data)
        if lay.has_bn:
            put(f"layer{l}.bn_scale", lay.bn_scale.data)
            put(f"layer{l}.bn_shift", lay.bn_shift.data)
            put(f"layer{l}.bn_mean", lay.bn_mean)
            put(f"layer{l}.bn_var", lay.bn_var)
    qmeta = []
    for l, (lay, ql) in enumerate(zip(model.layers, snapshot.weight_layers)):
        if ql.codes is None:
            blobs.append(_f32(lay.weight.data))
            qmeta.append({"k": 32, "alpha": ql.alpha, "packed": False})
        else:
            blobs.append(pack_weights(lay.weight.data, ql.k, ql.alpha))
            qmeta.append({"k": ql.k, "alpha": ql.alpha, "packed": True})
    meta = {
        "kind": "qat",
        "arch": model.spec.name,
        "arrays": arrays,
        "quant_layers": qmeta,
        "act_bits": snapshot.act_bits,
        "act_ranges": snapshot.act_ranges,
    }
    if extra:
        meta["extra"] = extra
    write_container(path, meta, blobs)
