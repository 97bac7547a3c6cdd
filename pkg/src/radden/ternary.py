"""Distributions over ternary weights: moment propagation and uncertainty.

Each conv weight is replaced by an independent 3-way categorical over
{-alpha, 0, +alpha}, stored as unnormalized log-probabilities. A layer's
pre-activation is approximately Gaussian (sum over many random weights),
so its mean/variance follow from the per-weight moments and sampling uses
the local reparameterization a = mu + sigma * eps, which keeps gradients
flowing into the logits. Discrete networks are extracted by taking the
most probable weights or by sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import (
    Model,
    ModelSpec,
    Tensor,
    batch_norm,
    build_model,
    conv2d_same,
    mse_loss,
    relu,
    softmax,
    write_container,
    read_container,
    _f32,
    _read_arrays,
    EngineError,
)
from .quant import dynamic_range_statistics

LOG_EPS_FLOOR = 1e-12  # added to |output| before taking log magnitudes


@dataclass
class ActivationMoments:
    mean: Tensor
    var: Tensor


@dataclass
class TernaryLayer:
    logits: Tensor          # [n_weights, 3] over (-alpha, 0, +alpha)
    alpha: float
    weight_shape: tuple[int, ...]


@dataclass
class TernaryDist:
    """Per-layer weight distributions riding on a base model's bias/BN."""

    base: Model
    layers: list[TernaryLayer]
    lam: float = 0.0

    @property
    def spec(self) -> ModelSpec:
        return self.base.spec

    def parameters(self) -> list[Tensor]:
        ps = [tl.logits for tl in self.layers]
        for lay in self.base.layers:
            ps.append(lay.bias)
            if lay.has_bn:
                ps.extend([lay.bn_scale, lay.bn_shift])
        return ps

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def init_from_pretrained(w_real, alpha: float, p_bounds=(0.05, 0.9)) -> np.ndarray:
    """Proximity-softmax logits: p(g) ~ exp(-|w-g| / (alpha/2)), clamped.

    Clamping each probability into p_bounds (then renormalizing) keeps
    every grid point reachable so training can move mass later.
    """
    if alpha <= 0:
        raise ValueError("init_from_pretrained: alpha must be positive")
    w = np.asarray(w_real, dtype=np.float64).ravel()
    grid = np.array([-alpha, 0.0, alpha])
    t = alpha / 2.0
    p = np.exp(-np.abs(w[:, None] - grid[None, :]) / t)
    p /= p.sum(axis=1, keepdims=True)
    lo, hi = p_bounds
    p = np.clip(p, lo, hi)
    p /= p.sum(axis=1, keepdims=True)
    return np.log(p)


def dist_from_model(model: Model, lam: float = 0.0, p_bounds=(0.05, 0.9)) -> TernaryDist:
    """Wrap a pretrained model; alpha per layer is max|W| (statistics rule)."""
    layers = []
    for lay in model.layers:
        alpha = dynamic_range_statistics(lay.weight.data)
        logits = init_from_pretrained(lay.weight.data, alpha, p_bounds)
        layers.append(TernaryLayer(logits=Tensor(logits), alpha=alpha,
                                   weight_shape=tuple(lay.weight.shape)))
    return TernaryDist(base=model, layers=layers, lam=lam)


def weight_moments(tl: TernaryLayer) -> tuple[Tensor, Tensor]:
    """E[w] and V[w] per weight from the categorical probabilities."""
    p = softmax(tl.logits, axis=-1)
    g = np.array([-tl.alpha, 0.0, tl.alpha])
    e1 = (p * g).sum(axis=-1)
    e2 = (p * g**2).sum(axis=-1)
    return e1, e2 - e1 * e1


def clt_forward(x: Tensor, tl: TernaryLayer, bias: Tensor) -> ActivationMoments:
    """Gaussian moments of the conv output under the weight distribution.

    mean = conv(x, E[W]) + bias; var = conv(x^2, V[W]) with no bias.
    """
    ew, vw = weight_moments(tl)
    shape = tl.weight_shape
    mean = conv2d_same(x, ew.reshape(*shape), bias)
    zero_bias = Tensor(np.zeros(shape[0]))
    var = conv2d_same(x * x, vw.reshape(*shape), zero_bias)
    return ActivationMoments(mean=mean, var=var)


def sqrt_var(var: Tensor) -> Tensor:
    """Square root with subgradient 0 at 0 so point masses stay exact."""
    vd = np.maximum(var.data, 0.0)
    sd = np.sqrt(vd)
    out = Tensor(sd, (var,))
    inv = np.where(sd > 0, 0.5 / np.where(sd > 0, sd, 1.0), 0.0)
    out._backward = lambda g: var.accum(g * inv)
    return out


def local_reparam(moments: ActivationMoments, eps: np.ndarray) -> Tensor:
    """a = mean + sqrt(var) * eps with gradients through both moments."""
    return moments.mean + sqrt_var(moments.var) * eps


def dist_forward(
    dist: TernaryDist,
    x,
    rng: np.random.Generator | None = None,
    eps_list: list[np.ndarray] | None = None,
    mode: str = "train",
) -> Tensor:
    """Stochastic forward: CLT moments + reparameterized sample per layer.

    Activations stay real-valued (ReLU); BN applies to the sampled
    pre-activations. Pass eps_list for a fixed noise draw (gradient checks).
    """
    t = x if isinstance(x, Tensor) else Tensor(x)
    for l, (tl, lay) in enumerate(zip(dist.layers, dist.base.layers)):
        mom = clt_forward(t, tl, lay.bias)
        if eps_list is not None:
            eps = eps_list[l]
        elif rng is not None:
            eps = rng.standard_normal(mom.mean.shape)
        else:
            raise EngineError("dist_forward: need rng or eps_list")
        t = local_reparam(mom, eps)
        if lay.has_bn:
            t = batch_norm(t, lay.bn_scale, lay.bn_shift, lay.bn_mean, lay.bn_var,
                           mode=mode, update_running=(mode == "train"))
            t = relu(t)
    return t


def expected_loss(
    dist: TernaryDist,
    batch_x,
    batch_y,
    rng: np.random.Generator | None = None,
    eps_list: list[np.ndarray] | None = None,
    mode: str = "train",
) -> Tensor:
    """Single-sample estimate of E[MSE] plus lam * sum(logits^2)."""
    pred = dist_forward(dist, batch_x, rng=rng, eps_list=eps_list, mode=mode)
    loss = mse_loss(pred, batch_y)
    if dist.lam > 0:
        reg = None
        for tl in dist.layers:
            term = (tl.logits * tl.logits).sum()
            reg = term if reg is None else reg + term
        loss = loss + dist.lam * reg
    if not np.isfinite(loss.data):
        raise FloatingPointError("expected_loss: non-finite loss")
    return loss


# ---------------------------------------------------------------------------
# extraction


def _grid(tl: TernaryLayer) -> np.ndarray:
    return np.array([-tl.alpha, 0.0, tl.alpha])


def _clone_with_weights(dist: TernaryDist, weights: list[np.ndarray]) -> Model:
    spec = dist.base.spec
    model = build_model(spec, np.random.default_rng(0))
    for lay, src, w in zip(model.layers, dist.base.layers, weights):
        lay.weight.data = w.reshape(lay.weight.shape)
        lay.bias.data = src.bias.data.copy()
        if lay.has_bn:
            lay.bn_scale.data = src.bn_scale.data.copy()
            lay.bn_shift.data = src.bn_shift.data.copy()
            lay.bn_mean[:] = src.bn_mean
            lay.bn_var[:] = src.bn_var
    return model


def extract_mp(dist: TernaryDist) -> Model:
    """Most probable weights: per-weight argmax over the categorical."""
    ws = []
    for tl in dist.layers:
        idx = np.argmax(tl.logits.data, axis=-1)
        ws.append(_grid(tl)[idx])
    return _clone_with_weights(dist, ws)


def extract_sample(dist: TernaryDist, rng: np.random.Generator) -> Model:
    """One categorical draw per weight."""
    ws = []
    for tl in dist.layers:
        z = tl.logits.data - tl.logits.data.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        u = rng.random((p.shape[0], 1))
        idx = (np.cumsum(p, axis=-1) < u).sum(axis=-1)
        ws.append(_grid(tl)[np.minimum(idx, 2)])
    return _clone_with_weights(dist, ws)


def extract(dist: TernaryDist, how: str, rng: np.random.Generator | None = None, s: int = 1):
    """MP -> Model; sample -> Model; sample_avg -> list of S Models."""
    if how == "mp":
        return extract_mp(dist)
    if how == "sample":
        return extract_sample(dist, rng)
    if how == "sample_avg":
        if s < 1:
            raise ValueError("extract: sample count must be >= 1")
        return [extract_sample(dist, rng) for _ in range(s)]
    raise ValueError(f"extract: unknown mode {how!r}")


def uncertainty_map(
    dist: TernaryDist,
    predict_fn,
    sample,
    s: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of 20*log10(|prediction|) over S sampled-weight nets.

    predict_fn(model, sample) must return the complex output map of one
    extracted model on the given sample.
    """
    if s < 2:
        raise ValueError("uncertainty_map: need at least 2 samples")
    logs = []
    for _ in range(s):
        model = extract_sample(dist, rng)
        out = predict_fn(model, sample)
        logs.append(20.0 * np.log10(np.abs(out) + LOG_EPS_FLOOR))
    arr = np.stack(logs)
    return arr.mean(axis=0), arr.std(axis=0)


# ---------------------------------------------------------------------------
# checkpointing


def save_dist(path, dist: TernaryDist, extra: dict | None = None):
    arrays, blobs = [], []

    def put(name, a):
        arrays.append({"name": name, "shape": list(np.shape(a))})
        blobs.append(_f32(a))

    for l, (tl, lay) in enumerate(zip(dist.layers, dist.base.layers)):
        put(f"layer{l}.logits", tl.logits.data)
        put(f"layer{l}.bias", lay.bias.data)
        if lay.has_bn:
            put(f"layer{l}.bn_scale", lay.bn_scale.data)
            put(f"layer{l}.bn_shift", lay.bn_shift.data)
            put(f"layer{l}.bn_mean", lay.bn_mean)
            put(f"layer{l}.bn_var", lay.bn_var)
    meta = {
        "kind": "ternary",
        "arch": dist.spec.name,
        "arrays": arrays,
        "alphas": [tl.alpha for tl in dist.layers],
        "lam": dist.lam,
    }
    if extra:
        meta["extra"] = extra
    write_container(path, meta, blobs)


def load_dist(path) -> TernaryDist:
    meta, blobs = read_container(path)
    if meta.get("kind") != "ternary":
        raise EngineError(f"{path}: not a ternary distribution checkpoint")
    spec = ModelSpec.from_name(meta["arch"])
    base = build_model(spec, np.random.default_rng(0))
    named = _read_arrays(meta, blobs)
    layers = []
    for l, lay in enumerate(base.layers):
        lay.bias.data = named[f"layer{l}.bias"]
        if lay.has_bn:
            lay.bn_scale.data = named[f"layer{l}.bn_scale"]
            lay.bn_shift.data = named[f"layer{l}.bn_shift"]
            lay.bn_mean[:] = named[f"layer{l}.bn_mean"]
            lay.bn_var[:] = named[f"layer{l}.bn_var"]
        layers.append(
            TernaryLayer(
                logits=Tensor(named[f"layer{l}.logits"]),
                alpha=float(meta["alphas"][l]),
                weight_shape=tuple(lay.weight.shape),
            )
        )
    return TernaryDist(base=base, layers=layers, lam=float(meta["lam"]))
