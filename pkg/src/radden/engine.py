"""Minimal reverse-mode tensor engine for the radar denoising CNN.

Supports exactly the layer set the denoiser needs: 3x3 same-padding
convolution, batch normalization, ReLU, elementwise arithmetic, MSE loss
and Adam. Data lives in float64 numpy arrays; checkpoints are stored as
float32. The 3x3 convolution kernels are numba-jitted; each parallel
iteration writes a disjoint output slab, so results are bitwise
reproducible run to run.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange


class EngineError(Exception):
    pass


# ---------------------------------------------------------------------------
# autodiff core


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node of the reverse-mode tape: float64 data plus an optional grad."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    # -- plumbing -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def accum(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        """Reverse traversal from this (scalar) node."""
        if self.data.size != 1:
            raise EngineError("backward() requires a scalar loss")
        if self._backward is None and not self._parents:
            raise EngineError("backward() on a leaf: no recorded computation")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        o = as_tensor(other)
        out = Tensor(self.data + o.data, (self, o))

        def bwd(g):
            self.accum(_unbroadcast(g, self.shape))
            o.accum(_unbroadcast(g, o.shape))

        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._backward = lambda g: self.accum(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        o = as_tensor(other)
        out = Tensor(self.data * o.data, (self, o))

        def bwd(g):
            self.accum(_unbroadcast(g * o.data, self.shape))
            o.accum(_unbroadcast(g * self.data, o.shape))

        out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = as_tensor(other)
        out = Tensor(self.data / o.data, (self, o))

        def bwd(g):
            self.accum(_unbroadcast(g / o.data, self.shape))
            o.accum(_unbroadcast(-g * self.data / o.data**2, o.shape))

        out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p):
        assert np.isscalar(p)
        out = Tensor(self.data**p, (self,))
        out._backward = lambda g: self.accum(g * p * self.data ** (p - 1))
        return out

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.accum(np.broadcast_to(g, self.shape).copy())

        out._backward = bwd
        return out

    def mean(self):
        return self.sum() / self.size

    def reshape(self, *shape):
        old = self.shape
        out = Tensor(self.data.reshape(*shape), (self,))
        out._backward = lambda g: self.accum(g.reshape(old))
        return out

    def exp(self):
        out = Tensor(np.exp(self.data), (self,))
        out._backward = lambda g: self.accum(g * out.data)
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))
        out._backward = lambda g: self.accum(g / self.data)
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def softmax(t: Tensor, axis=-1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, (t,))

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        t.accum(p * (g - dot))

    out._backward = bwd
    return out


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    out = Tensor(np.where(mask, t.data, 0.0), (t,))
    out._backward = lambda g: t.accum(g * mask)
    return out


def mse_loss(pred: Tensor, target) -> Tensor:
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    diff = pred.data - tgt
    out = Tensor(np.mean(diff**2), (pred,))
    out._backward = lambda g: pred.accum(g * 2.0 * diff / diff.size)
    return out


# ---------------------------------------------------------------------------
# 3x3 same-padding convolution (numba kernels + Tensor op)


@njit(parallel=True, cache=True)
def _conv3x3_fwd(x, w, b):
    B, Ci, H, W = x.shape
    Co = w.shape[0]
    y = np.empty((B, Co, H, W))
    for bi in prange(B * Co):
        bb = bi // Co
        co = bi % Co
        acc = np.zeros((H, W))
        for ci in range(Ci):
            for di in range(3):
                for dj in range(3):
                    wv = w[co, ci, di, dj]
                    i0 = di - 1
                    j0 = dj - 1
                    ilo = max(0, -i0)
                    ihi = min(H, H - i0)
                    jlo = max(0, -j0)
                    jhi = min(W, W - j0)
                    for i in range(ilo, ihi):
                        for j in range(jlo, jhi):
                            acc[i, j] += wv * x[bb, ci, i + i0, j + j0]
        y[bb, co] = acc + b[co]
    return y


@njit(parallel=True, cache=True)
def _conv3x3_bwd_x(dy, w):
    B, Co, H, W = dy.shape
    Ci = w.shape[1]
    dx = np.empty((B, Ci, H, W))
    for bi in prange(B * Ci):
        bb = bi // Ci
        ci = bi % Ci
        acc = np.zeros((H, W))
        for co in range(Co):
            for di in range(3):
                for dj in range(3):
                    wv = w[co, ci, di, dj]
                    i0 = di - 1
                    j0 = dj - 1
                    plo = max(0, i0)
                    phi = min(H, H + i0)
                    qlo = max(0, j0)
                    qhi = min(W, W + j0)
                    for p in range(plo, phi):
                        for q in range(qlo, qhi):
                            acc[p, q] += wv * dy[bb, co, p - i0, q - j0]
        dx[bb, ci] = acc
    return dx


@njit(parallel=True, cache=True)
def _conv3x3_bwd_w(dy, x, Ci):
    B, Co, H, W = dy.shape
    dw = np.zeros((Co, Ci, 3, 3))
    for oc in prange(Co * Ci):
        co = oc // Ci
        ci = oc % Ci
        for di in range(3):
            for dj in range(3):
                i0 = di - 1
                j0 = dj - 1
                ilo = max(0, -i0)
                ihi = min(H, H - i0)
                jlo = max(0, -j0)
                jhi = min(W, W - j0)
                s = 0.0
                for bb in range(B):
                    for i in range(ilo, ihi):
                        for j in range(jlo, jhi):
                            s += dy[bb, co, i, j] * x[bb, ci, i + i0, j + j0]
                dw[co, ci, di, dj] = s
    return dw


def conv2d_same(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, zero padding 1, stride 1; bias added."""
    if x.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise EngineError(
            f"conv2d_same: input {x.shape} incompatible with weight {weight.shape}"
        )
    xd = np.ascontiguousarray(x.data)
    y = _conv3x3_fwd(xd, weight.data, bias.data)
    out = Tensor(y, (x, weight, bias))

    def bwd(g):
        g = np.ascontiguousarray(g)
        x.accum(_conv3x3_bwd_x(g, weight.data))
        weight.accum(_conv3x3_bwd_w(g, xd, weight.shape[1]))
        bias.accum(g.sum(axis=(0, 2, 3)))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_running: bool = True,
) -> Tensor:
    """Per-channel normalization over (batch, H, W), then scale/shift.

    Train mode uses batch statistics and (by default) updates the running
    stats in place with the given momentum; eval mode uses running stats.
    """
    if x.shape[0] == 0:
        raise EngineError("batch_norm: empty batch")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var
    elif mode == "eval":
        mu, var = running_mean, running_var
    else:
        raise EngineError(f"batch_norm: unknown mode {mode!r}")

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = Tensor(xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None],
                 (x, scale, shift))

    def bwd(g):
        shift.accum(g.sum(axis=axes))
        scale.accum((g * xhat).sum(axis=axes))
        dxhat = g * scale.data[None, :, None, None]
        if mode == "eval":
            x.accum(dxhat * inv[None, :, None, None])
            return
        # batch statistics participate in the graph
        dvar = (dxhat * (x.data - mu[None, :, None, None])).sum(axis=axes) * (
            -0.5
        ) * inv**3
        dmu = -(dxhat.sum(axis=axes)) * inv + dvar * (
            -2.0 / n
        ) * (x.data - mu[None, :, None, None]).sum(axis=axes)
        dx = (
            dxhat * inv[None, :, None, None]
            + (2.0 / n) * dvar[None, :, None, None] * (x.data - mu[None, :, None, None])
            + dmu[None, :, None, None] / n
        )
        x.accum(dx)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# model description


ARCH_A = "A"
ARCH_B = "B"


@dataclass
class ModelSpec:
    """Layered CNN description: L conv layers, 3x3 kernels, 2-channel output."""

    layers: int
    channels: list[int]
    arch: str
    kernel: int = 3

    def __post_init__(self):
        if self.layers < 2:
            raise EngineError("ModelSpec: at least 2 layers required")
        if len(self.channels) != self.layers:
            raise EngineError("ModelSpec: channel list length must equal layer count")
        if self.channels[-1] != 2:
            raise EngineError("ModelSpec: last layer must have 2 channels")
        hidden = self.channels[:-1]
        if self.arch == ARCH_A:
            if any(c != hidden[0] for c in hidden):
                raise EngineError("ModelSpec: architecture A requires equal hidden channels")
        elif self.arch == ARCH_B:
            for i in range(1, len(hidden)):
                if hidden[i] != max(hidden[i - 1] // 2, 2):
                    raise EngineError("ModelSpec: architecture B requires halving channels")
        else:
            raise EngineError(f"ModelSpec: unknown architecture {self.arch!r}")

    @classmethod
    def from_name(cls, name: str) -> "ModelSpec":
        """Parse names like 'L3-C16-B' (layer count, leading channels, arch)."""
        parts = name.strip().split("-")
        if len(parts) != 3 or not parts[0].startswith("L") or not parts[1].startswith("C"):
            raise EngineError(f"unparsable architecture name: {name!r}")
        try:
            layers = int(parts[0][1:])
            c0 = int(parts[1][1:])
        except ValueError as e:
            raise EngineError(f"unparsable architecture name: {name!r}") from e
        arch = parts[2]
        if arch == ARCH_A:
            channels = [c0] * (layers - 1) + [2]
        elif arch == ARCH_B:
            channels = [max(c0 >> i, 2) for i in range(layers - 1)] + [2]
        else:
            raise EngineError(f"unparsable architecture name: {name!r}")
        return cls(layers=layers, channels=channels, arch=arch)

    @property
    def name(self) -> str:
        return f"L{self.layers}-C{self.channels[0]}-{self.arch}"

    def conv_weight_count(self) -> int:
        """Total conv weights (excluding bias/BN): sum over 9*C_in*C_out."""
        cs = [2] + list(self.channels)
        return sum(9 * cs[i] * cs[i + 1] for i in range(self.layers))


@dataclass
class LayerParams:
    """Parameters of one conv layer; BN present on hidden layers only."""

    weight: Tensor
    bias: Tensor
    bn_scale: Tensor | None = None
    bn_shift: Tensor | None = None
    bn_mean: np.ndarray | None = None
    bn_var: np.ndarray | None = None

    @property
    def has_bn(self) -> bool:
        return self.bn_scale is not None


@dataclass
class Model:
    spec: ModelSpec
    layers: list[LayerParams]

    def parameters(self) -> list[Tensor]:
        ps = []
        for lay in self.layers:
            ps.extend([lay.weight, lay.bias])
            if lay.has_bn:
                ps.extend([lay.bn_scale, lay.bn_shift])
        return ps

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(
        self,
        x,
        mode: str = "train",
        weight_fn=None,
        act_fn=None,
        update_running: bool = True,
    ) -> Tensor:
        """Conv -> BN -> activation for hidden layers, linear conv output.

        `weight_fn(l, weight)` substitutes the effective conv weights of layer
        l (quantizers hook in here); `act_fn(l, pre)` substitutes the hidden
        activation (default ReLU).
        """
        t = as_tensor(x)
        if t.data.ndim != 4 or t.shape[1] != 2:
            raise EngineError("forward: expected input of shape [B, 2, H, W]")
        for l, lay in enumerate(self.layers):
            w = lay.weight if weight_fn is None else weight_fn(l, lay.weight)
            t = conv2d_same(t, w, lay.bias)
            if lay.has_bn:
                t = batch_norm(
                    t, lay.bn_scale, lay.bn_shift, lay.bn_mean, lay.bn_var,
                    mode=mode, update_running=update_running and mode == "train",
                )
                t = relu(t) if act_fn is None else act_fn(l, t)
        return t


def build_model(spec: ModelSpec, rng: np.random.Generator) -> Model:
    """He-uniform conv init, BN scale 1 / shift 0, zero bias."""
    layers = []
    cs = [2] + list(spec.channels)
    for l in range(spec.layers):
        ci, co = cs[l], cs[l + 1]
        limit = np.sqrt(6.0 / (ci * 9))
        w = Tensor(rng.uniform(-limit, limit, size=(co, ci, 3, 3)))
        b = Tensor(np.zeros(co))
        if l < spec.layers - 1:
            layers.append(
                LayerParams(
                    weight=w,
                    bias=b,
                    bn_scale=Tensor(np.ones(co)),
                    bn_shift=Tensor(np.zeros(co)),
                    bn_mean=np.zeros(co),
                    bn_var=np.ones(co),
                )
            )
        else:
            layers.append(LayerParams(weight=w, bias=b))
    return Model(spec=spec, layers=layers)


def forward_model(model: Model, x, mode: str = "train", **kw) -> Tensor:
    return model.forward(x, mode=mode, **kw)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], lr: float = 1e-3, **kw) -> "AdamState":
        st = cls(lr=lr, **kw)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def adam_step(params: list[Tensor], state: AdamState):
    """Bias-corrected Adam update; params with grad None are skipped."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * p.grad
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * p.grad**2
        p.data -= state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)


# ---------------------------------------------------------------------------
# checkpoint container (f32 storage; quantized layers carry packed blobs)

CHECKPOINT_MAGIC = b"RDCK"
CHECKPOINT_VERSION = 1


def write_container(path, meta: dict, blobs: list[bytes]):
    """JSON header + concatenated binary blobs; offsets recorded in header."""
    offsets, off = [], 0
    for b in blobs:
        offsets.append([off, len(b)])
        off += len(b)
    meta = dict(meta)
    meta["format_version"] = CHECKPOINT_VERSION
    meta["blob_spans"] = offsets
    header = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def read_container(path) -> tuple[dict, list[bytes]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise EngineError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(hlen).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise EngineError(
                f"{path}: unsupported checkpoint version {meta.get('format_version')}"
            )
        payload = f.read()
    blobs = [payload[o : o + n] for o, n in meta["blob_spans"]]
    return meta, blobs


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_model(path, model: Model, extra: dict | None = None):
    """Real-valued checkpoint: little-endian f32 arrays in declaration order."""
    arrays, blobs = [], []

    def put(name, a):
        arrays.append({"name": name, "shape": list(np.shape(a))})
        blobs.append(_f32(a))

    for l, lay in enumerate(model.layers):
        put(f"layer{l}.weight", lay.weight.data)
        put(f"layer{l}.bias", lay.bias.data)
        if lay.has_bn:
            put(f"layer{l}.bn_scale", lay.bn_scale.data)
            put(f"layer{l}.bn_shift", lay.bn_shift.data)
            put(f"layer{l}.bn_mean", lay.bn_mean)
            put(f"layer{l}.bn_var", lay.bn_var)
    meta = {"kind": "real", "arch": model.spec.name, "arrays": arrays}
    if extra:
        meta["extra"] = extra
    write_container(path, meta, blobs)


def _read_arrays(meta, blobs) -> dict[str, np.ndarray]:
    out = {}
    for rec, blob in zip(meta["arrays"], blobs[: len(meta["arrays"])]):
        a = np.frombuffer(blob, dtype="<f4").astype(np.float64)
        out[rec["name"]] = a.reshape(rec["shape"])
    return out


def load_model(path) -> Model:
    meta, blobs = read_container(path)
    if meta.get("kind") not in ("real", "qat"):
        raise EngineError(f"{path}: checkpoint kind {meta.get('kind')!r} is not a model")
    spec = ModelSpec.from_name(meta["arch"])
    model = build_model(spec, np.random.default_rng(0))
    named = _read_arrays(meta, blobs)
    if meta.get("kind") == "qat":
        from . import quant  # packed integer weight blobs

        qmeta = meta["quant_layers"]
        narr = len(meta["arrays"])
        for l, lay in enumerate(model.layers):
            rec = qmeta[l]
            blob = blobs[narr + l]
            if rec.get("packed", True):
                w = quant.unpack_weights(
                    blob, rec["k"], int(np.prod(lay.weight.shape)), rec["alpha"]
                )
            else:
                w = np.frombuffer(blob, dtype="<f4").astype(np.float64)
            lay.weight.data = w.reshape(lay.weight.shape)
    for l, lay in enumerate(model.layers):
        if meta.get("kind") != "qat":
            lay.weight.data = named[f"layer{l}.weight"]
        lay.bias.data = named[f"layer{l}.bias"]
        if lay.has_bn:
            lay.bn_scale.data = named[f"layer{l}.bn_scale"]
            lay.bn_shift.data = named[f"layer{l}.bn_shift"]
            lay.bn_mean[:] = named[f"layer{l}.bn_mean"]
            lay.bn_var[:] = named[f"layer{l}.bn_var"]
    return model
