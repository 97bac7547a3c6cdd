"""Detection and scoring: CA-CFAR, peak matching, F1, memory/ops accounting.

The CFAR thresholds each cell's power against the mean power of a
surrounding training ring (guard cells excluded); the Doppler axis wraps,
the range axis is truncated at the map edge. Detections are additionally
required to be strict 3x3 local maxima, which deduplicates ridge cells.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import ModelSpec
from .sim import RDMap


@dataclass
class CFARConfig:
    guard_range: int = 2
    guard_doppler: int = 2
    train_range: int = 8
    train_doppler: int = 8
    scale: float = 7.0  # ~1e-3 false alarm per cell on white noise

    def __post_init__(self):
        if self.train_range < 1 or self.train_doppler < 1:
            raise ValueError("CFARConfig: need at least 1 training cell per side")
        if self.scale <= 1.0:
            raise ValueError("CFARConfig: scale must exceed 1")


@dataclass
class F1Report:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    mean_f1: float
    std_f1: float
    n_seeds: int = 1


@dataclass
class MemoryReport:
    weight_bytes: float
    activation_bytes: float
    total_bytes: float
    activation_pair: tuple[int, int]
    per_layer_weight_bytes: list[float]

    @property
    def weight_kb(self):
        return self.weight_bytes / 1024.0

    @property
    def activation_kb(self):
        return self.activation_bytes / 1024.0

    @property
    def total_kb(self):
        return self.total_bytes / 1024.0


@dataclass
class OpsReport:
    macs: int
    act_ops: int

    @property
    def mops(self) -> float:
        return (self.macs + self.act_ops) / 1e6


# ---------------------------------------------------------------------------
# CA-CFAR


def _box_sum(a: np.ndarray, hr: int, hd: int) -> np.ndarray:
    """Sum over a (2hr+1) x (2hd+1) box; input already padded by (hr, hd)."""
    c = np.cumsum(np.cumsum(a, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    n, m = a.shape[0] - 2 * hr, a.shape[1] - 2 * hd
    win_r, win_d = 2 * hr + 1, 2 * hd + 1
    return (
        c[win_r : win_r + n, win_d : win_d + m]
        - c[:n, win_d : win_d + m]
        - c[win_r : win_r + n, :m]
        + c[:n, :m]
    )


def _pad_mixed(a: np.ndarray, hr: int, hd: int, fill: float) -> np.ndarray:
    """Pad: wrap along Doppler (axis 1), constant fill along range (axis 0)."""
    a = np.pad(a, ((0, 0), (hd, hd)), mode="wrap")
    return np.pad(a, ((hr, hr), (0, 0)), mode="constant", constant_values=fill)


def cfar_threshold_map(power: np.ndarray, cfg: CFARConfig) -> np.ndarray:
    """scale * mean power over training cells, per cell."""
    er, ed = cfg.train_range + cfg.guard_range, cfg.train_doppler + cfg.guard_doppler
    gr, gd = cfg.guard_range, cfg.guard_doppler
    if 2 * er + 1 > power.shape[0] or 2 * ed + 1 > power.shape[1]:
        raise ValueError("cacfar: window larger than map")
    ppad = _pad_mixed(power, er, ed, 0.0)
    cpad = _pad_mixed(np.ones_like(power), er, ed, 0.0)
    total = _box_sum(ppad, er, ed)
    count = _box_sum(cpad, er, ed)
    guard_total = _box_sum(ppad[er - gr : ppad.shape[0] - (er - gr),
                                ed - gd : ppad.shape[1] - (ed - gd)], gr, gd)
    guard_count = _box_sum(cpad[er - gr : cpad.shape[0] - (er - gr),
                                ed - gd : cpad.shape[1] - (ed - gd)], gr, gd)
    mean = (total - guard_total) / (count - guard_count)
    return cfg.scale * mean


def _local_max_mask(power: np.ndarray) -> np.ndarray:
    """Strict 3x3 local maxima; Doppler wraps, range edges truncate."""
    p = np.pad(power, ((1, 1), (0, 0)), mode="constant", constant_values=-np.inf)
    p = np.pad(p, ((0, 0), (1, 1)), mode="wrap")
    center = p[1:-1, 1:-1]
    ok = np.ones(power.shape, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            ok &= center > p[1 + di : 1 + di + power.shape[0], 1 + dj : 1 + dj + power.shape[1]]
    return ok


def cacfar(rdmap: RDMap, cfg: CFARConfig) -> list[tuple[int, int, float]]:
    """Detections as (range_bin, doppler_bin, magnitude), row-major order."""
    power = np.abs(rdmap.data) ** 2
    thr = cfar_threshold_map(power, cfg)
    hits = (power > thr) & _local_max_mask(power)
    mag = np.abs(rdmap.data)
    return [(int(r), int(d), float(mag[r, d])) for r, d in zip(*np.nonzero(hits))]


def calibrate_cfar_scale(
    map_shape: tuple[int, int],
    cfg: CFARConfig,
    pfa: float = 1e-3,
    n_maps: int = 16,
    rng: np.random.Generator | None = None,
) -> float:
    """Scale whose threshold-exceedance rate on white-noise maps is ~pfa."""
    if rng is None:
        rng = np.random.default_rng(0)
    ratios = []
    base = CFARConfig(cfg.guard_range, cfg.guard_doppler, cfg.train_range,
                      cfg.train_doppler, scale=2.0)
    for _ in range(n_maps):
        z = (rng.standard_normal(map_shape) + 1j * rng.standard_normal(map_shape)) / np.sqrt(2)
        power = np.abs(z) ** 2
        mean = cfar_threshold_map(power, base) / base.scale
        ratios.append(power / mean)
    return float(np.quantile(np.concatenate([r.ravel() for r in ratios]), 1.0 - pfa))


# ---------------------------------------------------------------------------
# matching and F1


def _chebyshev(a, b, wrap_shape=None) -> int:
    dr = abs(a[0] - b[0])
    dd = abs(a[1] - b[1])
    if wrap_shape is not None:
        dr = min(dr, wrap_shape[0] - dr)
        dd = min(dd, wrap_shape[1] - dd)
    return max(dr, dd)


def _max_matching(adj: list[list[int]], n_right: int) -> int:
    """Maximum bipartite matching size via augmenting paths."""
    match_right = [-1] * n_right

    def try_assign(u, seen):
        for v in adj[u]:
            if seen[v]:
                continue
            seen[v] = True
            if match_right[v] == -1 or try_assign(match_right[v], seen):
                match_right[v] = u
                return True
        return False

    size = 0
    for u in range(len(adj)):
        if try_assign(u, [False] * n_right):
            size += 1
    return size


def match_and_score(
    detections, gt_peaks, tol: int = 1, wrap_shape: tuple[int, int] | None = None
) -> tuple[float, float, float]:
    """One-to-one matching within Chebyshev distance tol; returns (p, r, F1).

    Matching is maximum-cardinality, so the true-positive count equals the
    best possible assignment. Detections may carry a trailing magnitude.
    """
    if tol < 0:
        raise ValueError("match_and_score: tol must be nonnegative")
    det = [(d[0], d[1]) for d in detections]
    adj = [
        [j for j, g in enumerate(gt_peaks) if _chebyshev(d, g, wrap_shape) <= tol]
        for d in det
    ]
    tp = _max_matching(adj, len(gt_peaks))
    fp = len(det) - tp
    fn = len(gt_peaks) - tp
    p = tp / (tp + fp) if tp + fp > 0 else 1.0
    r = tp / (tp + fn) if tp + fn > 0 else 1.0
    f1 = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def evaluate_predictions(
    predictions: list[RDMap],
    samples,
    cfar: CFARConfig,
    tol: int = 1,
) -> F1Report:
    """Score a list of mitigated/denoised maps against their samples' truth."""
    ps, rs, f1s = [], [], []
    for pred, sample in zip(predictions, samples):
        dets = cacfar(pred, cfar)
        shape = pred.data.shape
        p, r, f1 = match_and_score(dets, sample.gt_peaks, tol=tol, wrap_shape=shape)
        ps.append(p)
        rs.append(r)
        f1s.append(f1)
    arr = np.asarray(f1s)
    return F1Report(precision=ps, recall=rs, f1=f1s,
                    mean_f1=float(arr.mean()), std_f1=float(arr.std()))


def evaluate_model(predict_fn, samples, cfar: CFARConfig, csv_path=None, tol: int = 1) -> F1Report:
    """Run `predict_fn(sample) -> RDMap` over a split and score it.

    Writes the per-sample CSV (sample_id, p, r, f1 plus a sorted-F1 CDF
    column) when csv_path is given.
    """
    preds = [predict_fn(s) for s in samples]
    report = evaluate_predictions(preds, samples, cfar, tol=tol)
    if csv_path is not None:
        write_f1_csv(csv_path, report)
    return report


def aggregate_reports(reports: list[F1Report]) -> F1Report:
    """Mean/std of per-seed mean F1 (one trained model per report)."""
    means = np.asarray([r.mean_f1 for r in reports])
    return F1Report(
        precision=[x for r in reports for x in r.precision],
        recall=[x for r in reports for x in r.recall],
        f1=[x for r in reports for x in r.f1],
        mean_f1=float(means.mean()),
        std_f1=float(means.std()),
        n_seeds=len(reports),
    )


def write_f1_csv(path, report: F1Report):
    srt = sorted(report.f1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "precision", "recall", "f1", "f1_sorted_cdf"])
        for i, (p, r, f1) in enumerate(zip(report.precision, report.recall, report.f1)):
            w.writerow([i, f"{p:.6f}", f"{r:.6f}", f"{f1:.6f}", f"{srt[i]:.6f}"])


# ---------------------------------------------------------------------------
# memory and operation accounting


def _channel_list(spec_or_channels) -> list[int]:
    if isinstance(spec_or_channels, ModelSpec):
        return list(spec_or_channels.channels)
    return list(spec_or_channels)


def _per_layer(bits, n: int) -> list[float]:
    if np.isscalar(bits):
        return [float(bits)] * n
    bits = list(bits)
    if len(bits) != n:
        raise ValueError(f"expected {n} per-layer bit entries, got {len(bits)}")
    return [float(b) for b in bits]


def memory_report(
    spec_or_channels,
    rd_cells: int = 9216,
    weight_bits=32,
    act_bits=32,
    act_quantized: bool | None = None,
) -> MemoryReport:
    """Inference memory: packed weights + the largest adjacent activation pair.

    Weight bytes are sum over layers of count_l * bits_l / 8 (the one f32
    dynamic range per quantized layer is ignored, matching the tables).
    Activation values per layer are C_l * rd_cells with the input counted as
    layer 0 (2 channels). When activations are quantized the input is
    accounted at the first layer's activation bit-width; the final linear
    output always stays at 32 bits.
    """
    chans = _channel_list(spec_or_channels)
    n_layers = len(chans)
    cs = [2] + chans
    wbits = _per_layer(weight_bits, n_layers)
    abits = _per_layer(act_bits, n_layers - 1) if n_layers > 1 else []
    if act_quantized is None:
        act_quantized = any(b != 32 for b in abits)

    counts = [9 * cs[i] * cs[i + 1] for i in range(n_layers)]
    per_layer_w = [c * b / 8.0 for c, b in zip(counts, wbits)]
    weight_bytes = float(sum(per_layer_w))

    layer_bits = [abits[0] if (act_quantized and abits) else 32.0]
    layer_bits += abits
    layer_bits += [32.0]
    values = [c * rd_cells for c in cs]
    pair_bytes = [
        (values[i] * layer_bits[i] + values[i + 1] * layer_bits[i + 1]) / 8.0
        for i in range(n_layers)
    ]
    best = int(np.argmax(pair_bytes))
    act_bytes = float(pair_bytes[best])
    return MemoryReport(
        weight_bytes=weight_bytes,
        activation_bytes=act_bytes,
        total_bytes=weight_bytes + act_bytes,
        activation_pair=(best, best + 1),
        per_layer_weight_bytes=per_layer_w,
    )


def ops_report(spec_or_channels, rd_cells: int = 9216) -> OpsReport:
    """MACs for all convs plus 3 ops (BN scale/shift + ReLU) per hidden value."""
    chans = _channel_list(spec_or_channels)
    cs = [2] + chans
    macs = sum(9 * cs[i] * cs[i + 1] * rd_cells for i in range(len(chans)))
    hidden_values = sum(c * rd_cells for c in chans[:-1])
    return OpsReport(macs=int(macs), act_ops=int(3 * hidden_values))


def write_memory_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arch", "params", "weight_kb", "activation_kb", "total_kb"])
        for r in rows:
            w.writerow([r["arch"], r["params"], f"{r['weight_kb']:.2f}",
                        f"{r['activation_kb']:.2f}", f"{r['total_kb']:.2f}"])


def write_mops_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arch", "macs", "act_ops", "mops"])
        for r in rows:
            w.writerow([r["arch"], r["macs"], r["act_ops"], f"{r['mops']:.2f}"])
