"""Synthetic FMCW/CS radar frames, range-Doppler processing and datasets.

A frame is the complex N x M intermediate-frequency matrix (fast time x
ramps). Object returns are 2-D complex exponentials, interference enters
as time-limited real cosine chirp bursts on single ramps, noise is
circular complex white Gaussian. Two windowed unitary DFTs produce the
range-Doppler map that the denoiser trains on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np


@dataclass
class RadarConfig:
    n_fast: int = 96
    m_ramps: int = 96
    sample_period: float = 25e-9
    rd_height: int | None = None
    rd_width: int | None = None
    window: str = "hann"
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_fast < 8 or self.m_ramps < 8:
            raise ValueError("RadarConfig: need n_fast >= 8 and m_ramps >= 8")
        if self.sample_period <= 0:
            raise ValueError("RadarConfig: sample_period must be positive")
        if self.window not in ("none", "hann"):
            raise ValueError(f"RadarConfig: unknown window {self.window!r}")
        if self.rd_height is None:
            self.rd_height = self.n_fast
        if self.rd_width is None:
            self.rd_width = self.m_ramps

    @property
    def rd_cells(self) -> int:
        return self.rd_height * self.rd_width


@dataclass
class ObjectParams:
    amplitude: float
    range_freq: float    # cycles per fast-time sample
    doppler_freq: float  # cycles per ramp
    phase: float = 0.0

    def __post_init__(self):
        if self.amplitude <= 0:
            raise ValueError("ObjectParams: amplitude must be positive")
        if abs(self.range_freq) > 0.5 or abs(self.doppler_freq) > 0.5:
            raise ValueError("ObjectParams: normalized frequencies must lie in [-0.5, 0.5]")


@dataclass
class BurstParams:
    amplitude: float
    delay: float          # seconds
    half_duration: float  # seconds
    phase: float
    ramp_index: int
    burst_start: int
    burst_len: int

    def __post_init__(self):
        if self.half_duration <= 0:
            raise ValueError("BurstParams: half_duration must be positive")
        if self.ramp_index < 0:
            raise ValueError("BurstParams: ramp_index must be nonnegative")
        if self.burst_start < 0 or self.burst_len < 1:
            raise ValueError("BurstParams: invalid burst support")


@dataclass
class InterfererConfig:
    burst_count_range: tuple[int, int] = (2, 5)
    amplitude_range: tuple[float, float] = (8.0, 30.0)
    delay_range: tuple[float, float] | None = None      # seconds; default spans the ramp
    duration_range: tuple[float, float] | None = None   # seconds (half-duration T_k)
    phase_range: tuple[float, float] = (0.0, 2.0 * np.pi)
    filter_taps: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        lo, hi = self.burst_count_range
        if lo < 0 or hi < lo:
            raise ValueError("InterfererConfig: empty burst count range")
        if len(self.filter_taps) == 0:
            raise ValueError("InterfererConfig: filter_taps must be nonempty")
        for name in ("amplitude_range", "phase_range"):
            a, b = getattr(self, name)
            if b < a:
                raise ValueError(f"InterfererConfig: empty {name}")


@dataclass
class Frame:
    data: np.ndarray  # complex [N, M]


@dataclass
class RDMap:
    data: np.ndarray  # complex [H, W]


@dataclass
class LabeledSample:
    interfered: RDMap
    clean: RDMap
    gt_peaks: list[tuple[int, int]]
    snr_clean: float


@dataclass
class SampleTruth:
    """Simulator-side ground truth a persisted sample does not carry."""

    frame_interfered: Frame
    frame_clean: Frame
    interference_mask: np.ndarray  # bool [N, M]
    bursts: list[BurstParams]


@dataclass
class ScenarioConfig:
    n_objects_range: tuple[int, int] = (1, 5)
    amplitude_range: tuple[float, float] = (0.03, 1.0)  # log-uniform, >= 30 dB span
    min_separation: int = 4                             # Chebyshev bins between objects
    noise_power: float = 1e-3
    interferer: InterfererConfig | None = field(default_factory=InterfererConfig)

    def __post_init__(self):
        lo, hi = self.n_objects_range
        if lo < 1 or hi < lo:
            raise ValueError("ScenarioConfig: invalid object count range")
        a, b = self.amplitude_range
        if a <= 0 or b < a:
            raise ValueError("ScenarioConfig: invalid amplitude range")


# ---------------------------------------------------------------------------
# synthesis


def synth_object(cfg: RadarConfig, obj: ObjectParams) -> Frame:
    """Complex exponential: amplitude * exp(j(2pi(fr*n + fd*m) + phase))."""
    n = np.arange(cfg.n_fast)
    m = np.arange(cfg.m_ramps)
    col = np.exp(2j * np.pi * obj.range_freq * n)
    row = np.exp(2j * np.pi * obj.doppler_freq * m)
    return Frame(obj.amplitude * np.exp(1j * obj.phase) * np.outer(col, row))


def burst_waveform(cfg: RadarConfig, burst: BurstParams) -> np.ndarray:
    """Real chirp cosine evaluated on the burst support sample indices."""
    n = np.arange(burst.burst_start, burst.burst_start + burst.burst_len, dtype=np.float64)
    rate = cfg.sample_period / (2.0 * burst.half_duration)
    start = burst.delay / (2.0 * burst.half_duration)
    phase = -2.0 * np.pi * start * n + np.pi * rate * n**2 + burst.phase
    return burst.amplitude * np.cos(phase)


def synth_interference(
    cfg: RadarConfig, bursts: list[BurstParams], filter_taps=(1.0,)
) -> Frame:
    """Sum of chirp bursts, each on its own ramp, filtered along fast time.

    The cosine is injected as the real part of the complex IF signal and
    then convolved (causally) with the receiver impulse response taps.
    """
    data = np.zeros((cfg.n_fast, cfg.m_ramps), dtype=np.complex128)
    taps = np.asarray(filter_taps, dtype=np.float64)
    for burst in bursts:
        if burst.burst_start + burst.burst_len > cfg.n_fast:
            raise ValueError("synth_interference: burst support exceeds frame")
        if burst.ramp_index >= cfg.m_ramps:
            raise ValueError("synth_interference: ramp index outside frame")
        sig = np.zeros(cfg.n_fast, dtype=np.complex128)
        sig[burst.burst_start : burst.burst_start + burst.burst_len] = burst_waveform(cfg, burst)
        if taps.size > 1 or taps[0] != 1.0:
            sig = np.convolve(sig, taps)[: cfg.n_fast]
        data[:, burst.ramp_index] += sig
    return Frame(data)


def synth_noise(cfg: RadarConfig, power: float, rng: np.random.Generator | None = None) -> Frame:
    """Circular complex white Gaussian, per-entry variance = power."""
    if power < 0:
        raise ValueError("synth_noise: power must be nonnegative")
    if power == 0:
        return Frame(np.zeros((cfg.n_fast, cfg.m_ramps), dtype=np.complex128))
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    s = np.sqrt(power / 2.0)
    re = rng.standard_normal((cfg.n_fast, cfg.m_ramps))
    im = rng.standard_normal((cfg.n_fast, cfg.m_ramps))
    return Frame(s * (re + 1j * im))


def compose_frame(objects: Frame, interference: Frame, noise: Frame) -> Frame:
    """Elementwise sum of the three components."""
    if not (objects.data.shape == interference.data.shape == noise.data.shape):
        raise ValueError("compose_frame: shape mismatch")
    return Frame(objects.data + interference.data + noise.data)


# ---------------------------------------------------------------------------
# range-Doppler processing


def _window(kind: str, length: int) -> np.ndarray:
    if kind == "hann":
        return np.hanning(length)
    return np.ones(length)


def range_doppler(frame: Frame, cfg: RadarConfig) -> RDMap:
    """Windowed unitary DFT over fast time, then over slow time."""
    if frame.data.shape != (cfg.n_fast, cfg.m_ramps):
        raise ValueError("range_doppler: frame shape does not match config")
    wn = _window(cfg.window, cfg.n_fast)
    wm = _window(cfg.window, cfg.m_ramps)
    x = frame.data * wn[:, None]
    sr = np.fft.fft(x, n=cfg.rd_height, axis=0) / np.sqrt(cfg.rd_height)
    sr = sr * wm[None, :]
    srd = np.fft.fft(sr, n=cfg.rd_width, axis=1) / np.sqrt(cfg.rd_width)
    return RDMap(srd)


def range_profiles(frame: Frame, cfg: RadarConfig) -> np.ndarray:
    """First (fast-time) windowed unitary DFT only."""
    wn = _window(cfg.window, cfg.n_fast)
    return np.fft.fft(frame.data * wn[:, None], n=cfg.rd_height, axis=0) / np.sqrt(cfg.rd_height)


def doppler_transform(profiles: np.ndarray, cfg: RadarConfig) -> RDMap:
    """Second (slow-time) windowed unitary DFT applied to range profiles."""
    wm = _window(cfg.window, cfg.m_ramps)
    srd = np.fft.fft(profiles * wm[None, :], n=cfg.rd_width, axis=1) / np.sqrt(cfg.rd_width)
    return RDMap(srd)


# ---------------------------------------------------------------------------
# dataset generation


def _sample_objects(cfg: RadarConfig, scen: ScenarioConfig, rng) -> tuple[list[ObjectParams], list[tuple[int, int]]]:
    n_obj = int(rng.integers(scen.n_objects_range[0], scen.n_objects_range[1] + 1))
    bins: list[tuple[int, int]] = []
    guard = 0
    while len(bins) < n_obj:
        k = int(rng.integers(1, cfg.n_fast))
        l = int(rng.integers(0, cfg.m_ramps))
        ok = True
        for bk, bl in bins:
            dr = min(abs(k - bk), cfg.n_fast - abs(k - bk))
            dd = min(abs(l - bl), cfg.m_ramps - abs(l - bl))
            if max(dr, dd) < scen.min_separation:
                ok = False
                break
        if ok:
            bins.append((k, l))
        guard += 1
        if guard > 10_000:
            raise RuntimeError("object placement failed; loosen min_separation")
    objs = []
    a_lo, a_hi = scen.amplitude_range
    for k, l in bins:
        amp = float(np.exp(rng.uniform(np.log(a_lo), np.log(a_hi))))
        fr = k / cfg.n_fast
        fr = fr - 1.0 if fr > 0.5 else fr
        fd = l / cfg.m_ramps
        fd = fd - 1.0 if fd > 0.5 else fd
        objs.append(ObjectParams(amplitude=amp, range_freq=fr, doppler_freq=fd,
                                 phase=float(rng.uniform(0.0, 2.0 * np.pi))))
    return objs, bins


def sample_bursts(cfg: RadarConfig, icfg: InterfererConfig, rng) -> list[BurstParams]:
    """Draw burst parameters uniformly; supports derived from delay/duration.

    The chirp's instantaneous frequency crosses zero at sample delay/T_s and
    sweeps half a cycle per sample over the support of length
    2*half_duration/T_s, so the support is centered on the zero crossing.
    """
    ts = cfg.sample_period
    k = int(rng.integers(icfg.burst_count_range[0], icfg.burst_count_range[1] + 1))
    dur_range = icfg.duration_range or (4.0 * ts, 12.0 * ts)
    bursts = []
    for _ in range(k):
        half_dur = float(rng.uniform(*dur_range))
        half_samples = max(1, int(round(half_dur / ts)))
        if 2 * half_samples >= cfg.n_fast:
            half_samples = cfg.n_fast // 2 - 1
            half_dur = half_samples * ts
        delay_range = icfg.delay_range or (half_samples * ts, (cfg.n_fast - half_samples) * ts)
        delay = float(rng.uniform(*delay_range))
        center = int(round(delay / ts))
        center = min(max(center, half_samples), cfg.n_fast - half_samples)
        bursts.append(
            BurstParams(
                amplitude=float(rng.uniform(*icfg.amplitude_range)),
                delay=delay,
                half_duration=half_dur,
                phase=float(rng.uniform(*icfg.phase_range)),
                ramp_index=int(rng.integers(0, cfg.m_ramps)),
                burst_start=center - half_samples,
                burst_len=2 * half_samples,
            )
        )
    return bursts


def interference_mask(cfg: RadarConfig, bursts: list[BurstParams]) -> np.ndarray:
    mask = np.zeros((cfg.n_fast, cfg.m_ramps), dtype=bool)
    for b in bursts:
        mask[b.burst_start : b.burst_start + b.burst_len, b.ramp_index] = True
    return mask


def synth_sample(
    cfg: RadarConfig, scen: ScenarioConfig, rng: np.random.Generator
) -> tuple[LabeledSample, SampleTruth]:
    objs, bins = _sample_objects(cfg, scen, rng)
    obj_frame = Frame(np.zeros((cfg.n_fast, cfg.m_ramps), dtype=np.complex128))
    for o in objs:
        obj_frame.data += synth_object(cfg, o).data
    noise = synth_noise(cfg, scen.noise_power, rng)
    if scen.interferer is not None:
        bursts = sample_bursts(cfg, scen.interferer, rng)
        interf = synth_interference(cfg, bursts, scen.interferer.filter_taps)
    else:
        bursts = []
        interf = Frame(np.zeros_like(obj_frame.data))
    clean_frame = Frame(obj_frame.data + noise.data)
    full_frame = compose_frame(obj_frame, interf, noise)
    sig_power = float(np.sum(np.abs(obj_frame.data) ** 2))
    if scen.noise_power > 0:
        snr = 10.0 * np.log10(sig_power / (cfg.n_fast * cfg.m_ramps * scen.noise_power))
    else:
        snr = float("inf")
    sample = LabeledSample(
        interfered=range_doppler(full_frame, cfg),
        clean=range_doppler(clean_frame, cfg),
        gt_peaks=bins,
        snr_clean=snr,
    )
    truth = SampleTruth(
        frame_interfered=full_frame,
        frame_clean=clean_frame,
        interference_mask=interference_mask(cfg, bursts),
        bursts=bursts,
    )
    return sample, truth


def gen_dataset(
    cfg: RadarConfig,
    scen: ScenarioConfig,
    split_sizes: tuple[int, int, int],
    return_truth: bool = False,
):
    """Generate (train, val, test) LabeledSample lists from disjoint streams.

    Each split owns a spawned SeedSequence; each sample a child of that, so
    splits never overlap and generation is reproducible sample by sample.
    """
    if any(s < 1 for s in split_sizes):
        raise ValueError("gen_dataset: split sizes must be >= 1")
    root = np.random.SeedSequence(cfg.rng_seed)
    split_seqs = root.spawn(3)
    splits, truths = [], []
    for ss, n in zip(split_seqs, split_sizes):
        children = ss.spawn(n)
        samples, struth = [], []
        for child in children:
            s, t = synth_sample(cfg, scen, np.random.default_rng(child))
            samples.append(s)
            struth.append(t)
        splits.append(samples)
        truths.append(struth)
    if return_truth:
        return tuple(splits), tuple(truths)
    return tuple(splits)


# ---------------------------------------------------------------------------
# dataset persistence

DATASET_FORMAT_VERSION = 1
_SPLIT_NAMES = ("train", "val", "test")


def _sample_bytes(sample: LabeledSample) -> bytes:
    h, w = sample.interfered.data.shape
    buf = bytearray()
    buf += struct.pack("<B", DATASET_FORMAT_VERSION)
    for rd in (sample.interfered, sample.clean):
        inter = np.empty((h, w, 2), dtype="<f4")
        inter[:, :, 0] = rd.data.real
        inter[:, :, 1] = rd.data.imag
        buf += inter.tobytes()
    buf += struct.pack("<H", len(sample.gt_peaks))
    for r, d in sample.gt_peaks:
        buf += struct.pack("<HH", r, d)
    return bytes(buf)


def _sample_from_bytes(raw: bytes, shape: tuple[int, int]) -> LabeledSample:
    (version,) = struct.unpack_from("<B", raw, 0)
    if version != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported sample format version {version}")
    h, w = shape
    off = 1
    maps = []
    for _ in range(2):
        n = h * w * 2
        a = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(h, w, 2)
        maps.append(RDMap((a[:, :, 0] + 1j * a[:, :, 1]).astype(np.complex128)))
        off += 4 * n
    (count,) = struct.unpack_from("<H", raw, off)
    off += 2
    peaks = []
    for _ in range(count):
        r, d = struct.unpack_from("<HH", raw, off)
        peaks.append((r, d))
        off += 4
    return LabeledSample(interfered=maps[0], clean=maps[1], gt_peaks=peaks, snr_clean=0.0)


def save_dataset(path, cfg: RadarConfig, scen: ScenarioConfig, splits, extra_meta=None):
    """Write meta.json plus one binary file per sample."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest_splits, snrs = {}, {}
    idx = 0
    for name, samples in zip(_SPLIT_NAMES, splits):
        ids = []
        for s in samples:
            (root / f"sample_{idx:05d}.bin").write_bytes(_sample_bytes(s))
            snrs[str(idx)] = round(s.snr_clean, 6)
            ids.append(idx)
            idx += 1
        manifest_splits[name] = ids
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "radar": asdict(cfg),
        "scenario": _scenario_dict(scen),
        "splits": manifest_splits,
        "snr_clean_db": snrs,
    }
    if extra_meta:
        meta.update(extra_meta)
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def _scenario_dict(scen: ScenarioConfig) -> dict:
    d = asdict(scen)
    return d


def scenario_from_dict(d: dict) -> ScenarioConfig:
    d = dict(d)
    icfg = d.pop("interferer", None)
    interferer = None
    if icfg is not None:
        icfg = dict(icfg)
        for k in ("burst_count_range", "amplitude_range", "delay_range",
                  "duration_range", "phase_range", "filter_taps"):
            if icfg.get(k) is not None:
                icfg[k] = tuple(icfg[k])
        interferer = InterfererConfig(**icfg)
    for k in ("n_objects_range", "amplitude_range"):
        d[k] = tuple(d[k])
    return ScenarioConfig(interferer=interferer, **d)


def radar_from_dict(d: dict) -> RadarConfig:
    return RadarConfig(**d)


def load_dataset(path):
    """Read a dataset directory; returns (cfg, scenario, (train, val, test))."""
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {meta.get('format_version')}")
    cfg = radar_from_dict(meta["radar"])
    scen = scenario_from_dict(meta["scenario"])
    shape = (cfg.rd_height, cfg.rd_width)
    splits = []
    for name in _SPLIT_NAMES:
        samples = []
        for idx in meta["splits"][name]:
            raw = (root / f"sample_{idx:05d}.bin").read_bytes()
            s = _sample_from_bytes(raw, shape)
            s.snr_clean = float(meta["snr_clean_db"].get(str(idx), 0.0))
            samples.append(s)
        splits.append(samples)
    return cfg, scen, tuple(splits)
