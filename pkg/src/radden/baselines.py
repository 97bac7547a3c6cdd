"""Classical interference mitigation references: zeroing, IMAT, RF-min.

Zeroing and IMAT consume a detection mask of interference-hit time-domain
samples; the simulated detector flips a controlled fraction of the ground
truth mask so detector quality becomes an experiment knob. Ramp filtering
needs no mask: it clips per-range-bin magnitude outliers across ramps in
the range-profile domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import Frame, RadarConfig, RDMap, range_profiles, doppler_transform


@dataclass
class BaselineConfig:
    detector_accuracy: float = 0.9
    imat_iterations: int = 10
    imat_threshold_init: float = 0.5   # fraction of the max spectrum magnitude
    imat_threshold_decay: float = 0.8
    rfmin_clip: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.detector_accuracy <= 1.0:
            raise ValueError("BaselineConfig: detector accuracy must be in (0, 1]")
        if self.imat_iterations < 0:
            raise ValueError("BaselineConfig: iterations must be >= 0")
        if not 0.0 < self.imat_threshold_decay < 1.0:
            raise ValueError("BaselineConfig: decay must be in (0, 1)")


def detect_interference(
    frame: Frame, gt_mask: np.ndarray, accuracy: float, rng: np.random.Generator
) -> np.ndarray:
    """Ground-truth mask with a (1-accuracy) fraction of entries flipped.

    Flips hit uniformly random cells, producing both misses and false
    alarms; deterministic for a given rng state.
    """
    if not 0.0 < accuracy <= 1.0:
        raise ValueError("detect_interference: accuracy must be in (0, 1]")
    if gt_mask.shape != frame.data.shape:
        raise ValueError("detect_interference: mask shape mismatch")
    mask = gt_mask.copy()
    n_flip = int(round((1.0 - accuracy) * mask.size))
    if n_flip > 0:
        idx = rng.choice(mask.size, size=n_flip, replace=False)
        flat = mask.ravel()
        flat[idx] = ~flat[idx]
    return mask


def zeroing(frame: Frame, mask: np.ndarray) -> Frame:
    """Masked samples set to 0+0j; no boundary smoothing."""
    if mask.shape != frame.data.shape:
        raise ValueError("zeroing: mask shape mismatch")
    out = frame.data.copy()
    out[mask] = 0.0
    return Frame(out)


def imat(frame: Frame, mask: np.ndarray, cfg: BaselineConfig) -> Frame:
    """Iterative Fourier thresholding: rebuild masked samples per ramp.

    Starting from the zeroed signal, each iteration keeps only fast-time
    DFT coefficients above a per-ramp threshold, transforms back and
    overwrites the masked samples with the reconstruction; unmasked
    samples are never touched. The threshold starts at a fraction of each
    ramp's max coefficient magnitude and decays geometrically.
    """
    z = zeroing(frame, mask).data
    if cfg.imat_iterations == 0:
        return Frame(z)
    spec0 = np.fft.fft(z, axis=0)
    thr = cfg.imat_threshold_init * np.max(np.abs(spec0), axis=0, keepdims=True)
    for _ in range(cfg.imat_iterations):
        spec = np.fft.fft(z, axis=0)
        spec[np.abs(spec) < thr] = 0.0
        recon = np.fft.ifft(spec, axis=0)
        z = np.where(mask, recon, z)  # unmasked samples keep their originals
        thr = thr * cfg.imat_threshold_decay
    return Frame(z)


def ramp_filter(frame: Frame, cfg: RadarConfig, clip_factor: float = 2.0) -> RDMap:
    """Slow-time magnitude clipping in the range-profile domain (RF-min).

    Per range bin the reference ramp is the one holding the row's median
    magnitude, a robust level since bursts hit only a few ramps; every
    ramp's magnitude at that bin is clipped to clip_factor times the
    reference with phase preserved, then the Doppler DFT completes the
    map. Needs no detection mask.
    """
    prof = range_profiles(frame, cfg)
    mag = np.abs(prof)
    k = mag.shape[1] // 2
    ref = np.partition(mag, k, axis=1)[:, k : k + 1]
    clipped = np.minimum(mag, clip_factor * ref)
    scale = np.where(mag > 0, clipped / np.where(mag > 0, mag, 1.0), 1.0)
    return doppler_transform(prof * scale, cfg)
