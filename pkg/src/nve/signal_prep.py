"""Deterministic EEG preprocessing: IIR filtering, trimming, z-scoring,
band/window restriction, spectral estimation, and the filtered-noise
generator used by the channel-importance analysis.

All operations are pure functions of (input, seed); segments are never
mutated in place.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal as sps

EEGB_MAGIC = b"EEGB"

# Frequency bands used by the band-restriction experiments (Hz).
BANDS = {
    "theta_alpha_beta": (5.0, 32.0),
    "low_gamma": (32.0, 45.0),
    "high_gamma": (55.0, 95.0),
    "all_gamma": (32.0, 95.0),
    "all": (5.0, 95.0),
}

# Analysis windows in ms relative to stimulus onset.
WINDOWS = [(20, 240), (20, 350), (20, 460), (130, 350), (130, 460), (240, 460)]

DEFAULT_TRIM_SKIP = 20
DEFAULT_TRIM_KEEP = 440


@dataclass(frozen=True)
class FrequencyBand:
    name: str
    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 < self.lo < self.hi):
            raise ValueError(f"invalid band {self.name}: ({self.lo}, {self.hi})")


def band(name: str) -> FrequencyBand:
    lo, hi = BANDS[name]
    return FrequencyBand(name, lo, hi)


@dataclass(frozen=True)
class TimeWindow:
    t0_ms: float
    t1_ms: float

    def __post_init__(self):
        if not self.t0_ms < self.t1_ms:
            raise ValueError(f"invalid window ({self.t0_ms}, {self.t1_ms})")


@dataclass
class EEGSegment:
    """One multichannel recording: (channels x samples) plus metadata.

    ``onset_ms`` is the stimulus-relative time of the first retained sample;
    trimming advances it.  ``channel_mean``/``channel_var`` record the
    pre-standardization statistics captured by the latest :func:`zscore`.
    """

    data: np.ndarray
    sample_rate: float = 1000.0
    channel_names: list[str] | None = None
    class_label: int | None = None
    image_id: str | None = None
    subject_id: int | None = None
    onset_ms: float = 0.0
    channel_mean: np.ndarray | None = None
    channel_var: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise ValueError(f"EEG data must be (channels, samples), got {self.data.shape}")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FilterSpec:
    """Stable IIR filter as second-order sections."""

    kind: str
    order: int
    cutoffs: tuple
    sample_rate: float
    sos: np.ndarray = field(repr=False)


def design_filter(kind: str, order: int, cutoffs, sample_rate: float,
                  notch_bandwidth: float = 2.0) -> FilterSpec:
    """Butterworth design (bilinear transform with prewarping) as SOS.

    ``kind`` is one of bandpass | lowpass | notch.  A notch is a narrow
    band-stop centered at the single cutoff with -3 dB bandwidth
    ``notch_bandwidth``.
    """
    nyquist = sample_rate / 2.0
    cut = np.atleast_1d(np.asarray(cutoffs, dtype=float))
    if np.any(cut <= 0) or np.any(cut >= nyquist):
        raise ValueError(f"cutoffs {cutoffs} must lie in (0, {nyquist}) Hz")
    if kind == "bandpass":
        if cut.size != 2 or cut[0] >= cut[1]:
            raise ValueError("bandpass needs (lo, hi) with lo < hi")
        sos = sps.butter(order, cut, btype="bandpass", fs=sample_rate, output="sos")
        cutoffs = (float(cut[0]), float(cut[1]))
    elif kind == "lowpass":
        if cut.size != 1:
            raise ValueError("lowpass needs a single cutoff")
        sos = sps.butter(order, cut[0], btype="lowpass", fs=sample_rate, output="sos")
        cutoffs = (float(cut[0]),)
    elif kind == "notch":
        if cut.size != 1:
            raise ValueError("notch needs a single center frequency")
        half = notch_bandwidth / 2.0
        edges = (cut[0] - half, cut[0] + half)
        if edges[0] <= 0 or edges[1] >= nyquist:
            raise ValueError(f"notch band {edges} out of range")
        sos = sps.butter(order, edges, btype="bandstop", fs=sample_rate, output="sos")
        cutoffs = (float(cut[0]),)
    else:
        raise ValueError(f"unknown filter kind {kind!r}")

    for section in sos:
        poles = np.roots(section[3:])
        if np.any(np.abs(poles) >= 1.0):
            raise RuntimeError(f"unstable {kind} design at order {order}: {cutoffs}")
    return FilterSpec(kind=kind, order=order, cutoffs=cutoffs,
                      sample_rate=sample_rate, sos=sos)


def apply_filter(segment: EEGSegment, spec: FilterSpec, phase: str = "causal") -> EEGSegment:
    """Per-channel IIR filtering, length-preserving.

    ``phase='causal'`` runs a single forward pass from zero initial
    conditions; ``phase='zero'`` runs forward-backward (zero-phase) filtering.
    """
    if not np.all(np.isfinite(segment.data)):
        raise ValueError("cannot filter non-finite EEG data")
    if spec.sample_rate != segment.sample_rate:
        raise ValueError(f"filter designed for {spec.sample_rate} Hz, "
                         f"segment is {segment.sample_rate} Hz")
    if phase == "causal":
        filtered = sps.sosfilt(spec.sos, segment.data, axis=-1)
    elif phase == "zero":
        filtered = sps.sosfiltfilt(spec.sos, segment.data, axis=-1)
    else:
        raise ValueError(f"unknown phase mode {phase!r}")
    return replace(segment, data=filtered.astype(segment.data.dtype, copy=False))


def trim(segment: EEGSegment, skip: int = DEFAULT_TRIM_SKIP,
         keep: int = DEFAULT_TRIM_KEEP) -> EEGSegment:
    """Drop the first ``skip`` samples, keep the next ``keep``."""
    if segment.n_samples < skip + keep:
        raise ValueError(
            f"segment too short: {segment.n_samples} < skip+keep = {skip + keep}")
    out = replace(segment, data=segment.data[:, skip:skip + keep].copy())
    out.onset_ms = segment.onset_ms + skip * 1000.0 / segment.sample_rate
    return out


def zscore(segment: EEGSegment) -> EEGSegment:
    """Standardize each channel to zero mean, unit population std.

    The pre-standardization per-channel mean and variance are stored on the
    returned segment for later reuse by noise-replacement analyses.
    """
    mu = segment.data.mean(axis=1)
    var = segment.data.var(axis=1)
    if np.any(var <= 0):
        bad = int(np.argmax(var <= 0))
        raise ValueError(f"channel {bad} is constant (zero variance)")
    out = (segment.data - mu[:, None]) / np.sqrt(var)[:, None]
    new = replace(segment, data=out.astype(segment.data.dtype, copy=False))
    new.channel_mean = mu
    new.channel_var = var
    return new


def restrict(segment: EEGSegment, band: FrequencyBand | None = None,
             window: TimeWindow | None = None, filter_order: int = 2,
             phase: str = "causal") -> EEGSegment:
    """Band-restrict (bandpass then re-standardize) and/or window-slice."""
    out = segment
    if band is not None:
        if band.hi >= segment.sample_rate / 2.0:
            raise ValueError(f"band {band} exceeds Nyquist")
        spec = design_filter("bandpass", filter_order, (band.lo, band.hi),
                             segment.sample_rate, )
        out = zscore(apply_filter(out, spec, phase=phase))
    if window is not None:
        fs = out.sample_rate
        i0 = int(round((window.t0_ms - out.onset_ms) * fs / 1000.0))
        i1 = int(round((window.t1_ms - out.onset_ms) * fs / 1000.0))
        if i0 < 0 or i1 > out.n_samples or i0 >= i1:
            raise ValueError(
                f"window ({window.t0_ms}, {window.t1_ms}) ms maps to empty or "
                f"out-of-range slice [{i0}, {i1}) for {out.n_samples} samples "
                f"starting at {out.onset_ms} ms")
        sliced = replace(out, data=out.data[:, i0:i1].copy())
        sliced.onset_ms = window.t0_ms
        out = sliced
    return out


def psd(segment: EEGSegment, nperseg: int):
    """Welch-averaged periodogram (Hann window, 50% overlap) per channel.

    Returns (freqs[F], power[C, F]) with freqs spanning 0..sample_rate/2.
    """
    if nperseg > segment.n_samples:
        raise ValueError(f"nperseg {nperseg} > segment length {segment.n_samples}")
    freqs, power = sps.welch(segment.data, fs=segment.sample_rate, window="hann",
                             nperseg=nperseg, noverlap=nperseg // 2, axis=-1)
    return freqs, power


def filtered_gaussian_noise(mu: float, sigma2: float, length: int,
                            sample_rate: float, cutoff: float = 100.0,
                            seed=0) -> np.ndarray:
    """Low-pass-filtered i.i.d. Gaussian samples matching (mu, sigma2).

    A second-order Butterworth low-pass at ``cutoff`` is applied causally
    from steady-state initial conditions at level ``mu``, so the degenerate
    sigma2 -> 0 limit returns a constant ``mu`` vector.
    """
    if sigma2 < 0:
        raise ValueError("variance must be >= 0")
    rng = np.random.default_rng(seed)
    draw = rng.normal(mu, np.sqrt(sigma2), size=length)
    sos = sps.butter(2, cutoff, btype="lowpass", fs=sample_rate, output="sos")
    zi = sps.sosfilt_zi(sos) * mu
    out, _ = sps.sosfilt(sos, draw, zi=zi)
    return out


# ---------------------------------------------------------------------------
# segment file format
# ---------------------------------------------------------------------------

def write_eegb(path, data: np.ndarray, sample_rate: float) -> None:
    """Binary segment file: magic ``EEGB``, u32 channels, u32 samples,
    u32 sample-rate Hz, then channel-major little-endian float32 samples."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("EEGB data must be 2-d (channels, samples)")
    with open(path, "wb") as fh:
        fh.write(EEGB_MAGIC)
        fh.write(struct.pack("<III", data.shape[0], data.shape[1], int(round(sample_rate))))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_eegb(path) -> EEGSegment:
    raw = Path(path).read_bytes()
    if raw[:4] != EEGB_MAGIC:
        raise ValueError(f"{path}: bad EEGB magic {raw[:4]!r}")
    channels, samples, rate = struct.unpack("<III", raw[4:16])
    expected = channels * samples * 4
    body = raw[16:16 + expected]
    if len(body) != expected:
        raise ValueError(f"{path}: truncated EEGB payload")
    data = np.frombuffer(body, dtype="<f4").reshape(channels, samples)
    return EEGSegment(data=data.astype(np.float32), sample_rate=float(rate))


def preprocess(segment: EEGSegment, band_lo: float = 5.0, band_hi: float = 95.0,
               notch_hz: float = 50.0, filter_order: int = 2,
               skip: int = DEFAULT_TRIM_SKIP, keep: int = DEFAULT_TRIM_KEEP,
               phase: str = "causal") -> EEGSegment:
    """Standard pipeline: bandpass, notch, trim, z-score."""
    bp = design_filter("bandpass", filter_order, (band_lo, band_hi), segment.sample_rate)
    nt = design_filter("notch", filter_order, notch_hz, segment.sample_rate)
    out = apply_filter(segment, bp, phase=phase)
    out = apply_filter(out, nt, phase=phase)
    out = trim(out, skip=skip, keep=keep)
    return zscore(out)
