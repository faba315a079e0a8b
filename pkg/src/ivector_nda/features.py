"""Acoustic front-end: MFCCs, deltas, energy SAD and recording-level CMVN.

Conventions: periodic Hamming window, no pre-emphasis, magnitude spectrum,
mel(f) = 2595 log10(1 + f/700), triangular filters evaluated at FFT bin
frequencies, natural log with a floor, orthonormal DCT-II with c0 first.
"""

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct
from scipy.signal import get_window

DEFAULT_SAD_MARGIN = 30.0
CMVN_VAR_FLOOR = 1e-10


@dataclass(frozen=True)
class MfccConfig:
    frame_len_ms: float = 25.0
    frame_shift_ms: float = 10.0
    num_filters: int = 24
    fmin_hz: float = 200.0
    fmax_hz: float = 3500.0
    num_ceps: int = 13
    delta_window: int = 5
    log_floor: float = 1e-10

    def frame_params(self, sample_rate):
        """Returns (frame length, frame shift) in samples."""
        flen = int(round(self.frame_len_ms * sample_rate / 1000.0))
        shift = int(round(self.frame_shift_ms * sample_rate / 1000.0))
        return flen, shift

    def validate(self, sample_rate):
        if sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {sample_rate}")
        if not 0 <= self.fmin_hz < self.fmax_hz <= sample_rate / 2:
            raise ValueError(
                f"need 0 <= fmin < fmax <= {sample_rate / 2}, "
                f"got fmin={self.fmin_hz} fmax={self.fmax_hz}"
            )
        if not 1 <= self.num_ceps <= self.num_filters:
            raise ValueError("num_ceps must be in [1, num_filters]")
        if self.delta_window < 3 or self.delta_window % 2 == 0:
            raise ValueError(f"delta_window must be odd and >= 3, got {self.delta_window}")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        flen, shift = self.frame_params(sample_rate)
        if flen < 1 or shift < 1:
            raise ValueError("frame length and shift must be at least one sample")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg, sample_rate, nfft):
    """Triangular mel filters on the rfft bins.

    Returns:
      weights: (num_filters, nfft//2 + 1) matrix.
      centers: center frequency of each filter in Hz.
    """
    edges = mel_to_hz(
        np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.num_filters + 2)
    )
    freqs = np.arange(nfft // 2 + 1) * sample_rate / nfft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return weights, edges[1:-1]


def frame_signal(samples, flen, shift):
    n = (len(samples) - flen) // shift + 1
    idx = np.arange(flen)[None, :] + shift * np.arange(n)[:, None]
    return samples[idx]


def log_mel_energies(samples, sample_rate, cfg=MfccConfig()):
    """Log mel filterbank outputs per frame, before the DCT."""
    cfg.validate(sample_rate)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError("expected a mono 1-d signal")
    flen, shift = cfg.frame_params(sample_rate)
    if len(samples) < flen:
        raise ValueError(
            f"insufficient audio: {len(samples)} samples, one frame needs {flen}"
        )
    nfft = 1 << (flen - 1).bit_length()
    frames = frame_signal(samples, flen, shift) * get_window("hamming", flen, fftbins=True)
    mag = np.abs(np.fft.rfft(frames, n=nfft, axis=1))
    fbank, _ = mel_filterbank(cfg, sample_rate, nfft)
    return np.log(np.maximum(mag @ fbank.T, cfg.log_floor))


def compute_mfcc(samples, sample_rate, cfg=MfccConfig()):
    """Computes MFCCs (c0 first), one row per frame.

    Frame t covers samples [t*shift, t*shift + len).

    Raises:
      ValueError: "insufficient audio" when the signal is shorter than a frame.
    """
    logfb = log_mel_energies(samples, sample_rate, cfg)
    return dct(logfb, type=2, norm="ortho", axis=1)[:, : cfg.num_ceps]


def _regression_delta(feat, half):
    padded = np.concatenate([np.repeat(feat[:1], half, 0), feat, np.repeat(feat[-1:], half, 0)])
    T = feat.shape[0]
    num = np.zeros_like(feat)
    for n in range(1, half + 1):
        num += n * (padded[half + n : half + n + T] - padded[half - n : half - n + T])
    return num / (2.0 * sum(n * n for n in range(1, half + 1)))


def append_deltas(feat, window=5):
    """Appends first and second regression deltas: [static, delta, delta-delta].

    Edge frames are replicated; the half-window is (window - 1) / 2.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"delta window must be odd and >= 3, got {window}")
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 2 or feat.shape[0] < 1:
        raise ValueError("need a non-empty frames x dims matrix")
    half = (window - 1) // 2
    d1 = _regression_delta(feat, half)
    d2 = _regression_delta(d1, half)
    return np.hstack([feat, d1, d2])


def energy_sad(feat, margin=DEFAULT_SAD_MARGIN):
    """Speech mask from column 0 (c0): keep frames with c0 >= max(c0) - margin."""
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 2 or feat.shape[0] == 0:
        raise ValueError("energy_sad needs at least one frame")
    c0 = feat[:, 0]
    return c0 >= c0.max() - margin


def cmvn(feat):
    """Per-column mean and variance normalization over the whole recording.

    Population variance, floored at 1e-10, so constant columns map to 0.
    """
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 2 or feat.shape[0] < 2:
        raise ValueError("cmvn needs at least 2 frames")
    mu = feat.mean(axis=0)
    centered = feat - mu
    # mean of identical values can be off by an ulp
    centered[:, np.ptp(feat, axis=0) == 0] = 0.0
    var = np.maximum((centered**2).mean(axis=0), CMVN_VAR_FLOOR)
    return centered / np.sqrt(var)


def extract_features(samples, sample_rate, cfg=MfccConfig(), sad_margin=DEFAULT_SAD_MARGIN):
    """Full front-end: MFCC -> deltas -> SAD frame dropping -> CMVN."""
    ceps = compute_mfcc(samples, sample_rate, cfg)
    feat = append_deltas(ceps, cfg.delta_window)
    feat = feat[energy_sad(ceps, sad_margin)]
    if feat.shape[0] < 2:
        raise ValueError(f"only {feat.shape[0]} speech frame(s) left after SAD")
    return cmvn(feat)
