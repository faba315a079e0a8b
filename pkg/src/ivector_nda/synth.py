"""Synthetic data: multimodal i-vector-space benchmark and a small audio corpus."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .discriminant import LabeledVectors


@dataclass(frozen=True)
class SynthSpec:
    """i-vector-like data: speaker mean + shared multimodal channel offset + noise.

    Every session of speaker i is s_i + o + n with s_i ~ N(0, speaker_spread^2 I)
    and n ~ N(0, noise_spread^2 I). The channel offset o comes from a mixture
    of ``channel_modes`` equally likely Gaussians shared by all speakers; mode k
    has centre c_k ~ N(0, channel_spread^2 I) and covariance
    channel_spread^2 U_k U_k' on its own random ``mode_rank``-dim subspace U_k.
    Modes therefore differ in location and in shape.
    """

    num_speakers: int = 100
    sessions_per_speaker: int = 20
    dim: int = 50
    channel_modes: int = 3
    speaker_spread: float = 1.0
    channel_spread: float = 3.0
    noise_spread: float = 1.0
    seed: int = 0
    mode_rank: int = 5

    def __post_init__(self):
        for name in ("num_speakers", "sessions_per_speaker", "dim", "channel_modes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.mode_rank <= self.dim:
            raise ValueError("mode_rank must be in [0, dim]")
        for name in ("speaker_spread", "channel_spread", "noise_spread"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


def speaker_label(i):
    return f"spk{i:04d}"


def gen_synthetic(spec, return_modes=False):
    """Draws labeled vectors; rows are grouped by speaker, sessions in order."""
    rng = np.random.default_rng(spec.seed)
    S, n, d = spec.num_speakers, spec.sessions_per_speaker, spec.dim
    r = spec.mode_rank
    centers = spec.channel_spread * rng.standard_normal((spec.channel_modes, d))
    bases = np.stack(
        [np.linalg.qr(rng.standard_normal((d, r)))[0] for _ in range(spec.channel_modes)]
    ).reshape(spec.channel_modes, d, r)
    speakers = spec.speaker_spread * rng.standard_normal((S, d))
    modes = rng.integers(0, spec.channel_modes, size=S * n)
    latent = spec.channel_spread * rng.standard_normal((S * n, r))
    noise = spec.noise_spread * rng.standard_normal((S * n, d))
    offsets = centers[modes] + np.einsum("nij,nj->ni", bases[modes], latent)
    X = np.repeat(speakers, n, axis=0) + offsets + noise
    labels = np.array([speaker_label(i) for i in range(S) for _ in range(n)])
    data = LabeledVectors(X, labels)
    return (data, modes) if return_modes else data


def _speaker_voice(rng, sample_rate):
    f0 = rng.uniform(90.0, 240.0)
    formants = np.sort(rng.uniform(350.0, 0.42 * sample_rate, size=3))
    return f0, formants


def synth_utterance(rng, voice, sample_rate=8000, duration=1.5):
    """Harmonic tone bursts shaped by speaker 'formants', separated by near-silence."""
    f0, formants = voice
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    # session effects: pitch jitter, channel tilt, gain and noise level
    f0 = f0 * rng.uniform(0.97, 1.03)
    tilt = rng.uniform(-1.0, 1.0)
    harmonics = np.arange(1, int(0.45 * sample_rate / f0) + 1) * f0
    amp = sum(np.exp(-0.5 * ((harmonics - f) / 120.0) ** 2) for f in formants)
    amp = amp * np.exp(tilt * harmonics / sample_rate) + 0.02
    phases = rng.uniform(0, 2 * np.pi, size=harmonics.size)
    voiced = np.sin(2 * np.pi * harmonics[:, None] * t[None, :] + phases[:, None])
    signal = (amp[:, None] * voiced).sum(axis=0)
    signal /= np.max(np.abs(signal))
    # 300 ms bursts, 100 ms pauses
    period = int(0.4 * sample_rate)
    on = (np.arange(n) % period) < int(0.3 * sample_rate)
    gain = rng.uniform(0.3, 0.6)
    noise = rng.standard_normal(n) * gain * 10 ** (-rng.uniform(15.0, 25.0) / 20)
    return np.clip(gain * signal * on + noise, -1.0, 1.0)


def make_audio_corpus(
    out_dir, num_speakers=10, sessions_per_speaker=8, sample_rate=8000, duration=1.5, seed=0
):
    """Writes ``wav/<utt>.wav`` and ``utt2spk`` under out_dir; returns utt2spk."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    voices = [_speaker_voice(rng, sample_rate) for _ in range(num_speakers)]
    utt2spk = {}
    for i, voice in enumerate(voices):
        for j in range(sessions_per_speaker):
            utt = f"{speaker_label(i)}-s{j:02d}"
            io.write_wav(out / "wav" / f"{utt}.wav", synth_utterance(rng, voice, sample_rate, duration), sample_rate)
            utt2spk[utt] = speaker_label(i)
    io.write_utt2spk(out / "utt2spk", utt2spk)
    return utt2spk
