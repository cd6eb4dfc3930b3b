"""WAV decoding, resampling, length fitting, waveform normalisation and the
log-Mel front end for the 2D network."""

import logging
import struct
from dataclasses import dataclass, replace

import numpy as np

from .engine import DTYPE

log = logging.getLogger(__name__)

TARGET_SR = 8000
N_MELS = 64
WIN_LENGTH = 320  # 40 ms at 8 kHz
HOP_LENGTH = 160  # 50 % overlap
N_FFT = 512
LOG_FLOOR = 1e-10

NORMALIZATIONS = ("none", "scale_max", "standardize")


class WavError(ValueError):
    """Unsupported or malformed WAV data."""


@dataclass
class Clip:
    samples: np.ndarray
    sample_rate: int
    label: int = -1
    fold: int = 0
    degenerate: bool = False

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=DTYPE)

    @property
    def seconds(self):
        return self.samples.size / self.sample_rate


# --- WAV ---------------------------------------------------------------------

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def decode_wav(data):
    """Decode RIFF/WAVE bytes to (mono float64 samples, sample_rate)."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError("not a RIFF/WAVE stream")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = struct.unpack_from("<I", data, pos + 4)[0]
        body = pos + 8
        if body + size > len(data):
            if cid == b"data":
                raise WavError(f"truncated data chunk at offset {pos}: declared {size} bytes, {len(data) - body} present")
            raise WavError(f"truncated {cid!r} chunk at offset {pos}")
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"fmt chunk too short ({size} bytes)")
            tag, channels, rate, _, align, bits = struct.unpack_from("<HHIIHH", data, body)
            if tag == _EXTENSIBLE and size >= 40:
                tag = struct.unpack_from("<H", data, body + 24)[0]
            fmt = (tag, channels, rate, align, bits)
        elif cid == b"data":
            payload = data[body:body + size]
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavError("missing fmt chunk")
    if payload is None:
        raise WavError("missing data chunk")
    tag, channels, rate, align, bits = fmt
    if channels < 1:
        raise WavError("zero channels")
    width = bits // 8
    usable = len(payload) - len(payload) % (width * channels)
    raw = payload[:usable]
    if tag == _PCM:
        if bits == 8:
            x = (np.frombuffer(raw, dtype=np.uint8).astype(DTYPE) - 128.0) / 128.0
        elif bits == 16:
            x = np.frombuffer(raw, dtype="<i2").astype(DTYPE) / 32768.0
        elif bits == 24:
            b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
            v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
            v = np.where(v >= 1 << 23, v - (1 << 24), v)
            x = v.astype(DTYPE) / float(1 << 23)
        elif bits == 32:
            x = np.frombuffer(raw, dtype="<i4").astype(DTYPE) / float(1 << 31)
        else:
            raise WavError(f"unsupported PCM bit depth {bits}")
    elif tag == _FLOAT:
        if bits == 32:
            x = np.frombuffer(raw, dtype="<f4").astype(DTYPE)
        elif bits == 64:
            x = np.frombuffer(raw, dtype="<f8").astype(DTYPE)
        else:
            raise WavError(f"unsupported float bit depth {bits}")
    else:
        raise WavError(f"unsupported codec tag 0x{tag:04x}")
    x = x.reshape(-1, channels).mean(axis=1)
    return x, rate


def load_wav(path, label=-1, fold=0):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        samples, rate = decode_wav(data)
    except WavError as exc:
        raise WavError(f"{path}: {exc}") from None
    return Clip(samples, rate, label, fold)


def encode_wav(samples, sample_rate, bits=16):
    """Mono PCM (8/16/24-bit) or 32-bit float WAV bytes."""
    x = np.asarray(samples, dtype=DTYPE)
    if bits == 32:
        tag, payload = _FLOAT, x.astype("<f4").tobytes()
    else:
        scale = float(1 << (bits - 1))
        q = np.clip(np.round(x * scale), -scale, scale - 1).astype(np.int64)
        if bits == 8:
            payload = (q + 128).astype(np.uint8).tobytes()
        elif bits == 16:
            payload = q.astype("<i2").tobytes()
        elif bits == 24:
            u = q & 0xFFFFFF
            payload = np.stack([u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
        else:
            raise WavError(f"unsupported bit depth {bits}")
        tag = _PCM
    width = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, sample_rate, sample_rate * width, width, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def save_wav(path, samples, sample_rate, bits=16):
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, encode_wav(samples, sample_rate, bits))


# --- resampling --------------------------------------------------------------

RESAMPLE_TAPS = 64
KAISER_BETA = 8.6


def resample(clip, target=TARGET_SR):
    """Windowed-sinc resampling to ``target`` Hz.

    Each output sample is a dot product with a 64-tap (at the lower of the
    two rates) Kaiser-windowed sinc whose cutoff is the lower Nyquist
    frequency.  Kernel weights are normalised to unit DC gain; samples beyond
    the clip edges count as zero.
    """
    sr = clip.sample_rate
    if sr == target:
        return replace(clip, samples=clip.samples.copy())
    x = clip.samples
    n_in = x.size
    n_out = int(round(n_in * target / sr))
    if n_in == 0 or n_out == 0:
        return replace(clip, samples=np.zeros(n_out, dtype=DTYPE), sample_rate=target)
    ratio = target / sr
    cutoff = min(1.0, ratio)
    half = RESAMPLE_TAPS / 2 / cutoff  # half-width in input samples
    span = int(np.ceil(half))
    out = np.empty(n_out, dtype=DTYPE)
    offsets = np.arange(-span, span + 1)
    # chunked to bound memory at n_chunk x (2*span+1)
    chunk = max(1, 2_000_000 // offsets.size)
    for start in range(0, n_out, chunk):
        j = np.arange(start, min(n_out, start + chunk))
        t = j / ratio
        base = np.floor(t).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        d = t[:, None] - idx
        arg = np.clip(1.0 - (d / half) ** 2, 0.0, None)
        window = np.i0(KAISER_BETA * np.sqrt(arg)) / np.i0(KAISER_BETA)
        w = cutoff * np.sinc(cutoff * d) * window
        w /= w.sum(axis=1, keepdims=True)
        valid = (idx >= 0) & (idx < n_in)
        vals = np.where(valid, x[np.clip(idx, 0, n_in - 1)], 0.0)
        out[start:start + j.size] = (w * vals).sum(axis=1)
    return replace(clip, samples=out, sample_rate=target)


def fit_length(clip, target_seconds):
    """Zero-pad at the end or keep the first ``target_seconds`` of audio."""
    n = int(round(target_seconds * clip.sample_rate))
    x = clip.samples
    if x.size >= n:
        y = x[:n].copy()
    else:
        y = np.concatenate([x, np.zeros(n - x.size, dtype=DTYPE)])
    return replace(clip, samples=y)


def normalize(clip, mode):
    """Per-clip waveform normalisation.

    Degenerate input (all-zero for ``scale_max``, constant for
    ``standardize``) yields a zero clip with ``degenerate=True``.
    """
    if mode not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {mode!r}; expected one of {NORMALIZATIONS}")
    x = clip.samples
    if x.size == 0:
        raise ValueError("cannot normalize an empty clip")
    if mode == "none":
        return replace(clip, samples=x.copy())
    if mode == "scale_max":
        peak = np.max(np.abs(x))
        if peak == 0:
            return replace(clip, samples=np.zeros_like(x), degenerate=True)
        return replace(clip, samples=x / peak)
    mean = x.mean()
    centered = x - mean
    std = np.sqrt(np.mean(centered * centered))
    if std == 0:
        return replace(clip, samples=np.zeros_like(x), degenerate=True)
    return replace(clip, samples=centered / std)


# --- log-Mel -----------------------------------------------------------------

def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=DTYPE)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=DTYPE)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(sr=TARGET_SR, n_fft=N_FFT, n_mels=N_MELS, fmin=0.0, fmax=None):
    """Area-normalised triangular filters, shape (n_mels, n_fft//2 + 1)."""
    fmax = sr / 2 if fmax is None else fmax
    fft_freqs = np.fft.rfftfreq(n_fft, 1.0 / sr)
    hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(hz)
    ramps = hz[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (hz[2:] - hz[:-2]))[:, None]
    return weights


_FILTERBANK = None


def _filterbank():
    global _FILTERBANK
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
    return _FILTERBANK


def stft_power(x, n_fft=N_FFT, win_length=WIN_LENGTH, hop=HOP_LENGTH):
    """|STFT|^2 with centred frames, shape (n_fft//2 + 1, frames).

    The periodic Hann window of ``win_length`` sits in the middle of an
    ``n_fft`` frame.  Centring pads ``n_fft//2`` samples each side by
    reflection (zeros if the clip is too short to reflect).
    """
    x = np.asarray(x, dtype=DTYPE)
    pad = n_fft // 2
    mode = "reflect" if x.size > pad else "constant"
    xp = np.pad(x, pad, mode=mode)
    n_frames = 1 + (xp.size - n_fft) // hop
    n = np.arange(win_length)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / win_length)
    window = np.zeros(n_fft, dtype=DTYPE)
    left = (n_fft - win_length) // 2
    window[left:left + win_length] = hann
    frames = np.lib.stride_tricks.sliding_window_view(xp, n_fft)[::hop][:n_frames]
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def n_frames(num_samples, hop=HOP_LENGTH):
    return 1 + num_samples // hop


def log_mel(clip):
    """64 x frames matrix of log10 mel energies, floored at 1e-10."""
    if clip.sample_rate != TARGET_SR:
        raise ValueError(f"log_mel expects {TARGET_SR} Hz audio, got {clip.sample_rate}")
    power = stft_power(clip.samples)
    mel = _filterbank() @ power
    return np.log10(np.maximum(mel, LOG_FLOOR))


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def fit_channel_stats(specs):
    """Per-mel-band mean and population std over every frame of every spec."""
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one spectrogram")
    n_bands = specs[0].shape[0]
    total = np.zeros(n_bands)
    count = 0
    for s in specs:
        if s.shape[0] != n_bands:
            raise ValueError(f"band count mismatch: {s.shape[0]} vs {n_bands}")
        total += s.sum(axis=1)
        count += s.shape[1]
    mean = total / count
    sq = np.zeros(n_bands)
    for s in specs:
        d = s - mean[:, None]
        sq += (d * d).sum(axis=1)
    return ChannelStats(mean, np.sqrt(sq / count))


def channel_standardize(spec, stats):
    if spec.shape[0] != stats.mean.shape[0]:
        raise ValueError(f"spectrogram has {spec.shape[0]} bands, stats have {stats.mean.shape[0]}")
    safe = np.where(stats.std > 0, stats.std, 1.0)
    out = (spec - stats.mean[:, None]) / safe[:, None]
    out[stats.std == 0] = 0.0
    return out


def pad_frames(spec, frames):
    """Zero-pad (or cut) a spectrogram on the time axis to ``frames``."""
    if spec.shape[1] >= frames:
        return spec[:, :frames]
    return np.pad(spec, [(0, 0), (0, frames - spec.shape[1])])
