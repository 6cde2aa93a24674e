"""Spectrograms, radio sentences and the on-disk sentence corpus.

A sentence is a log-power image of ``sentence_rows x (n_tokens * token_width)``
pixels built from consecutive 2 ms slices of one recording, standardized to
zero mean and unit variance and cut along time into ``n_tokens`` tokens.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CorpusError, SizeError
from .recording import IQRecording

log = logging.getLogger(__name__)

SLICE_MS = 2.0
SENTENCE_DURATIONS_MS = (10, 20)
NORMALIZATION = "per-sentence-standardize"


@dataclasses.dataclass(frozen=True)
class SpectroParams:
    """STFT settings plus the sentence geometry fed to the model.

    Everything here feeds :meth:`digest`, which checkpoints carry so that
    fine-tuning data is preprocessed the same way as the pretraining corpus.
    """

    fft_size: int = 1024
    window: str = "hann"
    window_size: int = 512
    hop_size: int = 512
    log_floor_db: float = -120.0
    sentence_rows: int = 256
    n_tokens: int = 16
    token_width: int = 16

    def __post_init__(self):
        if self.window != "hann":
            raise SizeError(f"unsupported window {self.window!r}")
        if not 1 <= self.window_size <= self.fft_size:
            raise SizeError("window_size must be in [1, fft_size]")
        if self.hop_size < 1:
            raise SizeError("hop_size must be >= 1")
        if min(self.sentence_rows, self.n_tokens, self.token_width) < 1:
            raise SizeError("sentence geometry must be positive")

    @property
    def sentence_shape(self) -> tuple:
        return (self.sentence_rows, self.n_tokens * self.token_width)

    @property
    def token_shape(self) -> tuple:
        return (self.sentence_rows, self.token_width)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        payload = {**self.to_dict(), "normalization": NORMALIZATION}
        text = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


@dataclasses.dataclass(frozen=True, eq=False)
class Spectrogram:
    """Log-power image, rows = frequency (ascending from -fs/2), cols = time."""

    values: np.ndarray
    freq_axis_hz: np.ndarray
    time_axis_s: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def slice_recording(iq, slice_ms: float = SLICE_MS) -> list:
    """Non-overlapping slices of exactly ``slice_ms``; the remainder is dropped."""
    per = int(round(slice_ms * 1e-3 * iq.sample_rate_hz))
    count = len(iq) // per if per > 0 else 0
    if count == 0:
        raise SizeError(f"recording of {iq.duration_s * 1e3:.3f} ms is shorter than one {slice_ms} ms slice")
    return [
        IQRecording(iq.samples[k * per:(k + 1) * per], iq.sample_rate_hz, iq.center_freq_hz, None,
                    {**iq.annotations, "slice_index": k})
        for k in range(count)
    ]


def hann(n: int) -> np.ndarray:
    # periodic (DFT-even) Hann
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, window_size: int, hop_size: int) -> int:
    if n_samples < window_size:
        return 0
    return (n_samples - window_size) // hop_size + 1


def stft_spectrogram(iq, p: Optional[SpectroParams] = None) -> Spectrogram:
    p = p or SpectroParams()
    x = np.asarray(iq.samples)
    frames = frame_count(x.size, p.window_size, p.hop_size)
    if frames == 0:
        raise SizeError(f"{x.size} samples is fewer than the {p.window_size}-sample window")
    win = hann(p.window_size)
    starts = np.arange(frames) * p.hop_size
    segs = x[starts[:, None] + np.arange(p.window_size)] * win
    spec = np.fft.fft(segs, n=p.fft_size, axis=1)
    power = (spec.real ** 2 + spec.imag ** 2) / np.sum(win ** 2)
    power = np.fft.fftshift(power, axes=1).T
    floor = 10.0 ** (p.log_floor_db / 10.0)
    values = 10.0 * np.log10(power + floor)
    fs = iq.sample_rate_hz
    freq = (np.arange(p.fft_size) - p.fft_size // 2) * fs / p.fft_size
    time = (starts + p.window_size / 2) / fs
    return Spectrogram(values, freq, time)


def _interp_weights(n_in: int, n_out: int):
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, max(n_in - 2, 0))
    hi = np.minimum(lo + 1, n_in - 1)
    w = pos - lo
    return lo, hi, w


def resize_image(img, out_shape=(256, 256)) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling (first/last pixels map exactly)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise SizeError(f"resize needs a nonempty 2-D image, got shape {img.shape}")
    rows, cols = out_shape
    if (rows, cols) == img.shape:
        return img.copy()
    lo, hi, w = _interp_weights(img.shape[0], rows)
    tmp = img[lo] * (1 - w)[:, None] + img[hi] * w[:, None]
    lo, hi, w = _interp_weights(img.shape[1], cols)
    return tmp[:, lo] * (1 - w) + tmp[:, hi] * w


def _resize_axis(axis, n):
    axis = np.asarray(axis, dtype=np.float64)
    lo, hi, w = _interp_weights(axis.size, n)
    return axis[lo] * (1 - w) + axis[hi] * w


def resize_spectrogram(spec: Spectrogram, out_shape=(256, 256)) -> Spectrogram:
    return Spectrogram(
        resize_image(spec.values, out_shape),
        _resize_axis(spec.freq_axis_hz, out_shape[0]),
        _resize_axis(spec.time_axis_s, out_shape[1]),
    )


def tokenize(image: np.ndarray, n_tokens: int) -> np.ndarray:
    """(F, T*W) image -> (T, F, W) tokens."""
    f, width = image.shape
    if width % n_tokens:
        raise SizeError(f"width {width} is not divisible into {n_tokens} tokens")
    return np.ascontiguousarray(image.reshape(f, n_tokens, width // n_tokens).transpose(1, 0, 2))


def detokenize(tokens: np.ndarray) -> np.ndarray:
    t, f, w = tokens.shape
    return np.ascontiguousarray(tokens.transpose(1, 0, 2).reshape(f, t * w))


def standardize(image: np.ndarray):
    mean = float(image.mean())
    std = float(image.std())
    if std == 0:
        std = 1.0
    return (image - mean) / std, mean, std


@dataclasses.dataclass(eq=False)
class SentenceTokens:
    tokens: np.ndarray  # (T, F, W) float32, standardized
    mean: float
    std: float
    source: str = ""
    duration_ms: float = 20.0
    sample_rate_hz: float = 0.0

    @property
    def image(self) -> np.ndarray:
        return detokenize(self.tokens)

    def destandardize(self, x):
        return x * self.std + self.mean

    def stats(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "source": self.source,
            "duration_ms": self.duration_ms,
            "sample_rate_hz": self.sample_rate_hz,
        }


def sentence_from_image(image, params: SpectroParams, **meta) -> SentenceTokens:
    """Resize, standardize and tokenize one log-power image."""
    img = resize_image(image, params.sentence_shape)
    z, mean, std = standardize(img)
    return SentenceTokens(tokenize(z, params.n_tokens).astype(np.float32), mean, std, **meta)


def build_sentence(
    slices: Sequence[Spectrogram],
    duration_ms: int,
    rng,
    params: Optional[SpectroParams] = None,
    source: str = "",
    sample_rate_hz: float = 0.0,
) -> SentenceTokens:
    params = params or SpectroParams()
    if duration_ms not in SENTENCE_DURATIONS_MS:
        raise CorpusError(f"sentence duration must be one of {SENTENCE_DURATIONS_MS} ms, got {duration_ms}")
    need = int(round(duration_ms / SLICE_MS))
    if len(slices) < need:
        raise CorpusError(f"{duration_ms} ms sentence needs {need} slices, only {len(slices)} available")
    start = int(rng.integers(0, len(slices) - need + 1))
    image = np.concatenate([s.values for s in slices[start:start + need]], axis=1)
    return sentence_from_image(image, params, source=source, duration_ms=float(duration_ms),
                               sample_rate_hz=float(sample_rate_hz))


def recording_slices(iq, params: SpectroParams) -> list:
    return [stft_spectrogram(s, params) for s in slice_recording(iq, SLICE_MS)]


# -- corpus ---------------------------------------------------------------

@dataclasses.dataclass
class Corpus:
    path: Path
    manifest: dict
    sentences: list

    def __len__(self):
        return len(self.sentences)

    @property
    def params(self) -> SpectroParams:
        return SpectroParams(**self.manifest["spectro_params"])

    def tokens(self, indices=None) -> np.ndarray:
        idx = range(len(self.sentences)) if indices is None else indices
        return np.stack([self.sentences[i].tokens for i in idx])

    def sources(self) -> list:
        return [s.source for s in self.sentences]


def _write(path: Path, data: bytes):
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise CorpusError(f"cannot write {path}: {exc}") from exc


def save_sentence(sentence: SentenceTokens, directory: Path, k: int):
    directory = Path(directory)
    _write(directory / f"sent_{k}.tok", sentence.tokens.astype("<f4").tobytes())
    _write(directory / f"sent_{k}.stats", (json.dumps(sentence.stats(), indent=1, sort_keys=True) + "\n").encode())


def build_corpus(
    recordings: Sequence,
    out_dir,
    rng,
    params: Optional[SpectroParams] = None,
    n_sentences: Optional[int] = None,
    seed: Optional[int] = None,
    durations_ms=SENTENCE_DURATIONS_MS,
) -> Corpus:
    """Draw sentences round-robin over recordings and persist them.

    ``recordings`` only needs ``len`` and indexing; each item is fetched
    once, so a lazy sequence keeps memory at one recording.

    Each sentence picks its duration uniformly from ``durations_ms`` among
    those the recording is long enough for, then a uniform start slice.
    """
    params = params or SpectroParams()
    if not recordings:
        raise CorpusError("corpus needs at least one recording")
    n_sentences = len(recordings) if n_sentences is None else n_sentences
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create corpus directory {out_dir}: {exc}") from exc

    # one recording's slices in memory at a time; sentence k still comes from recording k mod R
    sentences = [None] * n_sentences
    for r in range(min(len(recordings), n_sentences)):
        rec = recordings[r]
        slices = recording_slices(rec, params)
        feasible = [d for d in durations_ms if int(round(d / SLICE_MS)) <= len(slices)]
        if not feasible:
            raise CorpusError(f"recording {r} ({rec.duration_s * 1e3:.1f} ms) is too short for any sentence")
        source = str(rec.annotations.get("source", f"rec{r}"))
        for k in range(r, n_sentences, len(recordings)):
            duration = int(rng.choice(feasible))
            sent = build_sentence(slices, duration, rng, params, source, rec.sample_rate_hz)
            save_sentence(sent, out_dir, k)
            sentences[k] = sent

    manifest = {
        "format": "radiomsm-corpus/1",
        "spectro_params": params.to_dict(),
        "preprocess_digest": params.digest(),
        "normalization": NORMALIZATION,
        "seed": seed,
        "n_recordings": len(recordings),
        "sentence_count": len(sentences),
        "token_shape": [params.n_tokens, params.sentence_rows, params.token_width],
        "dtype": "float32-le",
    }
    _write(out_dir / "manifest", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    log.info("wrote %d sentences to %s", len(sentences), out_dir)
    return Corpus(out_dir, manifest, sentences)


def load_corpus(path) -> Corpus:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot read corpus manifest in {path}: {exc}") from exc
    shape = tuple(manifest["token_shape"])
    sentences = []
    for k in range(manifest["sentence_count"]):
        tok_path = path / f"sent_{k}.tok"
        try:
            raw = np.frombuffer(tok_path.read_bytes(), dtype="<f4")
        except OSError as exc:
            raise CorpusError(f"cannot read {tok_path}: {exc}") from exc
        if raw.size != np.prod(shape):
            raise CorpusError(f"{tok_path}: expected {np.prod(shape)} values, found {raw.size}")
        stats_path = path / f"sent_{k}.stats"
        stats = json.loads(stats_path.read_text()) if stats_path.exists() else {"mean": 0.0, "std": 1.0}
        sentences.append(SentenceTokens(raw.reshape(shape).astype(np.float32), **stats))
    return Corpus(path, manifest, sentences)
