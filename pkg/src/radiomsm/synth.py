"""Synthetic radio data: NR-like/LTE-like mixtures for segmentation and
multi-emitter captures standing in for over-the-air recordings.

The OFDM generator is deliberately simple (QPSK on 90% of the nominal
bandwidth, 7% cyclic prefix, one contiguous burst per signal).  It keeps the
time-frequency footprint that the segmentation labels depend on and nothing
else.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, ManifestError, PlacementError
from .recording import IQRecording
from .spectro import SpectroParams, Spectrogram, resize_spectrogram, stft_spectrogram

NR_BANDWIDTHS_HZ = tuple(float(b) * 1e6 for b in range(10, 55, 5))
LTE_BANDWIDTHS_HZ = (5e6, 10e6, 15e6, 20e6)
NR_SCS_HZ = (15e3, 30e3)
LTE_SCS_HZ = 15e3

BAND_SAMPLE_RATE_HZ = 61.44e6
BAND_CENTER_FREQ_HZ = 4e9
MIXTURE_POWER_DBM = -40.0
OCCUPANCY = 0.9
CP_FRACTION = 0.07

NOISE, NR, LTE = 0, 1, 2


class Standard(str, enum.Enum):
    NR_LIKE = "NR_LIKE"
    LTE_LIKE = "LTE_LIKE"


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    TEST = "TEST"


@dataclasses.dataclass(frozen=True)
class WaveformConfig:
    standard: Standard
    bandwidth_hz: float
    scs_hz: float = 15e3
    n_subframes: int = 40
    burst_duty: float = 0.7
    sample_rate_hz: float = BAND_SAMPLE_RATE_HZ

    def __post_init__(self):
        object.__setattr__(self, "standard", Standard(self.standard))
        if self.standard is Standard.NR_LIKE:
            if not any(math.isclose(self.bandwidth_hz, b) for b in NR_BANDWIDTHS_HZ):
                raise ConfigurationError(f"NR-like bandwidth {self.bandwidth_hz} Hz not in 10..50 MHz grid")
            if not any(math.isclose(self.scs_hz, s) for s in NR_SCS_HZ):
                raise ConfigurationError(f"NR-like SCS must be 15 or 30 kHz, got {self.scs_hz}")
        else:
            if not any(math.isclose(self.bandwidth_hz, b) for b in LTE_BANDWIDTHS_HZ):
                raise ConfigurationError(f"LTE-like bandwidth {self.bandwidth_hz} Hz not in {{5,10,15,20}} MHz")
            if not math.isclose(self.scs_hz, LTE_SCS_HZ):
                raise ConfigurationError(f"LTE-like SCS is fixed at 15 kHz, got {self.scs_hz}")
        if not 0 < self.burst_duty <= 1:
            raise ConfigurationError(f"burst_duty must be in (0, 1], got {self.burst_duty}")
        if self.n_subframes < 1:
            raise ConfigurationError("n_subframes must be >= 1")
        if self.sample_rate_hz < self.bandwidth_hz:
            raise ConfigurationError("sample rate must be at least the signal bandwidth")
        if self.occupied_subcarriers < 1:
            raise ConfigurationError("configuration occupies no subcarriers")

    @property
    def occupied_subcarriers(self) -> int:
        return int(math.floor(OCCUPANCY * self.bandwidth_hz / self.scs_hz + 1e-9))


def _qpsk(rng, shape):
    bits = rng.integers(0, 2, size=(2,) + tuple(shape))
    return ((2 * bits[0] - 1) + 1j * (2 * bits[1] - 1)) / np.sqrt(2)


def generate_ofdm_burst(cfg: WaveformConfig, seed: int) -> IQRecording:
    """One contiguous burst of QPSK OFDM symbols inside ``n_subframes`` ms.

    The recording's annotations give the burst interval and the occupied
    frequency interval relative to baseband DC.
    """
    rng = np.random.default_rng(seed)
    fs = cfg.sample_rate_hz
    nfft = int(round(fs / cfg.scs_hz))
    n_occ = cfg.occupied_subcarriers
    if n_occ >= nfft:
        raise ConfigurationError(f"{n_occ} occupied subcarriers do not fit an FFT of {nfft}")
    cp = int(round(CP_FRACTION * nfft))
    sym_len = nfft + cp
    total = int(round(cfg.n_subframes * 1e-3 * fs))
    n_sym = -(-total // sym_len)
    n_active = max(1, int(round(cfg.burst_duty * n_sym)))
    first = int(rng.integers(0, n_sym - n_active + 1))

    k = np.arange(n_occ) - n_occ // 2
    grid = np.zeros((n_active, nfft), dtype=np.complex128)
    grid[:, k % nfft] = _qpsk(rng, (n_active, n_occ))
    body = np.fft.ifft(grid, axis=1) * (nfft / np.sqrt(n_occ))
    symbols = np.concatenate([body[:, -cp:], body], axis=1) if cp else body

    out = np.zeros(n_sym * sym_len, dtype=np.complex128)
    out[first * sym_len:(first + n_active) * sym_len] = symbols.ravel()
    out = out[:total]

    df = fs / nfft
    return IQRecording(
        out, fs, 0.0, None,
        {
            "standard": cfg.standard.value,
            "bandwidth_hz": cfg.bandwidth_hz,
            "occupied_lo_hz": (k[0] - 0.5) * df,
            "occupied_hi_hz": (k[-1] + 0.5) * df,
            "active_start_s": first * sym_len / fs,
            "active_stop_s": min((first + n_active) * sym_len, total) / fs,
        },
    )


@dataclasses.dataclass(frozen=True)
class ChannelConfig:
    """Tapped delay line.

    With ``rayleigh`` off every tap gain is ``sqrt(power)``, so a single
    0 dB tap is the identity.  With it on, each tap gets an independent
    circular complex Gaussian gain of that power.
    """

    taps: tuple
    doppler_hz: float = 0.0
    seed: int = 0
    rayleigh: bool = False

    def __post_init__(self):
        taps = tuple((float(d), float(p)) for d, p in self.taps)
        if not taps:
            raise ConfigurationError("channel needs at least one tap")
        delays = [d for d, _ in taps]
        if any(b < a for a, b in zip(delays, delays[1:])) or delays[0] < 0:
            raise ConfigurationError(f"tap delays must be nonnegative and nondecreasing: {delays}")
        if self.doppler_hz < 0:
            raise ConfigurationError("doppler_hz must be nonnegative")
        object.__setattr__(self, "taps", taps)

    @property
    def linear_powers(self) -> np.ndarray:
        p = 10.0 ** (np.array([p for _, p in self.taps]) / 10.0)
        return p / p.sum()


def default_channel(seed: int, doppler_hz: float = 0.0) -> ChannelConfig:
    """Three-tap exponential profile used for the segmentation mixtures."""
    return ChannelConfig(((0.0, 0.0), (0.5e-6, -3.0), (1.0e-6, -6.0)), doppler_hz, seed, rayleigh=True)


def apply_channel(sig: IQRecording, ch: ChannelConfig) -> IQRecording:
    fs = sig.sample_rate_hz
    x = np.asarray(sig.samples, dtype=np.complex128)
    n = x.size
    rng = np.random.default_rng(ch.seed)
    t = np.arange(n) / fs
    y = np.zeros(n, dtype=np.complex128)
    for (delay, _), power in zip(ch.taps, ch.linear_powers):
        if delay >= sig.duration_s:
            raise ConfigurationError(f"tap delay {delay} s exceeds recording duration {sig.duration_s} s")
        d = int(round(delay * fs))
        if ch.rayleigh:
            gain = np.sqrt(power / 2) * complex(rng.standard_normal(), rng.standard_normal())
        else:
            gain = np.sqrt(power)
        tap = np.zeros(n, dtype=np.complex128)
        tap[d:] = x[: n - d]
        if ch.doppler_hz > 0:
            angle, phase = rng.uniform(0, 2 * np.pi, size=2)
            tap *= np.exp(1j * (2 * np.pi * ch.doppler_hz * np.cos(angle) * t + phase))
        y += gain * tap
    return sig.with_samples(y)


@dataclasses.dataclass(frozen=True)
class MixturePlacement:
    offsets_hz: tuple
    bandwidths_hz: tuple
    sample_rate_hz: float = BAND_SAMPLE_RATE_HZ
    center_freq_hz: float = BAND_CENTER_FREQ_HZ
    duration_s: float = 0.040

    def __post_init__(self):
        object.__setattr__(self, "offsets_hz", tuple(float(f) for f in self.offsets_hz))
        object.__setattr__(self, "bandwidths_hz", tuple(float(b) for b in self.bandwidths_hz))
        if len(self.offsets_hz) != len(self.bandwidths_hz):
            raise PlacementError("offsets and bandwidths differ in length")
        half = self.sample_rate_hz / 2
        ivs = self.intervals
        for lo, hi in ivs:
            if not (-half < lo and hi < half):
                raise PlacementError(f"interval [{lo:.0f}, {hi:.0f}] Hz leaves the band (+/-{half:.0f} Hz)")
        for i in range(len(ivs)):
            for j in range(i + 1, len(ivs)):
                if ivs[i][0] < ivs[j][1] and ivs[j][0] < ivs[i][1]:
                    raise PlacementError(f"placements {i} and {j} overlap: {ivs[i]} vs {ivs[j]}")

    @property
    def intervals(self) -> list:
        return [(f - b / 2, f + b / 2) for f, b in zip(self.offsets_hz, self.bandwidths_hz)]


def upconvert_and_mix(signals: Sequence[IQRecording], placement: MixturePlacement) -> IQRecording:
    if len(signals) != len(placement.offsets_hz):
        raise PlacementError(f"{len(signals)} signals but {len(placement.offsets_hz)} placements")
    fs = placement.sample_rate_hz
    for s in signals:
        if not math.isclose(s.sample_rate_hz, fs):
            raise PlacementError(f"signal at {s.sample_rate_hz} Hz must be resampled to {fs} Hz first")
    n = max((len(s) for s in signals), default=int(round(placement.duration_s * fs)))
    out = np.zeros(n, dtype=np.complex128)
    idx = np.arange(n)
    for s, f in zip(signals, placement.offsets_hz):
        m = len(s)
        out[:m] += s.samples * np.exp(2j * np.pi * f * idx[:m] / fs)
    return IQRecording(out, fs, placement.center_freq_hz)


def power_dbm(samples: np.ndarray) -> float:
    return 10 * np.log10(np.mean(np.abs(samples) ** 2) / 1e-3)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def scale_to_dbm(sig: IQRecording, dbm: float) -> IQRecording:
    p = np.mean(np.abs(sig.samples) ** 2)
    if p == 0:
        return sig
    return sig.with_samples(sig.samples * np.sqrt(dbm_to_watts(dbm) / p))


def sample_noise_power(split, rng) -> float:
    split = Split(split)
    if split is Split.TRAIN:
        return float(rng.normal(-70.0, 5.0))
    return float(rng.uniform(-90.0, -20.0))


def add_noise(sig: IQRecording, power_dbm: float, rng) -> IQRecording:
    sigma = np.sqrt(dbm_to_watts(power_dbm) / 2)
    noise = sigma * (rng.standard_normal(len(sig)) + 1j * rng.standard_normal(len(sig)))
    return sig.with_samples(sig.samples + noise)


# -- labels ---------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Footprint:
    """Axis-aligned time-frequency rectangle occupied by one signal."""

    label: int
    f_lo: float
    f_hi: float
    t_lo: float
    t_hi: float


def _cell_edges(axis: np.ndarray):
    step = (axis[-1] - axis[0]) / (axis.size - 1) if axis.size > 1 else 1.0
    return axis - step / 2, axis + step / 2, step


def _overlap_fraction(lo, hi, a, b, step):
    return np.clip(np.minimum(hi, b) - np.maximum(lo, a), 0, None) / step


def label_image(footprints: Sequence[Footprint], freq_axis_hz, time_axis_s) -> np.ndarray:
    """Rasterize footprints onto the pixel grid given by the two axes.

    A pixel takes a footprint's label when at least half of its cell area
    lies inside the footprint.  Later footprints win ties.
    """
    freq_axis_hz = np.asarray(freq_axis_hz, dtype=float)
    time_axis_s = np.asarray(time_axis_s, dtype=float)
    flo, fhi, fstep = _cell_edges(freq_axis_hz)
    tlo, thi, tstep = _cell_edges(time_axis_s)
    labels = np.zeros((freq_axis_hz.size, time_axis_s.size), dtype=np.uint8)
    for fp in footprints:
        fr = _overlap_fraction(flo, fhi, fp.f_lo, fp.f_hi, fstep)
        tr = _overlap_fraction(tlo, thi, fp.t_lo, fp.t_hi, tstep)
        labels[np.outer(fr, tr) >= 0.5 - 1e-12] = fp.label
    return labels


def footprint_of(sig: IQRecording, offset_hz: float, label: int) -> Footprint:
    a = sig.annotations
    return Footprint(label, offset_hz + a["occupied_lo_hz"], offset_hz + a["occupied_hi_hz"],
                     a["active_start_s"], a["active_stop_s"])


def random_placement(bandwidths, rng, sample_rate_hz=BAND_SAMPLE_RATE_HZ, guard_hz=1e3) -> MixturePlacement:
    """Disjoint random positions for the given bandwidths, in random order."""
    bandwidths = list(bandwidths)
    order = rng.permutation(len(bandwidths))
    free = sample_rate_hz - sum(bandwidths) - 2 * guard_hz
    if free < 0:
        raise PlacementError(f"bandwidths {bandwidths} do not fit in {sample_rate_hz} Hz")
    cuts = np.sort(rng.uniform(0, free, size=len(bandwidths)))
    gaps = np.diff(np.concatenate([[0.0], cuts]))
    offsets = [0.0] * len(bandwidths)
    edge = -sample_rate_hz / 2 + guard_hz
    for gap, i in zip(gaps, order):
        edge += gap
        offsets[i] = edge + bandwidths[i] / 2
        edge += bandwidths[i]
    return MixturePlacement(offsets, bandwidths, sample_rate_hz)


@dataclasses.dataclass
class SegmentationExample:
    spectrogram: Spectrogram
    labels: np.ndarray
    noise_dbm: float
    configs: tuple
    placement: MixturePlacement


def make_segmentation_example(
    split,
    rng,
    params: Optional[SpectroParams] = None,
    image_shape=(256, 256),
    burst_duty: float = 0.7,
    n_subframes: int = 40,
    max_noise_dbm: Optional[float] = None,
    noise_dbm: Optional[float] = None,
    fading: bool = True,
    nr_bandwidths_hz: Optional[Sequence[float]] = None,
) -> SegmentationExample:
    """NR-like + LTE-like mixture, its resized log spectrogram and label image.

    ``noise_dbm=None`` draws from the split's distribution (rejecting draws
    above ``max_noise_dbm`` if given); pass ``-inf`` for a noiseless mixture.
    """
    params = params or SpectroParams()
    fs = BAND_SAMPLE_RATE_HZ
    nr_bw = float(rng.choice(nr_bandwidths_hz or NR_BANDWIDTHS_HZ))
    scs = float(rng.choice(NR_SCS_HZ))
    lte_bw = float(rng.choice([b for b in LTE_BANDWIDTHS_HZ if nr_bw + b < fs - 1e4]))
    cfgs = (
        WaveformConfig(Standard.NR_LIKE, nr_bw, scs, n_subframes, burst_duty, fs),
        WaveformConfig(Standard.LTE_LIKE, lte_bw, LTE_SCS_HZ, n_subframes, burst_duty, fs),
    )
    placement = random_placement([nr_bw, lte_bw], rng, fs)
    placement = dataclasses.replace(placement, duration_s=n_subframes * 1e-3)

    signals = []
    for cfg in cfgs:
        s = generate_ofdm_burst(cfg, int(rng.integers(2**31)))
        if fading:
            s = apply_channel(s, default_channel(int(rng.integers(2**31)), float(rng.uniform(0, 100))))
        signals.append(s)
    mix = scale_to_dbm(upconvert_and_mix(signals, placement), MIXTURE_POWER_DBM)

    if noise_dbm is None:
        noise_dbm = sample_noise_power(split, rng)
        while max_noise_dbm is not None and noise_dbm > max_noise_dbm:
            noise_dbm = sample_noise_power(split, rng)
    if np.isfinite(noise_dbm):
        mix = add_noise(mix, noise_dbm, rng)

    spec = resize_spectrogram(stft_spectrogram(mix, params), image_shape)
    fps = [footprint_of(s, f, lab) for s, f, lab in zip(signals, placement.offsets_hz, (NR, LTE))]
    labels = label_image(fps, spec.freq_axis_hz, spec.time_axis_s)
    return SegmentationExample(spec, labels, float(noise_dbm), cfgs, placement)


# -- over-the-air capture stand-in ----------------------------------------

def synthesize_capture(
    rng,
    sample_rate_hz: float = 10e6,
    duration_s: float = 0.1,
    center_freq_hz: float = 2.45e9,
    n_emitters: Optional[int] = None,
    noise_dbm: float = -80.0,
) -> IQRecording:
    """Multi-emitter capture with persistent bands and periodic on/off bursts.

    Each emitter is band-limited Gaussian noise inside a random sub-band,
    gated by a square wave (period 2-8 ms) or left on continuously.
    """
    n = int(round(sample_rate_hz * duration_s))
    if n_emitters is None:
        n_emitters = int(rng.integers(2, 5))
    t = np.arange(n) / sample_rate_hz
    out = np.zeros(n, dtype=np.complex128)
    freqs = np.fft.fftfreq(n, 1 / sample_rate_hz)
    emitters = []
    for _ in range(n_emitters):
        bw = rng.uniform(0.05, 0.2) * sample_rate_hz
        fc = rng.uniform(-0.5 * sample_rate_hz + bw / 2, 0.5 * sample_rate_hz - bw / 2)
        spectrum = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        spectrum[np.abs(freqs - fc) > bw / 2] = 0
        x = np.fft.ifft(spectrum)
        x /= np.sqrt(np.mean(np.abs(x) ** 2))
        if rng.random() < 0.25:
            period, duty, phase = 0.0, 1.0, 0.0
        else:
            period = rng.uniform(2e-3, 8e-3)
            duty = rng.uniform(0.3, 0.7)
            phase = rng.uniform(0, period)
            x = x * (((t + phase) % period) < duty * period)
        level = rng.uniform(-55.0, -35.0)
        out += np.sqrt(dbm_to_watts(level)) * x
        emitters.append({"center_hz": fc, "bandwidth_hz": bw, "period_s": period, "duty": duty, "dbm": level})
    rec = IQRecording(out, sample_rate_hz, center_freq_hz, None, {"emitters": emitters})
    return add_noise(rec, noise_dbm, rng)


# -- segmentation dataset on disk -----------------------------------------

def save_segmentation_example(ex: SegmentationExample, directory, k: int):
    directory = Path(directory)
    (directory / f"ex_{k}.spec").write_bytes(np.asarray(ex.spectrogram.values, dtype="<f4").tobytes())
    (directory / f"ex_{k}.lab").write_bytes(np.asarray(ex.labels, dtype=np.uint8).tobytes())


def example_summary(ex: SegmentationExample) -> dict:
    return {
        "noise_dbm": ex.noise_dbm,
        "nr_bandwidth_hz": ex.configs[0].bandwidth_hz,
        "nr_scs_hz": ex.configs[0].scs_hz,
        "lte_bandwidth_hz": ex.configs[1].bandwidth_hz,
        "offsets_hz": list(ex.placement.offsets_hz),
    }


def load_segmentation_dataset(directory):
    """Returns ``(manifest, images (S, R, C) float32, labels (S, R, C) uint8)``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read segmentation manifest in {directory}: {exc}") from exc
    shape = tuple(manifest["image_shape"])
    images, labels = [], []
    for k in range(manifest["count"]):
        spec = np.frombuffer((directory / f"ex_{k}.spec").read_bytes(), dtype="<f4")
        lab = np.frombuffer((directory / f"ex_{k}.lab").read_bytes(), dtype=np.uint8)
        if spec.size != np.prod(shape) or lab.size != np.prod(shape):
            raise FormatError(f"example {k} in {directory} does not have shape {shape}")
        images.append(spec.reshape(shape))
        labels.append(lab.reshape(shape))
    return manifest, np.stack(images), np.stack(labels)
