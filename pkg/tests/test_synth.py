import dataclasses

import numpy as np
import pytest

from radiomsm import synth
from radiomsm.errors import ConfigurationError, PlacementError
from radiomsm.recording import IQRecording
from radiomsm.spectro import SpectroParams, stft_spectrogram
from radiomsm.synth import (
    ChannelConfig,
    Footprint,
    MixturePlacement,
    Split,
    Standard,
    WaveformConfig,
    add_noise,
    apply_channel,
    generate_ofdm_burst,
    label_image,
    sample_noise_power,
    upconvert_and_mix,
)


def test_occupied_subcarriers():
    assert WaveformConfig(Standard.NR_LIKE, 10e6, 15e3).occupied_subcarriers == 600
    assert WaveformConfig(Standard.LTE_LIKE, 5e6, 15e3).occupied_subcarriers == 300
    assert WaveformConfig(Standard.NR_LIKE, 50e6, 30e3).occupied_subcarriers == 1500


@pytest.mark.parametrize("kw", [
    dict(standard=Standard.NR_LIKE, bandwidth_hz=12e6),
    dict(standard=Standard.NR_LIKE, bandwidth_hz=10e6, scs_hz=60e3),
    dict(standard=Standard.LTE_LIKE, bandwidth_hz=25e6),
    dict(standard=Standard.LTE_LIKE, bandwidth_hz=5e6, scs_hz=30e3),
    dict(standard=Standard.LTE_LIKE, bandwidth_hz=5e6, burst_duty=0.0),
])
def test_waveform_config_rejects(kw):
    with pytest.raises(ConfigurationError):
        WaveformConfig(**kw)


def test_burst_duration_at_bandwidth_rate():
    cfg = WaveformConfig(Standard.NR_LIKE, 10e6, 15e3, sample_rate_hz=10e6)
    rec = generate_ofdm_burst(cfg, seed=3)
    assert abs(rec.duration_s - 0.040) <= 1 / 10e6


def test_burst_occupies_expected_band():
    fs = 61.44e6
    cfg = WaveformConfig(Standard.LTE_LIKE, 10e6, sample_rate_hz=fs)
    rec = generate_ofdm_burst(cfg, seed=1)
    a = rec.annotations
    x = rec.samples
    on = x[int(a["active_start_s"] * fs):int(a["active_stop_s"] * fs)]
    assert np.all(x[: int(a["active_start_s"] * fs)] == 0)
    psd = np.abs(np.fft.fftshift(np.fft.fft(on))) ** 2
    f = np.fft.fftshift(np.fft.fftfreq(on.size, 1 / fs))
    inside = (f > a["occupied_lo_hz"]) & (f < a["occupied_hi_hz"])
    assert psd[inside].sum() / psd.sum() > 0.98
    assert a["occupied_hi_hz"] - a["occupied_lo_hz"] == pytest.approx(600 * 15e3, rel=1e-3)
    duty = (a["active_stop_s"] - a["active_start_s"]) / rec.duration_s
    assert duty == pytest.approx(0.7, abs=0.01)


def test_identity_channel_exact(rng):
    x = rng.standard_normal(500) + 1j * rng.standard_normal(500)
    sig = IQRecording(x, 1e6)
    out = apply_channel(sig, ChannelConfig(((0.0, 0.0),)))
    assert np.array_equal(out.samples, sig.samples)


def test_two_path_comb_nulls():
    fs = 1e6
    d_samples = 10
    d = d_samples / fs
    ch = ChannelConfig(((0.0, 0.0), (d, 0.0)))
    n = 4000
    t = np.arange(n) / fs
    for k in range(3):
        f_null = (2 * k + 1) / (2 * d)
        tone = IQRecording(np.exp(2j * np.pi * f_null * t), fs)
        y = apply_channel(tone, ch).samples[d_samples:]
        # direct DFT at the tone frequency
        amp = abs(np.sum(y * np.exp(-2j * np.pi * f_null * t[d_samples:]))) / y.size
        assert amp < 1e-9
    f_peak = 1 / d
    tone = IQRecording(np.exp(2j * np.pi * f_peak * t), fs)
    y = apply_channel(tone, ch).samples[d_samples:]
    amp = abs(np.sum(y * np.exp(-2j * np.pi * f_peak * t[d_samples:]))) / y.size
    assert amp == pytest.approx(2 * np.sqrt(0.5), rel=1e-9)


def test_equal_tap_power_preserved(rng):
    n = 100_000
    x = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)
    sig = IQRecording(x, 1e6)
    ch = ChannelConfig(((0.0, 10 * np.log10(0.5)), (5e-6, 10 * np.log10(0.5))))
    y = apply_channel(sig, ch).samples
    assert np.mean(np.abs(y) ** 2) == pytest.approx(np.mean(np.abs(x) ** 2), rel=0.05)


def test_rayleigh_taps_average_power():
    n = 2000
    x = np.ones(n, dtype=complex)
    powers = [np.mean(np.abs(apply_channel(IQRecording(x, 1e6), synth.default_channel(s)).samples[5:]) ** 2)
              for s in range(400)]
    assert np.mean(powers) == pytest.approx(1.0, rel=0.15)


def test_channel_rejects_long_delay():
    with pytest.raises(ConfigurationError):
        apply_channel(IQRecording(np.ones(10), 1e6), ChannelConfig(((0.0, 0.0), (1e-3, -3.0))))


def test_upconverted_tone_lands_on_offset():
    fs = 61.44e6
    n = 4096
    tone = IQRecording(np.ones(n, dtype=complex), fs)
    placement = MixturePlacement((10e6,), (1e6,), fs, duration_s=n / fs)
    mix = upconvert_and_mix([tone], placement)
    p = SpectroParams(fft_size=1024, window_size=512, hop_size=512)
    spec = stft_spectrogram(mix, p)
    expected = np.argmin(np.abs(spec.freq_axis_hz - 10e6))
    assert np.all(spec.values.argmax(axis=0) == expected)
    # the same bin from a direct-summation DFT of the first frame
    seg = mix.samples[:512] * synth_hann(512)
    f = spec.freq_axis_hz
    dft = np.array([abs(np.sum(seg * np.exp(-2j * np.pi * fk * np.arange(512) / fs))) for fk in f])
    assert dft.argmax() == expected


def synth_hann(n):
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def test_empty_mixture_is_zero():
    placement = MixturePlacement((), (), 61.44e6, duration_s=1e-4)
    mix = upconvert_and_mix([], placement)
    assert len(mix) == round(1e-4 * 61.44e6)
    assert not np.any(mix.samples)


def test_placement_checks():
    MixturePlacement((-10e6, 10e6), (10e6, 10e6))
    with pytest.raises(PlacementError):
        MixturePlacement((0.0, 5e6), (10e6, 10e6))
    with pytest.raises(PlacementError):
        MixturePlacement((28e6,), (10e6,))
    with pytest.raises(PlacementError):
        upconvert_and_mix([IQRecording(np.ones(8), 1e6)], MixturePlacement((0.0,), (1e5,)))


def test_random_placement_disjoint(rng):
    for _ in range(200):
        bws = [float(rng.choice(synth.NR_BANDWIDTHS_HZ)), float(rng.choice(synth.LTE_BANDWIDTHS_HZ[:1]))]
        pl = synth.random_placement(bws, rng)
        (a0, a1), (b0, b1) = pl.intervals
        assert a1 <= b0 or b1 <= a0


def test_noise_power_distributions(rng):
    test = np.array([sample_noise_power(Split.TEST, rng) for _ in range(10_000)])
    assert test.min() >= -90 and test.max() <= -20
    train = np.array([sample_noise_power(Split.TRAIN, rng) for _ in range(100_000)])
    assert abs(train.mean() + 70) < 0.1
    assert abs(train.std() - 5) < 0.1


@pytest.mark.parametrize("dbm,var", [(-30, 1e-6), (0, 1e-3)])
def test_dbm_conversion(dbm, var):
    assert synth.dbm_to_watts(dbm) == pytest.approx(var, rel=1e-12)


def test_added_noise_power(rng):
    sig = IQRecording(np.zeros(1_000_000, dtype=complex), 1e6)
    noisy = add_noise(sig, -30.0, rng)
    assert np.mean(np.abs(noisy.samples) ** 2) == pytest.approx(1e-6, rel=0.02)


def test_scale_to_dbm(rng):
    sig = IQRecording(rng.standard_normal(1000) + 0j, 1e6)
    assert synth.power_dbm(synth.scale_to_dbm(sig, -40.0).samples) == pytest.approx(-40.0, abs=1e-9)


def test_full_coverage_labels_all_nr():
    freq = np.linspace(-30e6, 30e6, 64)
    time = np.linspace(0, 0.04, 32)
    fp = Footprint(synth.NR, -31e6, 31e6, -1e-3, 0.041)
    assert np.all(label_image([fp], freq, time) == synth.NR)


def test_label_fraction_matches_geometry():
    """Fraction of NR pixels equals occupied bandwidth / band times duty."""
    fs = 61.44e6
    rows, cols = 256, 256
    df, dt = fs / rows, 0.04 / cols
    freq = (np.arange(rows) - rows / 2) * df
    time = (np.arange(cols) + 0.5) * dt
    cfg = WaveformConfig(Standard.NR_LIKE, 20e6, 30e3)
    rec = generate_ofdm_burst(cfg, seed=5)
    fp = synth.footprint_of(rec, 3e6, synth.NR)
    labels = label_image([fp], freq, time)
    bw = fp.f_hi - fp.f_lo
    duty = (fp.t_hi - fp.t_lo) / 0.04
    n_rows = int(np.any(labels == synth.NR, axis=1).sum())
    n_cols = int(np.any(labels == synth.NR, axis=0).sum())
    assert abs(n_rows - bw / df) <= 1
    assert abs(n_cols - duty * cols) <= 1
    frac = (labels == synth.NR).mean()
    assert abs(frac - bw / fs * duty) <= (rows + cols) / (rows * cols)


def test_segmentation_example_shapes(rng):
    ex = synth.make_segmentation_example(Split.TEST, rng, n_subframes=10)
    assert ex.spectrogram.shape == (256, 256)
    assert ex.labels.shape == (256, 256)
    assert set(np.unique(ex.labels)) <= {0, 1, 2}
    assert -90 <= ex.noise_dbm <= -20


def test_segmentation_noise_cap(rng):
    p = SpectroParams(fft_size=128, window_size=128, hop_size=128, sentence_rows=32, n_tokens=4, token_width=8)
    for _ in range(3):
        ex = synth.make_segmentation_example(Split.TEST, rng, p, (32, 32), n_subframes=5, max_noise_dbm=-50)
        assert ex.noise_dbm <= -50
        assert np.any(ex.labels == synth.NR) and np.any(ex.labels == synth.LTE)


def test_noiseless_labels_match_power(rng):
    """Without noise, labeled pixels carry far more power than unlabeled ones."""
    p = SpectroParams(fft_size=256, window_size=256, hop_size=256, sentence_rows=64, n_tokens=4, token_width=16)
    ex = synth.make_segmentation_example(Split.TRAIN, rng, p, (64, 64), n_subframes=10,
                                         noise_dbm=-np.inf, fading=False)
    v = ex.spectrogram.values
    assert np.median(v[ex.labels > 0]) > np.median(v[ex.labels == 0]) + 30


def test_capture_structure(rng):
    rec = synth.synthesize_capture(rng, duration_s=0.01, n_emitters=3)
    assert len(rec) == 100_000
    assert rec.sample_rate_hz == 10e6
    assert len(rec.annotations["emitters"]) == 3
    p = dataclasses.replace(SpectroParams(), fft_size=256, window_size=256, hop_size=256)
    spec = stft_spectrogram(rec, p)
    assert spec.values.max() - np.median(spec.values) > 10
