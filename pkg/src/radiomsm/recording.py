"""Complex baseband recordings and the raw ``.iq`` / ``.meta`` file pair.

A recording on disk is two files sharing a stem::

    capture.iq     interleaved I,Q float32 little-endian
    capture.meta   ``key = value`` lines; sample_rate_hz and center_freq_hz
                   are required, capture_time is optional
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import ConfigurationError, FormatError, ManifestError

REQUIRED_META_KEYS = ("sample_rate_hz", "center_freq_hz")


@dataclasses.dataclass(frozen=True, eq=False)
class IQRecording:
    """Complex baseband samples plus the radio metadata needed to interpret them.

    ``annotations`` holds free-form provenance written by the generators
    (active burst interval, occupied bandwidth, ...). It is not persisted
    except for ``capture_time``.
    """

    samples: np.ndarray
    sample_rate_hz: float
    center_freq_hz: float = 0.0
    duration_s: Optional[float] = None
    annotations: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise ConfigurationError(f"samples must be 1-D, got shape {samples.shape}")
        if not np.iscomplexobj(samples):
            samples = samples.astype(np.complex128)
        samples = samples.copy() if samples.flags.writeable else samples
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        if not self.sample_rate_hz > 0:
            raise ConfigurationError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if self.duration_s is None:
            object.__setattr__(self, "duration_s", samples.size / self.sample_rate_hz)
        elif abs(self.duration_s * self.sample_rate_hz - samples.size) > 1.0:
            raise ConfigurationError(
                f"duration {self.duration_s} s does not match {samples.size} samples "
                f"at {self.sample_rate_hz} Hz"
            )

    def __len__(self) -> int:
        return self.samples.size

    def with_samples(self, samples: np.ndarray, **annotations: Any) -> "IQRecording":
        """Copy of this recording with new samples; duration is recomputed."""
        notes = {**self.annotations, **annotations}
        return IQRecording(samples, self.sample_rate_hz, self.center_freq_hz, None, notes)


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".iq", ".meta") else path
    return stem.with_suffix(".iq"), stem.with_suffix(".meta")


def save_iq_recording(rec: IQRecording, path) -> Path:
    """Write ``<stem>.iq`` and ``<stem>.meta``; returns the ``.iq`` path."""
    iq_path, meta_path = _paths(path)
    iq_path.parent.mkdir(parents=True, exist_ok=True)
    inter = np.empty(2 * len(rec), dtype="<f4")
    inter[0::2] = rec.samples.real
    inter[1::2] = rec.samples.imag
    iq_path.write_bytes(inter.tobytes())
    lines = [
        f"sample_rate_hz = {rec.sample_rate_hz!r}",
        f"center_freq_hz = {rec.center_freq_hz!r}",
    ]
    if "capture_time" in rec.annotations:
        lines.append(f"capture_time = {rec.annotations['capture_time']}")
    meta_path.write_text("\n".join(lines) + "\n")
    return iq_path


def read_meta(path) -> dict:
    meta = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ManifestError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        meta[key] = value
    return meta


def load_iq_recording(path) -> IQRecording:
    iq_path, meta_path = _paths(path)
    if not meta_path.exists():
        raise ManifestError(f"missing metadata sidecar {meta_path}")
    meta = read_meta(meta_path)
    missing = [k for k in REQUIRED_META_KEYS if k not in meta]
    if missing:
        raise ManifestError(f"{meta_path}: missing required keys {missing}")
    try:
        fs = float(meta["sample_rate_hz"])
        fc = float(meta["center_freq_hz"])
    except ValueError as exc:
        raise ManifestError(f"{meta_path}: {exc}") from None

    try:
        payload = iq_path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing IQ payload {iq_path}") from None
    if not payload or len(payload) % 8:
        raise FormatError(
            f"{iq_path}: payload of {len(payload)} bytes is not a whole number of I,Q float32 pairs"
        )
    inter = np.frombuffer(payload, dtype="<f4")
    samples = inter[0::2] + 1j * inter[1::2].astype(np.complex64)
    notes = {"source": iq_path.stem}
    if "capture_time" in meta:
        notes["capture_time"] = meta["capture_time"]
    return IQRecording(samples.astype(np.complex64), fs, fc, None, notes)
