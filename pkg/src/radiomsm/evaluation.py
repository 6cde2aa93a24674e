"""Resource-grid occupancy, forecasting rollouts, confusion matrices, splits."""
from __future__ import annotations

import dataclasses
import math
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, DimensionError, LabelError, MetricUndefined, SizeError
from .spectro import SentenceTokens, Spectrogram, detokenize

CLASS_NAMES = ("Noise", "NR", "LTE")
BINARY_NAMES = ("Noise", "Signal")


# -- resource grid --------------------------------------------------------

def occupancy_threshold(spec) -> float:
    """Mean plus half the population standard deviation of all entries."""
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
    if values.size == 0:
        raise SizeError("threshold of an empty spectrogram")
    return float(values.mean() + 0.5 * values.std())


@dataclasses.dataclass(frozen=True, eq=False)
class ResourceGrid:
    block_time_ms: float
    block_freq_mhz: float
    means: np.ndarray  # (freq blocks, time blocks)
    occupancy: np.ndarray
    threshold: float
    block_px: tuple = (1, 1)  # (rows, cols) per block


def block_means(values: np.ndarray, block_rows: int, block_cols: int) -> np.ndarray:
    rows, cols = values.shape
    nr, nc = rows // block_rows, cols // block_cols
    if nr == 0 or nc == 0:
        raise SizeError(f"block of {block_rows}x{block_cols} px exceeds a {rows}x{cols} spectrogram")
    tiles = values[: nr * block_rows, : nc * block_cols].reshape(nr, block_rows, nc, block_cols)
    return tiles.mean(axis=(1, 3))


def _axis_step(axis) -> float:
    axis = np.asarray(axis, dtype=np.float64)
    return float((axis[-1] - axis[0]) / (axis.size - 1)) if axis.size > 1 else math.inf


def block_pixels(block: float, step: float) -> int:
    return max(1, int(round(block / step)))


def to_resource_grid(spec: Spectrogram, block_time_ms: float, block_freq_mhz: float, threshold: float) -> ResourceGrid:
    """Tile the spectrogram into blocks, average each, compare with ``threshold``.

    Block sizes are rounded to whole pixels using the spectrogram's axis
    spacing; trailing partial blocks are dropped.  Occupied means strictly
    above the threshold.
    """
    values = np.asarray(spec.values, dtype=np.float64)
    rows = block_pixels(block_freq_mhz * 1e6, abs(_axis_step(spec.freq_axis_hz)))
    cols = block_pixels(block_time_ms * 1e-3, abs(_axis_step(spec.time_axis_s)))
    means = block_means(values, rows, cols)
    return ResourceGrid(block_time_ms, block_freq_mhz, means, means > threshold, float(threshold), (rows, cols))


def occupied_recall(pred: ResourceGrid, truth: ResourceGrid) -> float:
    if pred.occupancy.shape != truth.occupancy.shape:
        raise DimensionError(f"grid shapes differ: {pred.occupancy.shape} vs {truth.occupancy.shape}")
    occupied = int(truth.occupancy.sum())
    if occupied == 0:
        raise MetricUndefined("ground truth has no occupied blocks")
    return int((pred.occupancy & truth.occupancy).sum()) / occupied


def sentence_spectrogram(image: np.ndarray, duration_ms: float, total_cols: int, sample_rate_hz: float) -> Spectrogram:
    """Wrap a (part of a) sentence image with axes derived from the sentence geometry."""
    rows, cols = image.shape
    dt = duration_ms * 1e-3 / total_cols
    df = sample_rate_hz / rows if sample_rate_hz > 0 else 1.0
    return Spectrogram(image, (np.arange(rows) - rows / 2) * df, np.arange(cols) * dt)


def parse_block(text: str) -> tuple:
    """``"1msx5mhz"`` -> ``(1.0, 5.0)``."""
    t = text.strip().lower()
    try:
        time_part, freq_part = t.split("x")
        if not (time_part.endswith("ms") and freq_part.endswith("mhz")):
            raise ValueError
        return float(time_part[:-2]), float(freq_part[:-3])
    except ValueError:
        raise ConfigurationError(f"block spec {text!r} must look like '1msx5mhz'") from None


def block_name(time_ms: float, freq_mhz: float) -> str:
    return f"{time_ms:g}msx{freq_mhz:g}mhz"


# -- forecasting ----------------------------------------------------------

class PersistenceForecaster:
    """Repeats the last observed token."""

    def forecast(self, tokens):
        t = tokens if tokens.dim() == 5 else tokens.unsqueeze(2)
        return t[:, -1]


@torch.no_grad()
def rollout_forecast(model, context, steps: int = 4) -> np.ndarray:
    """Autoregressive rollout; returns ``(steps, F, W)`` predicted tokens.

    Each prediction is appended and the oldest token dropped, so the window
    length stays that of ``context``.
    """
    if steps < 1:
        raise ConfigurationError(f"steps must be >= 1, got {steps}")
    if isinstance(context, SentenceTokens):
        context = context.tokens
    window = torch.as_tensor(np.asarray(context, dtype=np.float32)).unsqueeze(0)
    if hasattr(model, "eval"):
        model.eval()
    out = []
    for _ in range(steps):
        nxt = model.forecast(window)  # (1, 1, F, W)
        nxt = nxt.reshape(1, 1, *window.shape[2:])
        out.append(nxt[0, 0].numpy().copy())
        window = torch.cat([window[:, 1:], nxt], dim=1)
    return np.stack(out)


def forecast_occupancy_eval(
    model,
    sentences: Sequence[SentenceTokens],
    blocks: Sequence[tuple],
    steps: int = 4,
    context_tokens: Optional[int] = None,
) -> dict:
    """Occupied-block recall of rolled-out forecasts against the true future.

    The last ``steps`` tokens of each sentence are the target; the preceding
    ``context_tokens`` are the context.  Predictions and truth are mapped
    back to dB with the sentence's stats and thresholded with the truth's
    threshold.  Counts are pooled over sentences; a block counts towards
    every rollout step whose token it overlaps.
    """
    if not sentences:
        raise ConfigurationError("forecast evaluation needs at least one sentence")
    tally = {b: {"hits": np.zeros(steps, int), "occ": np.zeros(steps, int), "hits_all": 0, "occ_all": 0}
             for b in blocks}
    for sent in sentences:
        t_total, _, width = sent.tokens.shape
        ctx = context_tokens or t_total - steps
        if ctx < 1 or ctx + steps > t_total:
            raise ConfigurationError(f"context {ctx} + {steps} steps does not fit {t_total} tokens")
        pred = rollout_forecast(model, sent.tokens[t_total - steps - ctx:t_total - steps], steps)
        truth = sent.tokens[t_total - steps:]
        pred_img = sent.destandardize(detokenize(pred).astype(np.float64))
        true_img = sent.destandardize(detokenize(truth).astype(np.float64))
        delta = occupancy_threshold(true_img)
        cols_total = t_total * width
        for b in blocks:
            pg = to_resource_grid(sentence_spectrogram(pred_img, sent.duration_ms, cols_total, sent.sample_rate_hz),
                                  b[0], b[1], delta)
            tg = to_resource_grid(sentence_spectrogram(true_img, sent.duration_ms, cols_total, sent.sample_rate_hz),
                                  b[0], b[1], delta)
            hit = pg.occupancy & tg.occupancy
            acc = tally[b]
            acc["hits_all"] += int(hit.sum())
            acc["occ_all"] += int(tg.occupancy.sum())
            bc = tg.block_px[1]
            for j in range(tg.occupancy.shape[1]):
                lo, hi = j * bc, (j + 1) * bc
                for k in range(steps):
                    if lo < (k + 1) * width and k * width < hi:
                        acc["hits"][k] += int(hit[:, j].sum())
                        acc["occ"][k] += int(tg.occupancy[:, j].sum())

    def ratio(h, o):
        return None if o == 0 else h / o

    rows = []
    for b in blocks:
        acc = tally[b]
        rows.append({
            "block": block_name(*b),
            "time_ms": b[0],
            "freq_mhz": b[1],
            "per_step": [ratio(int(h), int(o)) for h, o in zip(acc["hits"], acc["occ"])],
            "pooled": ratio(acc["hits_all"], acc["occ_all"]),
            "hits": acc["hits_all"],
            "occupied": acc["occ_all"],
        })
    return {"steps": steps, "n_sentences": len(sentences), "recall": rows}


# -- segmentation ---------------------------------------------------------

@dataclasses.dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted
    class_names: tuple

    @property
    def rates(self) -> np.ndarray:
        sums = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, sums, out=np.zeros(self.counts.shape), where=sums > 0)

    @property
    def recall(self) -> np.ndarray:
        return np.diag(self.rates)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "counts": self.counts.tolist(),
                "rates": self.rates.tolist()}


def confusion_matrix(pred_labels, true_labels, k: int = 3, class_names=None) -> ConfusionMatrix:
    pred = np.asarray(pred_labels).ravel().astype(np.int64)
    true = np.asarray(true_labels).ravel().astype(np.int64)
    if pred.shape != true.shape:
        raise DimensionError(f"label fields differ in size: {pred.size} vs {true.size}")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise LabelError(f"labels must lie in [0, {k})")
    counts = np.bincount(true * k + pred, minlength=k * k).reshape(k, k)
    if class_names is None:
        class_names = CLASS_NAMES if k == 3 else BINARY_NAMES if k == 2 else tuple(map(str, range(k)))
    return ConfusionMatrix(counts, tuple(class_names))


def merge_to_binary(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 2):
        raise LabelError("labels must lie in {0, 1, 2}")
    return (labels > 0).astype(np.uint8)


@torch.no_grad()
def predict_segmentation(model, tokens: np.ndarray, batch_size: int = 8) -> np.ndarray:
    model.eval()
    out = []
    for lo in range(0, len(tokens), batch_size):
        probs = model.segment(torch.from_numpy(np.asarray(tokens[lo:lo + batch_size], dtype=np.float32)))
        out.append(probs.argmax(dim=1).numpy().astype(np.uint8))
    return np.concatenate(out)


# -- splitting ------------------------------------------------------------

def split_dataset(items: Sequence, fractions: Sequence[float], seed: int) -> list:
    """Deterministic shuffled partition; split sizes round the cumulative fractions."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigurationError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    items = list(items)
    order = np.random.default_rng(seed).permutation(len(items))
    bounds = [0] + [int(round(c * len(items))) for c in np.cumsum(fractions)]
    bounds[-1] = len(items)
    return [[items[i] for i in order[lo:hi]] for lo, hi in zip(bounds, bounds[1:])]


def split_by_group(groups: Sequence, fractions: Sequence[float], seed: int) -> list:
    """Split item indices so that no group (recording) spans two splits."""
    unique = sorted(set(groups))
    parts = split_dataset(unique, fractions, seed)
    where = {g: k for k, part in enumerate(parts) for g in part}
    out = [[] for _ in parts]
    for i, g in enumerate(groups):
        out[where[g]].append(i)
    return out
