"""Masked spectrogram pretraining, frozen-backbone fine-tuning and checkpoints."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import struct
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .errors import (
    CheckpointCorruptError,
    CheckpointError,
    CheckpointVersionError,
    ConfigurationError,
    DegenerateLossError,
    DimensionError,
    LabelError,
    PreprocessingMismatch,
    TrainingDiverged,
)
from .model import MSMConvLSTM, ModelConfig, freeze_backbone, init_weights
from .spectro import sentence_from_image

log = logging.getLogger(__name__)

TASKS = ("msm", "forecast", "segment")
PROB_EPS = 1e-7


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    task: str = "msm"
    mask_ratio: float = 0.2
    batch_size: int = 8
    epochs: int = 20
    steps: Optional[int] = None  # overrides epochs when set
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    context_tokens: int = 12
    log_every: int = 10
    init_forecast_from_msm: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if not 0 < self.mask_ratio <= 1:
            raise ConfigurationError(f"mask_ratio must be in (0, 1], got {self.mask_ratio}")
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self):
        return dataclasses.asdict(self)


# -- masking --------------------------------------------------------------

def mask_count(ratio: float, n_tokens: int) -> int:
    # Python's round() is half-to-even
    return max(1, round(ratio * n_tokens))


def random_mask(tokens: np.ndarray, ratio: float, rng):
    """Replace ``mask_count`` whole tokens by Gaussian noise.

    ``tokens`` is one sentence ``(T, ...)`` or a batch ``(N, T, ...)``.  The
    noise uses each sentence's own mean and standard deviation.  Returns
    ``(masked_copy, indicator)`` with indicator shaped ``(T,)`` or ``(N, T)``.
    """
    if not 0 < ratio <= 1:
        raise ConfigurationError(f"mask ratio must be in (0, 1], got {ratio}")
    tokens = np.asarray(tokens)
    single = tokens.ndim == 3
    batch = tokens[None] if single else tokens
    n, t = batch.shape[:2]
    k = mask_count(ratio, t)
    masked = batch.copy()
    indicator = np.zeros((n, t), dtype=bool)
    for i in range(n):
        chosen = rng.choice(t, size=k, replace=False)
        indicator[i, chosen] = True
        mu, sd = float(batch[i].mean()), float(batch[i].std())
        noise = rng.standard_normal((k,) + batch.shape[2:]) * sd + mu
        masked[i, chosen] = noise.astype(batch.dtype)
    if single:
        return masked[0], indicator[0]
    return masked, indicator


# -- losses ---------------------------------------------------------------

def msm_loss(pred, target, mask):
    """Sum over masked tokens of the squared L2 distance between vectorized tokens."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    mask = torch.as_tensor(mask, dtype=torch.bool, device=pred.device)
    if mask.shape != pred.shape[:2]:
        raise DimensionError(f"mask {tuple(mask.shape)} does not match (N, T) = {tuple(pred.shape[:2])}")
    if not bool(mask.any()):
        raise DegenerateLossError("no masked tokens: loss carries no gradient signal")
    per_token = ((pred - target) ** 2).flatten(2).sum(-1)
    return (per_token * mask.to(per_token.dtype)).sum()


def forecast_loss(pred, target):
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return ((pred - target) ** 2).sum()


def segmentation_loss(probs, labels):
    """Cross entropy of per-pixel class probabilities against integer labels.

    Probabilities are clamped to ``[1e-7, 1]`` before the natural log.
    """
    labels = torch.as_tensor(labels, device=probs.device).long()
    n_classes = probs.shape[1]
    if labels.shape != (probs.shape[0],) + tuple(probs.shape[2:]):
        raise DimensionError(f"labels {tuple(labels.shape)} do not match probabilities {tuple(probs.shape)}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    picked = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp(PROB_EPS, 1.0)).sum()


# -- checkpoints ----------------------------------------------------------

CHECKPOINT_MAGIC = b"RMSMCKPT"
CHECKPOINT_VERSION = 1


@dataclasses.dataclass
class Checkpoint:
    model: MSMConvLSTM
    preprocess_digest: str
    spectro_params: dict = dataclasses.field(default_factory=dict)
    meta: dict = dataclasses.field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def backbone_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.model.named_parameters():
            if name.startswith("backbone."):
                h.update(name.encode())
                h.update(p.detach().to(torch.float32).cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()


def _serialize(ckpt: Checkpoint) -> bytes:
    table = []
    chunks = []
    offset = 0
    trainable = ckpt.model.trainability_mask()
    for name, p in ckpt.model.named_parameters():
        raw = p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        table.append({"name": name, "shape": list(p.shape), "offset": offset,
                      "nbytes": len(raw), "trainable": trainable[name]})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": CHECKPOINT_VERSION,
        "preprocess_digest": ckpt.preprocess_digest,
        "spectro_params": ckpt.spectro_params,
        "model_config": ckpt.model.config.to_dict(),
        "meta": ckpt.meta,
        "params": table,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)) + head + payload


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_serialize(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointCorruptError(f"{path} is not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    version, head_len = struct.unpack_from("<II", blob, pos)
    if version > CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path} has format version {version}; this build reads <= {CHECKPOINT_VERSION}")
    pos += 8
    try:
        header = json.loads(blob[pos:pos + head_len])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header ({exc})") from None
    payload = blob[pos + head_len:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointCorruptError(f"{path}: payload digest mismatch")

    model = MSMConvLSTM(ModelConfig(**header["model_config"]))
    params = dict(model.named_parameters())
    with torch.no_grad():
        for entry in header["params"]:
            raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
            p = params[entry["name"]]
            p.copy_(torch.from_numpy(arr.copy()))
            p.requires_grad_(entry["trainable"])
    return Checkpoint(model, header["preprocess_digest"], header["spectro_params"], header["meta"])


# -- datasets -------------------------------------------------------------

@dataclasses.dataclass
class ForecastDataset:
    """Standardized sentences; windows of ``context`` tokens predict the next one."""

    tokens: np.ndarray  # (S, T, F, W)
    digest: str
    task: str = "forecast"

    @classmethod
    def from_corpus(cls, corpus, indices=None) -> "ForecastDataset":
        return cls(corpus.tokens(indices), corpus.manifest["preprocess_digest"])

    def windows(self, context: int):
        s, t = self.tokens.shape[:2]
        if context >= t:
            raise ConfigurationError(f"context {context} leaves no target inside {t}-token sentences")
        inputs, targets = [], []
        for start in range(t - context):
            inputs.append(self.tokens[:, start:start + context])
            targets.append(self.tokens[:, start + context])
        return np.concatenate(inputs), np.concatenate(targets)


@dataclasses.dataclass
class SegmentationDataset:
    tokens: np.ndarray  # (S, T, F, W)
    labels: np.ndarray  # (S, F, T*W) integers
    digest: str
    n_classes: int = 3
    task: str = "segment"

    @classmethod
    def from_images(cls, images, labels, params, n_classes=3) -> "SegmentationDataset":
        """Standardize each log-power image and cut it into tokens like a sentence.

        With ``n_classes=2`` the NR and LTE labels are merged into one class.
        """
        images = np.asarray(images)
        labels = np.asarray(labels)
        if images.shape[1:] != params.sentence_shape:
            raise DimensionError(f"images {images.shape[1:]} do not match sentence shape {params.sentence_shape}")
        tokens = np.stack([sentence_from_image(img, params).tokens for img in images])
        if n_classes == 2:
            labels = (labels > 0).astype(np.uint8)
        elif n_classes != 3:
            raise ConfigurationError(f"segmentation supports 2 or 3 classes, got {n_classes}")
        return cls(tokens, labels, params.digest(), n_classes)


# -- loops ----------------------------------------------------------------

class TrainLog:
    """Append-only ``step=.. loss=.. lr=.. wallclock_s=..`` lines plus a JSON-lines mirror."""

    def __init__(self, run_dir=None, name="train"):
        self.history = []
        self.t0 = time.perf_counter()
        self.log_path = self.metrics_path = None
        if run_dir is not None:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            self.log_path = run_dir / f"{name}.log"
            self.metrics_path = run_dir / f"{name}_metrics.jsonl"

    def __call__(self, step, loss, lr, **extra):
        wall = time.perf_counter() - self.t0
        record = {"step": step, "loss": loss, "lr": lr, **extra}
        self.history.append(record)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(f"step={step} loss={loss:.6g} lr={lr:.6g} wallclock_s={wall:.3f}\n")
            with open(self.metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _batches(n, batch_size, rng, steps=None, epochs=1):
    """Shuffled mini-batch index arrays, by step count or by epochs."""
    produced = 0
    epoch = 0
    while True:
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            yield order[lo:lo + batch_size]
            produced += 1
            if steps is not None and produced >= steps:
                return
        epoch += 1
        if steps is None and epoch >= epochs:
            return


def _check_finite(loss, step, what):
    if not math.isfinite(loss):
        raise TrainingDiverged(f"{what} loss became {loss} at step {step}; lower the learning rate or check inputs")


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def pretrain(
    model: MSMConvLSTM,
    tokens: np.ndarray,
    cfg: TrainConfig,
    logger: Optional[Callable] = None,
    val_tokens: Optional[np.ndarray] = None,
) -> MSMConvLSTM:
    """Masked spectrogram modeling over all parameters.

    Per batch: mask whole tokens, reconstruct, take the summed squared error
    on masked tokens, Adam step.  ``val_tokens`` (with a fixed mask drawn
    once) is scored at every logged step.
    """
    if len(tokens) == 0:
        raise ConfigurationError("pretraining corpus is empty")
    rng = np.random.default_rng(cfg.seed)
    logger = logger or TrainLog()
    tokens = np.asarray(tokens, dtype=np.float32)
    opt = _adam([p for p in model.parameters() if p.requires_grad], cfg)
    val = None
    if val_tokens is not None:
        vm, vi = random_mask(np.asarray(val_tokens, dtype=np.float32), cfg.mask_ratio, np.random.default_rng(cfg.seed + 1))
        val = (torch.from_numpy(vm), torch.from_numpy(np.asarray(val_tokens, dtype=np.float32)), torch.from_numpy(vi))

    model.train()
    step = 0
    for idx in _batches(len(tokens), cfg.batch_size, rng, cfg.steps, cfg.epochs):
        masked, indicator = random_mask(tokens[idx], cfg.mask_ratio, rng)
        target = torch.from_numpy(tokens[idx])
        pred = model.reconstruct(torch.from_numpy(masked))[:, :, 0]
        loss = msm_loss(pred, target, indicator)
        value = loss.item()
        _check_finite(value, step, "pretraining")
        opt.zero_grad()
        loss.backward()
        opt.step()
        step += 1
        if step % cfg.log_every == 0 or step == 1:
            n_elem = int(indicator.sum()) * int(np.prod(tokens.shape[2:]))
            extra = {"mean_sq": value / n_elem}
            if val is not None:
                with torch.no_grad():
                    vloss = float(msm_loss(model.reconstruct(val[0])[:, :, 0], val[1], val[2]))
                _check_finite(vloss, step, "validation")
                extra["val_loss"] = vloss
            logger(step, value, cfg.lr, **extra)
    return model


@torch.no_grad()
def masked_token_mse(model, tokens, ratio=0.2, seed=0, batch_size=16):
    """Mean squared error per masked element, next to the per-sentence-mean predictor's."""
    rng = np.random.default_rng(seed)
    tokens = np.asarray(tokens, dtype=np.float32)
    model.eval()
    err = base = 0.0
    count = 0
    for lo in range(0, len(tokens), batch_size):
        chunk = tokens[lo:lo + batch_size]
        masked, ind = random_mask(chunk, ratio, rng)
        pred = model.reconstruct(torch.from_numpy(masked))[:, :, 0].numpy()
        means = chunk.reshape(len(chunk), -1).mean(1)[:, None, None, None]
        sel = ind[:, :, None, None]
        err += float((((pred - chunk) ** 2) * sel).sum())
        base += float((((means - chunk) ** 2) * sel).sum())
        count += int(ind.sum()) * int(np.prod(chunk.shape[2:]))
    return err / count, base / count


@torch.no_grad()
def _features(model, inputs, batch_size=16):
    model.eval()
    out = [model.backbone_forward(torch.from_numpy(inputs[lo:lo + batch_size]))
           for lo in range(0, len(inputs), batch_size)]
    return torch.cat(out)


def _check_digest(ckpt: Checkpoint, dataset):
    if ckpt.preprocess_digest != dataset.digest:
        raise PreprocessingMismatch(
            f"dataset preprocessing digest {dataset.digest[:12]} does not match the checkpoint's "
            f"{ckpt.preprocess_digest[:12]}; regenerate the data with the checkpoint's spectrogram settings"
        )


def _fit_head(model, head_params, features, targets, loss_fn, cfg, logger):
    rng = np.random.default_rng(cfg.seed)
    opt = _adam(head_params, cfg)
    step = 0
    for idx in _batches(len(features), cfg.batch_size, rng, cfg.steps, cfg.epochs):
        loss = loss_fn(features[torch.from_numpy(idx)], targets[torch.from_numpy(idx)])
        value = loss.item()
        _check_finite(value, step, "fine-tuning")
        opt.zero_grad()
        loss.backward()
        opt.step()
        step += 1
        if step % cfg.log_every == 0 or step == 1:
            logger(step, value, cfg.lr)


def _with_classes(model: MSMConvLSTM, n_classes: int, seed: int) -> MSMConvLSTM:
    """Same weights, segmentation head rebuilt for ``n_classes``."""
    if model.config.n_classes == n_classes:
        return model
    fresh = init_weights(MSMConvLSTM(dataclasses.replace(model.config, n_classes=n_classes)), seed)
    state = {k: v for k, v in model.state_dict().items() if not k.startswith("seg_head.")}
    fresh.load_state_dict(state, strict=False)
    return fresh


def finetune(ckpt: Checkpoint, dataset, cfg: TrainConfig, logger: Optional[Callable] = None) -> Checkpoint:
    """Train one task head on top of the frozen backbone.

    The backbone never receives gradients, so its features are computed once
    up front and the head is trained on those cached features.
    """
    if dataset.task != cfg.task:
        raise ConfigurationError(f"dataset is for {dataset.task!r} but the config asks for {cfg.task!r}")
    if cfg.task == "msm":
        raise ConfigurationError("use pretrain() for the msm task")
    _check_digest(ckpt, dataset)
    logger = logger or TrainLog()
    model = copy.deepcopy(ckpt.model)
    if cfg.task == "segment":
        model = _with_classes(model, dataset.n_classes, cfg.seed)
    freeze_backbone(model)

    if cfg.task == "forecast":
        if cfg.init_forecast_from_msm:
            model.forecast_head.load_state_dict(model.msm_head.state_dict())
        inputs, targets = dataset.windows(cfg.context_tokens)
        feats = _features(model, inputs.astype(np.float32))
        targets = torch.from_numpy(targets.astype(np.float32)).unsqueeze(1)
        head = model.forecast_head

        def loss_fn(f, y):
            return forecast_loss(model.forecast_head_forward(f), y)
    else:
        feats = _features(model, dataset.tokens.astype(np.float32))
        targets = torch.from_numpy(dataset.labels.astype(np.int64))
        head = model.seg_head

        def loss_fn(f, y):
            return segmentation_loss(model.segmentation_head_forward(f), y)

    model.train()
    _fit_head(model, list(head.parameters()), feats, targets, loss_fn, cfg, logger)
    meta = {**ckpt.meta, "history": ckpt.meta.get("history", []) + [f"finetune:{cfg.task}"]}
    return Checkpoint(model, ckpt.preprocess_digest, ckpt.spectro_params, meta)


def train_from_scratch(config: ModelConfig, dataset, cfg: TrainConfig, digest: str,
                       logger: Optional[Callable] = None, spectro_params=None) -> Checkpoint:
    """Baseline comparator: same architecture, every parameter trained on the task loss."""
    logger = logger or TrainLog()
    n_classes = getattr(dataset, "n_classes", config.n_classes)
    model = init_weights(MSMConvLSTM(dataclasses.replace(config, n_classes=n_classes)), cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if cfg.task == "forecast":
        inputs, targets = dataset.windows(cfg.context_tokens)
        head = model.forecast_head
    elif cfg.task == "segment":
        inputs, targets = dataset.tokens, dataset.labels
        head = model.seg_head
    else:
        raise ConfigurationError("baseline training supports forecast and segment tasks")
    inputs = inputs.astype(np.float32)
    used = list(model.backbone.parameters()) + list(head.parameters())
    for p in model.parameters():
        p.requires_grad_(any(p is q for q in used))
    opt = _adam(used, cfg)
    model.train()
    step = 0
    for idx in _batches(len(inputs), cfg.batch_size, rng, cfg.steps, cfg.epochs):
        x = torch.from_numpy(inputs[idx])
        if cfg.task == "forecast":
            loss = forecast_loss(model.forecast(x), torch.from_numpy(targets[idx].astype(np.float32)).unsqueeze(1))
        else:
            loss = segmentation_loss(model.segment(x), torch.from_numpy(targets[idx].astype(np.int64)))
        value = loss.item()
        _check_finite(value, step, "baseline")
        opt.zero_grad()
        loss.backward()
        opt.step()
        step += 1
        if step % cfg.log_every == 0 or step == 1:
            logger(step, value, cfg.lr)
    return Checkpoint(model, digest, dict(spectro_params or {}), {"history": [f"scratch:{cfg.task}"]})
