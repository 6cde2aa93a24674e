"""Command-line entry point.

    radiomsm synth     synthetic segmentation examples or multi-emitter captures
    radiomsm corpus    raw IQ recordings -> sentence corpus
    radiomsm pretrain  masked spectrogram modeling
    radiomsm finetune  frozen-backbone forecasting / segmentation heads
    radiomsm baseline  same architecture trained from scratch on the task
    radiomsm eval      recall tables, confusion matrices and figures
    radiomsm plot      re-render figures from a saved report

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 preprocessing mismatch between checkpoint and data.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, CorpusError, RadioMSMError
from .spectro import SpectroParams

log = logging.getLogger("radiomsm")

SPECTRO_KEYS = ("fft_size", "window_size", "hop_size", "log_floor_db", "sentence_rows", "n_tokens", "token_width")
MODEL_KEYS = ("hidden", "n_layers", "seg_hidden", "peephole", "readout_index")
TRAIN_KEYS = ("mask_ratio", "batch_size", "epochs", "steps", "lr", "context_tokens", "log_every")

DEFAULTS = {
    "common": {"seed": 0, "jobs": 1, "reproducible": True},
    "synth": {"kind": "segment", "count": 100, "split": "train", "max_noise_dbm": None, "burst_duty": 0.7,
              "nr_bandwidth_mhz": None, "sample_rate_mhz": 10.0, "duration_ms": 100.0, "fading": True, "subframes": 40},
    "corpus": {"sentences": None},
    "pretrain": {"epochs": 20, "pretrain_fraction": 0.5},
    "finetune": {"task": "forecast", "classes": 3, "epochs": 20, "pretrain_fraction": 0.5, "test_fraction": 0.2},
    "baseline": {"task": "forecast", "classes": 3, "epochs": 20, "pretrain_fraction": 0.5, "test_fraction": 0.2},
    "eval": {"task": "forecast", "blocks": "1msx5mhz", "steps": 4, "classes": None,
             "pretrain_fraction": 0.5, "test_fraction": 0.2},
}


# -- config resolution ----------------------------------------------------

def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file < command-line flags (flags left unset are None)."""
    cfg = {**DEFAULTS["common"], **DEFAULTS.get(command, {})}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from None
        cfg.update({k: v for k, v in loaded.items() if not isinstance(v, dict)})
        cfg.update(loaded.get(command, {}))
    for key, value in vars(args).items():
        if key in ("func", "config", "command") or value is None:
            continue
        cfg[key] = value
    return cfg


def spectro_params(cfg: dict) -> SpectroParams:
    return SpectroParams(**{k: cfg[k] for k in SPECTRO_KEYS if cfg.get(k) is not None})


def train_config(cfg: dict, task: str):
    from .training import TrainConfig

    return TrainConfig(task=task, seed=cfg["seed"], **{k: cfg[k] for k in TRAIN_KEYS if cfg.get(k) is not None})


def model_overrides(cfg: dict) -> dict:
    return {k: cfg[k] for k in MODEL_KEYS if cfg.get(k) is not None}


def prepare_run(cfg: dict, command: str) -> Path:
    if not cfg.get("out"):
        raise ConfigurationError(f"{command}: --out is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True, default=str) + "\n")
    return out


def set_reproducible(enabled: bool):
    import torch

    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- synth ----------------------------------------------------------------

def _segment_job(args):
    seed_seq, split, params, image_shape, duty, subframes, max_noise, nr_bws, fading = args
    from . import synth

    rng = np.random.default_rng(seed_seq)
    return synth.make_segmentation_example(split, rng, params, image_shape, duty, subframes,
                                           max_noise_dbm=max_noise, fading=fading, nr_bandwidths_hz=nr_bws)


def _capture_job(args):
    seed_seq, fs, duration = args
    from .synth import synthesize_capture

    return synthesize_capture(np.random.default_rng(seed_seq), fs, duration)


def _map(fn, items, jobs):
    if jobs <= 1:
        return map(fn, items)
    pool = concurrent.futures.ProcessPoolExecutor(max_workers=jobs)
    return pool.map(fn, items)


def cmd_synth(cfg: dict) -> int:
    from . import synth
    from .recording import save_iq_recording

    params = spectro_params(cfg)
    nr_bws = None
    if cfg.get("nr_bandwidth_mhz"):
        nr_bws = [float(b) * 1e6 for b in str(cfg["nr_bandwidth_mhz"]).split(",")]
        for b in nr_bws:
            synth.WaveformConfig(synth.Standard.NR_LIKE, b)  # validates before anything is written
    if cfg["count"] < 1:
        raise ConfigurationError("--count must be >= 1")
    if int(cfg["subframes"]) < 1 or not 0 < float(cfg["burst_duty"]) <= 1:
        raise ConfigurationError("--subframes must be >= 1 and --burst-duty in (0, 1]")
    out = prepare_run(cfg, "synth")
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(cfg["count"])

    if cfg["kind"] == "capture":
        fs = float(cfg["sample_rate_mhz"]) * 1e6
        jobs = [(s, fs, float(cfg["duration_ms"]) * 1e-3) for s in seeds]
        names = []
        for k, rec in enumerate(_map(_capture_job, jobs, cfg["jobs"])):
            save_iq_recording(rec, out / f"rec_{k:04d}")
            names.append(f"rec_{k:04d}")
        write_json(out / "manifest", {"kind": "capture", "seed": cfg["seed"], "count": len(names),
                                      "recordings": names, "sample_rate_hz": fs,
                                      "duration_s": float(cfg["duration_ms"]) * 1e-3})
        print(f"wrote {len(names)} recordings to {out}")
        return 0

    split = synth.Split(str(cfg["split"]).upper())
    image_shape = params.sentence_shape
    jobs = [(s, split, params, image_shape, cfg["burst_duty"], int(cfg["subframes"]), cfg.get("max_noise_dbm"),
             nr_bws, cfg["fading"]) for s in seeds]
    summaries = []
    class_counts = np.zeros(3, dtype=np.int64)
    for k, ex in enumerate(_map(_segment_job, jobs, cfg["jobs"])):
        synth.save_segmentation_example(ex, out, k)
        summaries.append(synth.example_summary(ex))
        class_counts += np.bincount(ex.labels.ravel(), minlength=3)[:3]
    noise = ({"distribution": "normal", "mean_dbm": -70.0, "std_dbm": 5.0} if split is synth.Split.TRAIN
             else {"distribution": "uniform", "low_dbm": -90.0, "high_dbm": -20.0})
    if cfg.get("max_noise_dbm") is not None:
        noise["max_dbm"] = cfg["max_noise_dbm"]
    write_json(out / "manifest", {
        "kind": "segment", "split": split.value, "seed": cfg["seed"], "count": len(summaries),
        "noise": noise, "image_shape": list(image_shape), "spectro_params": params.to_dict(),
        "preprocess_digest": params.digest(), "signal_power_dbm": synth.MIXTURE_POWER_DBM,
        "examples": summaries,
    })
    print(f"wrote {len(summaries)} examples to {out}; pixel counts noise/NR/LTE = {class_counts.tolist()}")
    return 0


# -- corpus ---------------------------------------------------------------

def cmd_corpus(cfg: dict) -> int:
    from .recording import load_iq_recording
    from .spectro import build_corpus

    src = Path(cfg["input"])
    if not src.is_dir():
        raise ConfigurationError(f"input directory {src} does not exist")
    recordings = []
    for path in sorted(src.glob("*.iq")):
        try:
            recordings.append(load_iq_recording(path))
        except RadioMSMError as exc:
            log.warning("skipping %s: %s", path, exc)
    if not recordings:
        raise CorpusError(f"no readable recordings in {src}")
    params = spectro_params(cfg)
    out = prepare_run(cfg, "corpus")
    corpus = build_corpus(recordings, out, np.random.default_rng(cfg["seed"]), params,
                          cfg.get("sentences"), cfg["seed"])
    print(f"wrote {len(corpus)} sentences from {len(recordings)} recordings to {out}")
    return 0


# -- training -------------------------------------------------------------

def corpus_splits(corpus, cfg: dict) -> dict:
    """Recording-level split: pretraining part, then forecasting train/test."""
    from .evaluation import split_by_group

    pf = float(cfg.get("pretrain_fraction", 0.5))
    pre, rest = split_by_group(corpus.sources(), [pf, 1 - pf], cfg["seed"])
    tf = float(cfg.get("test_fraction", 0.2))
    rest_sources = [corpus.sentences[i].source for i in rest]
    tr, te = split_by_group(rest_sources, [1 - tf, tf], cfg["seed"] + 1)
    return {"pretrain": pre, "forecast_train": [rest[i] for i in tr], "forecast_test": [rest[i] for i in te]}


def _load_task_data(cfg: dict, task: str, part: str, n_classes=3):
    from .spectro import load_corpus
    from .synth import load_segmentation_dataset
    from .training import ForecastDataset, SegmentationDataset

    if task == "forecast":
        if not cfg.get("corpus"):
            raise ConfigurationError("forecasting needs --corpus")
        corpus = load_corpus(cfg["corpus"])
        idx = corpus_splits(corpus, cfg)[part]
        if not idx:
            raise ConfigurationError(f"the {part} split of {cfg['corpus']} is empty")
        return corpus, ForecastDataset.from_corpus(corpus, idx), idx
    if not cfg.get("dataset"):
        raise ConfigurationError("segmentation needs --dataset")
    manifest, images, labels = load_segmentation_dataset(cfg["dataset"])
    params = SpectroParams(**manifest["spectro_params"])
    return manifest, SegmentationDataset.from_images(images, labels, params, n_classes), None


def cmd_pretrain(cfg: dict) -> int:
    from .model import ModelConfig, build_model
    from .plotting import plot_loss_curve
    from .spectro import load_corpus
    from .training import Checkpoint, TrainLog, pretrain, save_checkpoint

    set_reproducible(cfg["reproducible"])
    corpus = load_corpus(cfg["corpus"])
    idx = corpus_splits(corpus, cfg)["pretrain"]
    if not idx:
        raise ConfigurationError("pretraining split is empty")
    out = prepare_run(cfg, "pretrain")
    params = corpus.params
    model = build_model(ModelConfig.for_params(params, **model_overrides(cfg)), cfg["seed"])
    logger = TrainLog(out, "train")
    tokens = corpus.tokens(idx)
    pretrain(model, tokens, train_config(cfg, "msm"), logger, val_tokens=tokens[: min(8, len(tokens))])
    ckpt = Checkpoint(model, corpus.manifest["preprocess_digest"], params.to_dict(), {"history": ["pretrain:msm"]})
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    write_json(out / "split.json", {"pretrain_sentences": idx})
    plot_loss_curve(logger.history, out / "loss.png", "MSM pretraining loss")
    print(f"pretrained on {len(idx)} sentences; checkpoint at {out / 'checkpoint.ckpt'}")
    return 0


def cmd_finetune(cfg: dict) -> int:
    from .plotting import plot_loss_curve
    from .training import TrainLog, finetune, load_checkpoint, save_checkpoint

    set_reproducible(cfg["reproducible"])
    ckpt = load_checkpoint(cfg["checkpoint"])
    task = cfg["task"]
    part = "forecast_train"
    _, dataset, _ = _load_task_data(cfg, task, part, int(cfg["classes"]))
    out = prepare_run(cfg, "finetune")
    logger = TrainLog(out, "train")
    tuned = finetune(ckpt, dataset, train_config(cfg, task), logger)
    save_checkpoint(tuned, out / "checkpoint.ckpt")
    write_json(out / "digests.json", {"backbone_before": ckpt.backbone_digest(), "backbone_after": tuned.backbone_digest()})
    plot_loss_curve(logger.history, out / "loss.png", f"{task} fine-tuning loss")
    print(f"fine-tuned {task} head; backbone digest {tuned.backbone_digest()[:16]} (unchanged)")
    return 0


def cmd_baseline(cfg: dict) -> int:
    from .model import ModelConfig
    from .training import TrainLog, save_checkpoint, train_from_scratch

    set_reproducible(cfg["reproducible"])
    task = cfg["task"]
    _, dataset, _ = _load_task_data(cfg, task, "forecast_train", int(cfg["classes"]))
    if task == "forecast":
        from .spectro import load_corpus

        params = load_corpus(cfg["corpus"]).params
    else:
        params = SpectroParams(**json.loads((Path(cfg["dataset"]) / "manifest").read_text())["spectro_params"])
    out = prepare_run(cfg, "baseline")
    config = ModelConfig.for_params(params, **model_overrides(cfg))
    ckpt = train_from_scratch(config, dataset, train_config(cfg, task), params.digest(), TrainLog(out, "train"),
                              params.to_dict())
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    print(f"trained {task} baseline from scratch; checkpoint at {out / 'checkpoint.ckpt'}")
    return 0


# -- evaluation -----------------------------------------------------------

def forecast_report(ckpt, corpus, idx, cfg) -> dict:
    from .evaluation import forecast_occupancy_eval, parse_block

    blocks = [parse_block(b) for b in str(cfg["blocks"]).split(",")]
    sentences = [corpus.sentences[i] for i in idx]
    ctx = cfg.get("context_tokens")
    return forecast_occupancy_eval(ckpt.model, sentences, blocks, int(cfg["steps"]), ctx)


def segmentation_report(ckpt, dataset) -> dict:
    from .evaluation import confusion_matrix, merge_to_binary, predict_segmentation

    pred = predict_segmentation(ckpt.model, dataset.tokens)
    k = dataset.n_classes
    cm = confusion_matrix(pred, dataset.labels, k)
    report = {"n_classes": k, "n_images": int(len(pred)), "confusion": cm.to_dict(),
              "recall": cm.recall.tolist()}
    if k == 3:
        report["binary_confusion"] = confusion_matrix(merge_to_binary(pred), merge_to_binary(dataset.labels), 2).to_dict()
    return report


def cmd_eval(cfg: dict) -> int:
    from .evaluation import ConfusionMatrix
    from .plotting import plot_confusion, plot_recall_curves
    from .training import _check_digest, load_checkpoint

    set_reproducible(cfg["reproducible"])
    ckpt = load_checkpoint(cfg["checkpoint"])
    base = load_checkpoint(cfg["baseline_checkpoint"]) if cfg.get("baseline_checkpoint") else None
    task = cfg["task"]
    classes = int(cfg["classes"] or ckpt.config.n_classes)
    data, dataset, idx = _load_task_data(cfg, task, "forecast_test", classes)
    _check_digest(ckpt, dataset)
    out = prepare_run(cfg, "eval")
    report = {"task": task}
    if task == "forecast":
        report["model"] = forecast_report(ckpt, data, idx, cfg)
        if base is not None:
            report["baseline"] = forecast_report(base, data, idx, cfg)
        write_json(out / "report.json", report)
        plot_recall_curves(report["model"], out / "recall.png", report.get("baseline"))
    else:
        report["model"] = segmentation_report(ckpt, dataset)
        if base is not None:
            report["baseline"] = segmentation_report(base, dataset)
        write_json(out / "report.json", report)
        for who in ("model", "baseline"):
            if who not in report:
                continue
            for key in ("confusion", "binary_confusion"):
                if key in report[who]:
                    d = report[who][key]
                    cm = ConfusionMatrix(np.array(d["counts"]), tuple(d["class_names"]))
                    plot_confusion(cm, out / f"{who}_{key}.png", f"{who} ({len(cm.class_names)} classes)")
    print(json.dumps(report["model"], indent=1)[:2000])
    return 0


def cmd_plot(cfg: dict) -> int:
    from .evaluation import ConfusionMatrix
    from .plotting import plot_confusion, plot_recall_curves

    report_path = Path(cfg["report"])
    try:
        report = json.loads(report_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read report {report_path}: {exc}") from None
    out = Path(cfg.get("out") or report_path.parent)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if report.get("task") == "forecast":
        written.append(plot_recall_curves(report["model"], out / "recall.png", report.get("baseline")))
    else:
        for who in ("model", "baseline"):
            for key in ("confusion", "binary_confusion"):
                if key in report.get(who, {}):
                    d = report[who][key]
                    cm = ConfusionMatrix(np.array(d["counts"]), tuple(d["class_names"]))
                    written.append(plot_confusion(cm, out / f"{who}_{key}.png"))
    for p in written:
        print(p)
    return 0


# -- parser ---------------------------------------------------------------

def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file; top-level keys apply to all commands, a section per command overrides")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes for data generation")
    p.add_argument("--reproducible", action=argparse.BooleanOptionalAction, default=None,
                   help="single-threaded deterministic kernels (default on)")


def _spectro_flags(p):
    g = p.add_argument_group("spectrogram / sentence geometry")
    g.add_argument("--fft-size", dest="fft_size", type=int)
    g.add_argument("--window-size", dest="window_size", type=int)
    g.add_argument("--hop-size", dest="hop_size", type=int)
    g.add_argument("--sentence-rows", dest="sentence_rows", type=int)
    g.add_argument("--n-tokens", dest="n_tokens", type=int)
    g.add_argument("--token-width", dest="token_width", type=int)


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    g.add_argument("--context-tokens", dest="context_tokens", type=int)
    g.add_argument("--log-every", dest="log_every", type=int)
    g.add_argument("--hidden", type=int, help="ConvLSTM channels (default 64)")
    g.add_argument("--layers", dest="n_layers", type=int, help="ConvLSTM layers (default 5)")
    g.add_argument("--pretrain-fraction", dest="pretrain_fraction", type=float)
    g.add_argument("--test-fraction", dest="test_fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radiomsm", description=__doc__.splitlines()[0] if __doc__ else None,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic data")
    _common(p)
    _spectro_flags(p)
    p.add_argument("--kind", choices=("segment", "capture"))
    p.add_argument("--count", type=int)
    p.add_argument("--split", type=str.lower, choices=("train", "test"))
    p.add_argument("--max-noise-dbm", dest="max_noise_dbm", type=float)
    p.add_argument("--burst-duty", dest="burst_duty", type=float)
    p.add_argument("--subframes", type=int, help="1 ms subframes per waveform (default 40)")
    p.add_argument("--nr-bandwidth-mhz", dest="nr_bandwidth_mhz", help="comma list restricting NR-like bandwidths")
    p.add_argument("--fading", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--sample-rate-mhz", dest="sample_rate_mhz", type=float, help="capture kind only")
    p.add_argument("--duration-ms", dest="duration_ms", type=float, help="capture kind only")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("corpus", help="build a sentence corpus from .iq recordings")
    _common(p)
    _spectro_flags(p)
    p.add_argument("--input", required=True)
    p.add_argument("--sentences", type=int)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("pretrain", help="masked spectrogram pretraining")
    _common(p)
    _train_flags(p)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (("finetune", cmd_finetune, "train a task head on a frozen backbone"),
                                 ("baseline", cmd_baseline, "train the same architecture from scratch")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _train_flags(p)
        if name == "finetune":
            p.add_argument("--checkpoint", required=True)
        p.add_argument("--task", choices=("forecast", "segment"))
        p.add_argument("--corpus")
        p.add_argument("--dataset")
        p.add_argument("--classes", type=int, choices=(2, 3))
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="metrics, reports and figures")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline-checkpoint", dest="baseline_checkpoint")
    p.add_argument("--task", choices=("forecast", "segment"))
    p.add_argument("--corpus")
    p.add_argument("--dataset")
    p.add_argument("--classes", type=int, choices=(2, 3))
    p.add_argument("--blocks", help="comma list like 1msx5mhz,2msx10mhz")
    p.add_argument("--steps", type=int)
    p.add_argument("--context-tokens", dest="context_tokens", type=int)
    p.add_argument("--pretrain-fraction", dest="pretrain_fraction", type=float)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="re-render figures from report.json")
    _common(p)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    verbose = args.verbose
    del args.verbose
    try:
        cfg = resolve_config(args.command, args)
        return args.func(cfg)
    except RadioMSMError as exc:
        print(f"radiomsm {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        if verbose:
            raise
        print(f"radiomsm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
