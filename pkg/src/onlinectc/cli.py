"""Command line: ``datagen``, ``train``, ``decode``, ``eval`` and ``coverage``.

Log verbosity comes from the ``OCTC_LOG_LEVEL`` environment variable
(default WARNING).  Errors are reported on stderr with exit status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig, load_config
from .data import FormatError, Normalizer, SynthSpec, datagen, load_dataset
from .decode import ErrorReport, beam_search_decode, best_path_decode, edit_distance
from .labels import Alphabet
from .network import NetworkConfig, ParamVector, init_params
from .online import InvalidConfigError
from .optim import AnnealSchedule, OptimizerState
from .streaming import Utterance, concat_stream, coverage_report, length_histogram, read_histogram
from .trainer import TrainOptions, TrainRun, build_streams, fit, forward_log_probs

logger = logging.getLogger("onlinectc")


class CliError(Exception):
    pass


# train ------------------------------------------------------------------------


def train_options(cfg: RunConfig) -> TrainOptions:
    return TrainOptions(
        h=cfg.h,
        h_prime=cfg.h_prime,
        n_streams=cfg.n_streams,
        pretrain_frames=cfg.pretrain_frames,
        eval_interval=cfg.eval_interval,
        workers=cfg.workers,
        order_seed=cfg.seeds.order,
        dropout_seed=cfg.seeds.dropout,
        gap=cfg.gap,
        continuous=cfg.continuous,
        reset_at_boundaries=cfg.reset_at_boundaries,
        max_grad_norm=cfg.optimizer.max_grad_norm,
    )


def network_config(cfg: RunConfig, input_dim: int, output_dim: int) -> NetworkConfig:
    n = cfg.network
    return NetworkConfig(input_dim, output_dim, n.layers, n.cells, n.dropout, n.seed)


def run_train(cfg: RunConfig) -> dict:
    """Train per ``cfg``; writes checkpoints and ``metrics.jsonl`` to ``out_dir``."""
    train, alphabet = load_dataset(cfg.data.train)
    normalizer = Normalizer.fit(train)
    train = normalizer.apply_all(train)
    dev_streams = None
    if cfg.data.dev:
        dev, dev_alphabet = load_dataset(cfg.data.dev)
        if dev_alphabet != alphabet:
            raise CliError("dev alphabet differs from the training alphabet")
        dev_streams = build_streams(normalizer.apply_all(dev), cfg.dev_streams, cfg.seeds.order)
    input_dim = train[0].features.shape[1]
    params = init_params(network_config(cfg, input_dim, alphabet.size))
    o = cfg.optimizer
    optimizer = OptimizerState.create(len(params), o.kind, o.learning_rate, o.momentum, o.rms_decay, o.epsilon)
    schedule = None
    if cfg.anneal.enabled:
        a = cfg.anneal
        schedule = AnnealSchedule(a.patience, a.lr_decay_factor, o.learning_rate, a.lr_floor)
    run = TrainRun(params, train, train_options(cfg), optimizer)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    embedded = {**cfg.to_dict(), "alphabet": list(alphabet.labels), "input_dim": input_dim}
    logger.info("training: total unroll %d frames (%d streams x h=%d)", cfg.total_unroll, cfg.n_streams, cfg.h)
    try:
        with open(out / "metrics.jsonl", "w", encoding="utf-8") as log_file:
            result = fit(run, cfg.max_frames, dev_streams, schedule, log_file, cfg.max_epochs,
                         anneal_start=cfg.anneal.start_frames)
    finally:
        run.close()
    Checkpoint(embedded, params.data, optimizer, run.frames_seen, normalizer).save(out / "final.octc")
    best = result.best_params if result.best_params is not None else params.data
    Checkpoint(embedded, best, optimizer, run.frames_seen, normalizer).save(out / "best.octc")
    summary = {
        "frames_seen": run.frames_seen,
        "steps": run.steps,
        "epochs": run.epoch + 1,
        "stopped": result.stopped,
        "best_dev_error": result.best_score if dev_streams else None,
        "total_unroll": cfg.total_unroll,
        "peak_live_frames": run.peak_live_frames,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    return summary


# decode / eval ---------------------------------------------------------------------


def load_model(path: str | Path) -> tuple[ParamVector, Normalizer, Alphabet, Checkpoint]:
    ck = Checkpoint.load(path)
    cfg = ck.config
    alphabet = Alphabet(tuple(cfg["alphabet"]))
    n = cfg["network"]
    net = NetworkConfig(cfg["input_dim"], alphabet.size, n["layers"], n["cells"], n["dropout"], n["seed"])
    params = ParamVector(net, ck.params.copy())
    return params, ck.normalizer, alphabet, ck


def _decode(log_y: np.ndarray, beam: int) -> list[int]:
    return beam_search_decode(log_y, beam)[0] if beam > 1 else best_path_decode(log_y)


def decode_utterances(params: ParamVector, utterances: Sequence[Utterance], beam: int = 1) -> list[list[int]]:
    """Every utterance decoded from a zero RNN state."""
    return [_decode(ly, beam) for ly in forward_log_probs(params, [u.features for u in utterances])]


def decode_stream(params: ParamVector, utterances: Sequence[Utterance], beam: int = 1, gap: int = 0) -> list[int]:
    """All utterances concatenated into one stream, decoded without resets."""
    stream = concat_stream(utterances, gap=gap)
    return _decode(forward_log_probs(params, [stream.frames])[0], beam)


def _load_eval_data(manifest: str, normalizer: Normalizer, alphabet: Alphabet) -> list[Utterance]:
    utts, data_alphabet = load_dataset(manifest)
    if data_alphabet != alphabet:
        raise CliError("manifest alphabet differs from the model alphabet")
    return normalizer.apply_all(utts)


def run_decode(checkpoint: str, manifest: str, out: str | None, beam: int = 1, stream: bool = False,
               gap: int = 0) -> list[str]:
    params, normalizer, alphabet, _ = load_model(checkpoint)
    utts = _load_eval_data(manifest, normalizer, alphabet)
    if stream:
        lines = ["stream " + " ".join(alphabet.decode(decode_stream(params, utts, beam, gap)))]
    else:
        lines = [f"{u.name} " + " ".join(alphabet.decode(h)) for u, h in zip(utts, decode_utterances(params, utts, beam))]
    text = "\n".join(line.rstrip() for line in lines) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return lines


def run_eval(checkpoint: str, manifest: str, out: str | None, beam: int = 1, stream: bool = False,
             gap: int = 0) -> ErrorReport:
    params, normalizer, alphabet, ck = load_model(checkpoint)
    utts = _load_eval_data(manifest, normalizer, alphabet)
    if stream:
        ref = [k for u in utts for k in u.target]
        report = edit_distance(ref, decode_stream(params, utts, beam, gap))
    else:
        report = ErrorReport()
        for u, hyp in zip(utts, decode_utterances(params, utts, beam)):
            report = report + edit_distance(list(u.target), hyp)
    record = {**report.as_dict(), "mode": "stream" if stream else "utterance", "beam": beam,
              "utterances": len(utts), "frames_seen": ck.frames_seen}
    text = json.dumps(record, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return report


def run_coverage(h: int, h_prime: int, histogram: str | None = None, manifest: str | None = None,
                 out: str | None = None):
    if (histogram is None) == (manifest is None):
        raise CliError("give exactly one of --histogram and --manifest")
    if histogram is not None:
        hist = read_histogram(histogram)
    else:
        utts, _ = load_dataset(manifest)
        hist = length_histogram(len(u) for u in utts)
    report = coverage_report(hist, h, h_prime)
    if out:
        Path(out).write_text(report.to_text(), encoding="utf-8")
    else:
        sys.stdout.write(report.to_text())
    return report


# argument parsing ------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="onlinectc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("datagen", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sequences", type=int, default=600)
    g.add_argument("--test-sequences", type=int, default=100)
    g.add_argument("--dev-sequences", type=int, default=0)
    g.add_argument("--alphabet-size", type=int, default=6)
    g.add_argument("--symbols", type=int, nargs=2, default=(8, 12), metavar=("LO", "HI"))
    g.add_argument("--frames", type=int, nargs=2, default=(9, 15), metavar=("LO", "HI"))
    g.add_argument("--silence", type=int, nargs=2, default=(0, 0), metavar=("LO", "HI"))
    g.add_argument("--noise", type=float, default=0.5)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    for name, text in (("decode", "write hypotheses"), ("eval", "write an error report")):
        d = sub.add_parser(name, help=text)
        d.add_argument("--checkpoint", required=True)
        d.add_argument("--manifest", required=True)
        d.add_argument("--out")
        d.add_argument("--beam", type=int, default=1, help="beam width; 1 selects best-path decoding")
        d.add_argument("--stream", action="store_true", help="decode all utterances as one stream")
        d.add_argument("--gap", type=int, default=0, help="silence frames between utterances in --stream mode")

    c = sub.add_parser("coverage", help="CTC-TR coverage table")
    c.add_argument("--h", type=int, required=True)
    c.add_argument("--h-prime", type=int, required=True)
    c.add_argument("--histogram")
    c.add_argument("--manifest")
    c.add_argument("--out")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("OCTC_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "datagen":
            spec = SynthSpec(args.alphabet_size, args.sequences, tuple(args.symbols), tuple(args.frames),
                             args.noise, tuple(args.silence))
            paths = datagen(spec, args.seed, args.out, args.test_sequences, args.dev_sequences)
            print(json.dumps({k: str(v) for k, v in paths.items()}))
        elif args.command == "train":
            print(json.dumps(run_train(load_config(args.config, args.set))))
        elif args.command == "decode":
            run_decode(args.checkpoint, args.manifest, args.out, args.beam, args.stream, args.gap)
        elif args.command == "eval":
            run_eval(args.checkpoint, args.manifest, args.out, args.beam, args.stream, args.gap)
        else:
            run_coverage(args.h, args.h_prime, args.histogram, args.manifest, args.out)
    except (CliError, InvalidConfigError, FormatError, OSError, ValueError, KeyError) as exc:
        print(f"onlinectc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0
