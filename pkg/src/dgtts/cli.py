"""Command-line interface.

Subcommands: gen-data, train, train-two-stage, infer, check, bench,
variation. Exit codes: 0 success, 1 validation failure, 2 usage error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from . import diffusion
from .checks import run_checks
from .config import ConfigError, ModelConfig, TrainConfig, build_config, read_config_file
from .diffusion import make_variance_schedule
from .inference import InferenceRequest, denoise_chain, shallow_one_step, variation_analysis, write_pgm
from .metrics import bench, bench_csv
from .models import build_models
from .numerics import TensorFormatError, save_tensors, set_deterministic
from .synthdata import CorpusError, CorpusSpec, generate_corpus, load_corpus, save_corpus

log = logging.getLogger("dgtts")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _require(args, flag: str):
    value = getattr(args, flag.lstrip("-").replace("-", "_"))
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _load_corpus_flag(args):
    path = Path(_require(args, "--data"))
    if not path.exists():
        raise FileNotFoundError(f"--data: no corpus at {path}")
    return load_corpus(path)


def _configs(args, corpus=None) -> tuple[ModelConfig, TrainConfig]:
    file_values = read_config_file(args.config) if args.config else {}
    source = str(args.config) if args.config else "<config>"
    overrides = {k: v for k, v in vars(args).items() if v is not None}
    preset = overrides.get("preset") or (file_values["preset"][0] if "preset" in file_values else "tiny")
    if preset not in ("tiny", "paper"):
        raise ConfigError(f"unknown preset {preset!r}")
    base = {k: v for k, v in vars(ModelConfig.from_preset(preset)).items()}
    if corpus is not None:
        base.update(n_speakers=corpus.spec.n_speakers, n_tokens=corpus.spec.n_tokens,
                    mel_bins=corpus.spec.mel_bins)
    train_cfg = build_config(TrainConfig, file_values, overrides, source)
    model_overrides = {k: overrides[k] for k in ("T",) if k in overrides}
    model_overrides.setdefault("T", train_cfg.T)
    model_cfg = build_config(ModelConfig, file_values, model_overrides, source, **base)
    if model_cfg.T != train_cfg.T:
        model_cfg = ckpt.replace_T(model_cfg, train_cfg.T)
    return model_cfg, train_cfg


def _out_dir(args) -> Path:
    out = Path(_require(args, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_ints(text: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}") from None


def _request(args, corpus=None) -> InferenceRequest:
    T = getattr(args, "T", None)
    if args.tokens is not None:
        tokens = _parse_ints(args.tokens, "--tokens")
        if not tokens:
            raise UsageError("--tokens is empty")
        return InferenceRequest(tokens, args.speaker or 0, T_override=T, seed=args.seed)
    if corpus is None:
        raise UsageError("give --tokens or --data with --utterance")
    if args.utterance is None:
        utt = corpus.utterances[-1]
    else:
        match = [u for u in corpus.utterances if u.id == args.utterance]
        if not match:
            raise UsageError(f"--utterance: no utterance {args.utterance!r} in corpus")
        utt = match[0]
    return InferenceRequest.from_utterance(utt, teacher_forced=args.teacher_forced, T_override=T, seed=args.seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = CorpusSpec(n_speakers=args.speakers, n_tokens=args.tokens, n_utterances=args.utterances,
                      min_frames=args.min_frames, max_frames=args.max_frames, mel_bins=args.mel_bins,
                      seed=args.seed)
    corpus = generate_corpus(spec)
    out = Path(_require(args, "--out"))
    save_corpus(corpus, out)
    print(f"wrote {len(corpus)} utterances to {out}")
    return EXIT_OK


def _write_loss_figure(out: Path, name: str = "train_log.csv") -> None:
    from .plotting import plot_losses

    path = out / name
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) > 1:
        plot_losses(rows[0], [[float(v) for v in r] for r in rows[1:]], out / "losses.png")


def cmd_train(args) -> int:
    from .training import train_diffgan

    corpus = _load_corpus_flag(args)
    model_cfg, train_cfg = _configs(args, corpus)
    out = _out_dir(args)
    set_deterministic(train_cfg.seed)
    train, _ = corpus.split(args.valid)
    result = train_diffgan(train, model_cfg, train_cfg, out_dir=out, resume=args.resume)
    _write_loss_figure(out)
    last = result.history[-1] if result.history else None
    print(f"trained to step {result.store.updates['gen']}; checkpoint {out / ckpt.CHECKPOINT_NAME}"
          + (f"; last L_mel {last.L_mel:.4f}" if last else ""))
    return EXIT_OK


def cmd_train_two_stage(args) -> int:
    from .training import train_stage1_basic, train_two_stage

    corpus = _load_corpus_flag(args)
    model_cfg, train_cfg = _configs(args, corpus)
    out = _out_dir(args)
    set_deterministic(train_cfg.seed)
    train, _ = corpus.split(args.valid)
    stage1 = Path(args.stage1) if args.stage1 else out / ckpt.STAGE1_NAME
    if args.stage1 is None and not (args.resume and stage1.exists()):
        train_stage1_basic(train, model_cfg, train_cfg, out_dir=out)
        print(f"stage 1 done: {stage1}")
    result = train_two_stage(train, model_cfg, train_cfg, stage1, out_dir=out, resume=args.resume)
    _write_loss_figure(out)
    print(f"stage 2 trained to step {result.store.updates['gen']}; checkpoint {out / ckpt.CHECKPOINT_NAME}")
    return EXIT_OK


def _load_generator(args, mode: str):
    loaded = ckpt.load_model(_require(args, "--checkpoint"))
    if loaded.generator is None:
        raise UsageError(f"--checkpoint holds a {loaded.kind} model, not a generator")
    if mode == "two-stage" and loaded.kind != "two_stage":
        raise UsageError(f"--mode two-stage needs a two-stage checkpoint, {args.checkpoint} is {loaded.kind}")
    return loaded


def cmd_infer(args) -> int:
    set_deterministic(args.seed)
    loaded = _load_generator(args, args.mode)
    corpus = load_corpus(args.data) if args.data else None
    req = _request(args, corpus)
    out = _out_dir(args)
    meta = {"mode": args.mode, "seed": args.seed, "speaker": req.speaker,
            "tokens": ",".join(str(t) for t in req.tokens)}
    if args.mode == "two-stage":
        res = shallow_one_step(req, loaded.generator)
        mel, passes = res.mel, res.decoder_passes
    else:
        res = denoise_chain(req, loaded.generator, trace=args.trace)
        mel, passes = res.mel, res.decoder_passes
        if args.trace:
            from .plotting import plot_trace

            for t, x in res.trace:
                write_pgm(out / f"trace_t{t}.pgm", x.numpy())
            plot_trace([(t, x.numpy()) for t, x in res.trace], mel.numpy(), out / "trace.png")
    meta["decoder_passes"] = passes
    save_tensors(out / "mel.dgtt", {"mel": mel}, meta)
    if args.pgm or args.trace:
        write_pgm(out / "mel.pgm", mel.numpy())
    print(f"{mel.shape[0]} frames, {passes} decoder pass(es) -> {out / 'mel.dgtt'}")
    return EXIT_OK


def cmd_check(args) -> int:
    # resolved at call time so a replaced schedule maker is what gets checked
    maker = diffusion.make_variance_schedule
    report = run_checks(schedule_maker=maker, gradients=not args.no_gradients)
    table = maker(args.T).to_csv()
    if args.json:
        payload = json.loads(report.json())
        payload["schedule_table"] = table
        print(json.dumps(payload, indent=1))
    else:
        sys.stdout.write(table)
        print(report.text())
    return EXIT_OK if report.passed else EXIT_FAIL


def _bench_generators(args):
    if args.checkpoint:
        loaded = ckpt.load_model(args.checkpoint)
        if loaded.generator is None:
            raise UsageError(f"--checkpoint holds a {loaded.kind} model, not a generator")
        return loaded.generator, loaded.generator if loaded.kind == "two_stage" else None
    cfg = ModelConfig.from_preset(args.preset or "tiny")
    gen, _ = build_models(cfg, seed=args.seed)
    two, _ = build_models(cfg, seed=args.seed, two_stage=True)
    return gen, two


def cmd_bench(args) -> int:
    from .plotting import plot_bench

    set_deterministic(args.seed)
    gen, two = _bench_generators(args)
    out = _out_dir(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    runners = {}
    for m in modes:
        if m == "two-stage":
            if two is None:
                raise UsageError("--modes two-stage needs a two-stage checkpoint")
            runners[m] = lambda req, g=two: _shallow_info(req, g)
        else:
            try:
                T = int(m.lstrip("T"))
            except ValueError:
                raise UsageError(f"--modes: unknown mode {m!r}") from None
            sched = make_variance_schedule(T)
            runners[f"T={T}"] = lambda req, s=sched: _chain_info(req, gen, s)
    rng = np.random.default_rng(args.seed)
    lengths = _parse_ints(args.lengths, "--lengths")
    n_tokens = gen.cfg.n_tokens
    requests = [InferenceRequest(list(rng.integers(1, n_tokens + 1, size=L)), 0, seed=args.seed) for L in lengths]
    rows = bench(runners, requests, repeats=args.repeats)
    text = bench_csv(rows)
    (out / "bench.csv").write_text(text)
    plot_bench(rows, out / "bench.png")
    sys.stdout.write(text)
    return EXIT_OK


def _chain_info(req, gen, sched):
    r = denoise_chain(req, gen, sched)
    return r.mel.shape[0], r.decoder_passes, 0


def _shallow_info(req, gen):
    r = shallow_one_step(req, gen)
    return r.mel.shape[0], r.decoder_passes, r.basic_passes


def cmd_variation(args) -> int:
    from .plotting import plot_variation

    if args.n_samples < 2:
        raise UsageError("--n-samples must be >= 2")
    set_deterministic(args.seed)
    loaded = _load_generator(args, "chain")
    corpus = load_corpus(args.data) if args.data else None
    req = _request(args, corpus)
    req.n_samples = args.n_samples
    res = variation_analysis(req, loaded.generator)
    out = _out_dir(args)
    (out / "variation.csv").write_text(res.to_csv())
    plot_variation(res.energy, res.centroid, out / "variation.png")
    print(f"{args.n_samples} samples, centroid contour variance {res.contour_variance():.4g} "
          f"-> {out / 'variation.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="corpus directory (from gen-data)")
    p.add_argument("--out", help="output directory for checkpoints and logs")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=["tiny", "paper"], default=None)
    p.add_argument("--steps", type=int, default=None, help="generator updates")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--T", dest="T", type=int, default=None, help="diffusion steps")
    p.add_argument("--g-lr", dest="g_lr", type=float, default=None)
    p.add_argument("--d-lr", dest="d_lr", type=float, default=None)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.add_argument("--valid", type=int, default=8, help="held-out utterances (last N of the corpus)")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.dgtt")


def _add_request_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="generator checkpoint")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="corpus directory to draw the utterance from")
    p.add_argument("--utterance", help="utterance id (default: last in corpus)")
    p.add_argument("--teacher-forced", dest="teacher_forced", action="store_true",
                   help="use ground-truth durations, pitch and energy")
    p.add_argument("--tokens", help="comma-separated token ids instead of --data")
    p.add_argument("--speaker", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", dest="T", type=int, default=None, help="override number of denoising steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgtts", description="Adversarial denoising diffusion acoustic model")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", help="corpus directory")
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--tokens", type=int, default=24)
    p.add_argument("--utterances", type=int, default=64)
    p.add_argument("--min-frames", dest="min_frames", type=int, default=24)
    p.add_argument("--max-frames", dest="max_frames", type=int, default=64)
    p.add_argument("--mel-bins", dest="mel_bins", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="single-stage adversarial training")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-two-stage", help="basic model, then shallow diffusion decoder")
    _add_train_flags(p)
    p.add_argument("--stage1-iters", dest="stage1_iters", type=int, default=None)
    p.add_argument("--stage1-objective", dest="stage1_objective", choices=["diffused", "recon"], default=None)
    p.add_argument("--stage1", help="existing stage-1 checkpoint (skips stage 1)")
    p.set_defaults(func=cmd_train_two_stage)

    p = sub.add_parser("infer", help="synthesize one mel spectrogram")
    _add_request_flags(p)
    p.add_argument("--mode", choices=["chain", "two-stage"], default="chain")
    p.add_argument("--trace", action="store_true", help="write every intermediate x_t as PGM")
    p.add_argument("--pgm", action="store_true", help="also write mel.pgm")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("check", help="run the analytic validation suite")
    p.add_argument("--json", action="store_true")
    p.add_argument("--no-gradients", dest="no_gradients", action="store_true")
    p.add_argument("--T", dest="T", type=int, default=4, help="steps in the printed schedule table")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("bench", help="pass counts and wall time against token length")
    p.add_argument("--checkpoint", help="generator checkpoint (default: random init of --preset)")
    p.add_argument("--preset", choices=["tiny", "paper"], default=None)
    p.add_argument("--out", help="output directory")
    p.add_argument("--modes", default="1,2,4,two-stage")
    p.add_argument("--lengths", default="8,16,32,64")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("variation", help="repeated sampling and contour statistics")
    _add_request_flags(p)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=10)
    p.set_defaults(func=cmd_variation)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"dgtts {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CorpusError, TensorFormatError, ckpt.CheckpointError) as exc:
        print(f"dgtts {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationFailure, ValueError) as exc:
        print(f"dgtts {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
