"""Command line front end: mel, train, synth, griffinlim, verify, bench.

Exit codes: 0 success, 1 usage, 2 data or format error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .errors import ConfigError, WaveGlowError
from .flow import PRESETS, WaveGlow, preset
from .infer import DEFAULT_SIGMA, benchmark_lengths, synthesize
from .signal import griffin_lim, load_mel, load_wav, mel_spectrogram, save_mel, save_wav, stft
from .train import TrainConfig, TrainState, load_dataset, load_model, train_loop
from .verify import verify_model, verify_preset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("waveglow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(args) -> TrainConfig:
    """Config file values, then explicit --seed on top."""
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_mel(args) -> int:
    mel = mel_spectrogram(load_wav(args.input))
    save_mel(args.out, mel)
    print(f"{args.out}: {mel.shape[0]} mels x {mel.shape[1]} frames")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        state = TrainState.load(args.resume)
        cfg = state.cfg
        if args.config or args.seed is not None:
            log.warning("resuming: --config/--seed ignored, the checkpoint's settings apply")
    else:
        state, cfg = None, _config(args)
        cfg.validate()
    if args.max_iters is not None:
        cfg.max_iters = args.max_iters
    dataset = load_dataset(args.data)

    def report(st, nll):
        if st.iteration % 10 == 0 or st.iteration == st.cfg.max_iters:
            print(f"iter {st.iteration}: nll={nll:.6f} lr={st.lr:g}", flush=True)

    state = train_loop(cfg, dataset, args.out, state=state, on_step=report)
    print(f"done at iteration {state.iteration}; checkpoints in {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    model = load_model(args.ckpt)
    mel = load_mel(args.mel)
    if mel.shape[0] != model.config.n_mels:
        raise ConfigError(f"{args.mel} has {mel.shape[0]} mel channels, checkpoint {args.ckpt} "
                          f"expects {model.config.n_mels}")
    clip = synthesize(model, mel, sigma=args.sigma, seed=cfg.seed)
    save_wav(args.out, clip)
    print(f"{args.out}: {len(clip)} samples ({clip.seconds:.3f} s)")
    return EXIT_OK


def cmd_griffinlim(args) -> int:
    clip = load_wav(args.input)
    y = griffin_lim(np.abs(stft(clip)), iterations=args.iters, length=len(clip))
    save_wav(args.out, y)
    print(f"{args.out}: {len(y)} samples after {args.iters} iterations")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _config(args)
    if args.ckpt:
        results = verify_model(load_model(args.ckpt), args.mode, seed=cfg.seed)
        label = str(args.ckpt)
    else:
        name = args.preset or cfg.preset
        results = verify_preset(name, args.mode, seed=cfg.seed)
        label = f"preset {name}"
    print(f"verify {label} ({args.mode})")
    for r in results:
        print(r.line())
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} ok" + (f", {failed} FAILED" if failed else ""))
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    if args.ckpt:
        model = load_model(args.ckpt)
    else:
        model = WaveGlow(preset(args.preset or cfg.preset), seed=cfg.seed)
    try:
        seconds = [float(s) for s in args.seconds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seconds expects a comma separated list, got {args.seconds!r}") from None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # an untrained model clips heavily; irrelevant to timing
        reports = benchmark_lengths(model, seconds, args.reps, seed=cfg.seed)
    for rep in reports:
        print(rep.to_text())
        if args.out:
            rep.write(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="waveglow", description="Flow-based mel-to-audio vocoder.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--seed", type=int, default=None, help="random seed (default: config or 0)")
        c.add_argument("--config", type=Path, default=None, help="key=value config file")
        c.set_defaults(fn=fn)
        return c

    c = command("mel", cmd_mel, "WAV -> log-mel file")
    c.add_argument("--in", dest="input", type=Path, required=True)
    c.add_argument("--out", type=Path, required=True)

    c = command("train", cmd_train, "maximum-likelihood training")
    c.add_argument("--data", type=Path, required=True, help="directory of 22.05 kHz mono WAVs")
    c.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    c.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    c.add_argument("--max-iters", type=int, default=None)

    c = command("synth", cmd_synth, "mel file -> WAV by sampling the latent")
    c.add_argument("--ckpt", type=Path, required=True)
    c.add_argument("--mel", type=Path, required=True)
    c.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    c.add_argument("--out", type=Path, required=True)

    c = command("griffinlim", cmd_griffinlim, "Griffin-Lim resynthesis of a WAV's magnitude spectrogram")
    c.add_argument("--in", dest="input", type=Path, required=True)
    c.add_argument("--iters", type=int, default=60)
    c.add_argument("--out", type=Path, required=True)

    c = command("verify", cmd_verify, "numerical self-checks")
    c.add_argument("--preset", choices=sorted(PRESETS), default=None)
    c.add_argument("--mode", choices=("f32", "f64"), default="f64")
    c.add_argument("--ckpt", type=Path, default=None, help="check a trained model instead of a fresh preset")

    c = command("bench", cmd_bench, "synthesis throughput")
    g = c.add_mutually_exclusive_group()
    g.add_argument("--ckpt", type=Path, default=None)
    g.add_argument("--preset", choices=sorted(PRESETS), default=None)
    c.add_argument("--seconds", default="1,10")
    c.add_argument("--reps", type=int, default=5)
    c.add_argument("--out", type=Path, default=None, help="directory for report files")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except WaveGlowError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
