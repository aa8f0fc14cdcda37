"""Command-line front end: ``wavecompose <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import biaxial, evaluation, generate as gen, train
from .codec import read_wav, resample, write_wav
from .config import biaxial_config, load_config, train_config, wavenet_config
from .errors import FormatError, InputError, TrainingError
from .symbolic import (parse_midi_file, read_musicnet_labels, render_sine, scale_score,
                       write_midi_file)
from .wavenet import WaveNetModel

log = logging.getLogger("wavecompose")

EXIT_OK, EXIT_INPUT, EXIT_FORMAT, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def blob_hash(path) -> str:
    """Git-style object id of a file's bytes."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    timestamp: str = ""

    def write(self, out_dir: Path) -> Path:
        self.timestamp = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise InputError(f"input not found: {path}")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, inputs=()) -> RunManifest:
    hashed = {str(p): blob_hash(p) for p in inputs if p is not None and Path(p).is_file()}
    return RunManifest(args.command, args.config, args.seed, hashed)


def _load_score(path):
    path = _need(path)
    if path.suffix.lower() in (".csv", ".txt"):
        return read_musicnet_labels(path)
    return parse_midi_file(path)


def _load_dataset(data_dir, tcfg, mcfg):
    data_dir = _need(data_dir)
    index = data_dir / "index.json"
    if not index.exists():
        raise InputError(f"{data_dir} has no index.json (run prep first)")
    try:
        items = json.loads(index.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{index}: invalid JSON", exc.pos) from None
    pairs = []
    for it in items:
        pcm = read_wav(data_dir / it["wav"])
        if pcm.sample_rate != mcfg.sample_rate:
            pcm = resample(pcm, mcfg.sample_rate)
        pairs.append((pcm, parse_midi_file(data_dir / it["midi"]), it["source"]))
    return train.build_dataset(pairs, tcfg, mcfg), [data_dir / it["wav"] for it in items]


# ------------------------------------------------------------- subcommands


def cmd_prep(args, cfg):
    out = _out_dir(args)
    mcfg = wavenet_config(cfg, True)
    pairs, inputs = [], []
    if args.synthetic:
        pairs = train.synthetic_pairs(args.synthetic, args.duration, mcfg.sample_rate, args.seed)
    else:
        if not args.wav or len(args.wav) != len(args.score or []):
            raise InputError("give matching --wav and --score lists (or --synthetic N)")
        for w, s in zip(args.wav, args.score):
            pcm = read_wav(_need(w))
            if pcm.sample_rate != mcfg.sample_rate:
                pcm = resample(pcm, mcfg.sample_rate)
            pairs.append((pcm, _load_score(s), Path(w).stem))
            inputs += [w, s]
    items = []
    for i, (pcm, score, source) in enumerate(pairs):
        wav_name, mid_name = f"{i:03d}.wav", f"{i:03d}.mid"
        write_wav(pcm, out / wav_name)
        write_midi_file(score, out / mid_name)
        items.append({"wav": wav_name, "midi": mid_name, "source": source})
    (out / "index.json").write_text(json.dumps(items, indent=2) + "\n")
    m = _manifest(args, inputs)
    m.outputs = ["index.json"] + [x for it in items for x in (it["wav"], it["midi"])]
    m.write(out)
    print(f"prepared {len(items)} aligned pairs in {out}")


def cmd_train_audio(args, cfg):
    out = _out_dir(args)
    mcfg = wavenet_config(cfg, args.conditioned)
    tcfg = train_config(cfg, seed=args.seed, steps=args.steps)
    dataset, inputs = _load_dataset(args.data, tcfg, mcfg)
    start, opt = 0, None
    if args.resume:
        model, opt, start = train.load_checkpoint(args.resume)
        inputs.append(args.resume)
    else:
        model = WaveNetModel(mcfg, seed=tcfg.seed)
    opt = opt or tcfg.optimizer()
    losses = train.train(model, dataset, tcfg, optimizer=opt, start_step=start)
    train.save_checkpoint(model, opt, start + len(losses), out / "model.ckpt")
    train.write_loss_csv(out / "loss.csv", losses, start)
    m = _manifest(args, inputs)
    m.outputs = ["model.ckpt", "loss.csv"]
    m.write(out)
    print(f"trained {len(losses)} steps, final loss {losses[-1]:.6f}")


def cmd_compare_loss(args, cfg):
    out = _out_dir(args)
    cond, uncond = wavenet_config(cfg, True), wavenet_config(cfg, False)
    tcfg = train_config(cfg, seed=args.seed, steps=args.steps)
    dataset, inputs = _load_dataset(args.data, tcfg, cond)
    c, u = train.run_comparison(dataset, cond, uncond, tcfg, out_dir=out)
    window = min(100, len(c))
    sc, su = train.smooth(c, window), train.smooth(u, window)
    tail = slice(len(c) // 3 * 2, None)
    below = bool(np.all(sc[tail] < su[tail]))
    m = _manifest(args, inputs)
    m.outputs = ["conditioned.csv", "unconditioned.csv"]
    m.write(out)
    print(f"smoothed final loss: conditioned {sc[-1]:.6f}, unconditioned {su[-1]:.6f}; "
          f"conditioned below over last third: {below}")


def cmd_train_composer(args, cfg):
    out = _out_dir(args)
    bcfg = biaxial_config(cfg)
    paths = [_need(p) for p in args.score or []]
    if not paths:
        raise InputError("give one or more --score files")
    corpus = biaxial.scores_to_corpus([_load_score(p) for p in paths], args.step_rate)
    result = biaxial.train_composer(corpus, bcfg, args.steps or 1000, args.seed,
                                    learning_rate=args.learning_rate)
    biaxial.save_composer(result.model, out / "composer.ckpt", result.optimizer)
    train.write_loss_csv(out / "loss.csv", result.losses)
    m = _manifest(args, paths)
    m.outputs = ["composer.ckpt", "loss.csv"]
    m.write(out)
    print(f"trained composer {len(result.losses)} steps, final loss {result.losses[-1]:.6f}")


def cmd_compose(args, cfg):
    out = _out_dir(args)
    model = biaxial.load_composer(args.checkpoint)
    score = biaxial.sample_score(model, args.steps or 64, args.temperature, args.seed,
                                 args.step_rate)
    write_midi_file(score, out / "composed.mid")
    m = _manifest(args, [args.checkpoint])
    m.outputs = ["composed.mid"]
    m.write(out)
    print(f"composed {len(score)} notes over {score.duration:.3f}s")


def _request(args, score):
    model, _, _ = train.load_checkpoint(args.checkpoint)
    return gen.GenerateRequest(model, score, args.duration, args.temperature, args.seed, args.fast)


def cmd_generate(args, cfg):
    out = _out_dir(args)
    score = _load_score(args.score) if args.score else None
    result = gen.generate(_request(args, score))
    write_wav(result.pcm, out / "generated.wav")
    m = _manifest(args, [args.checkpoint, args.score])
    m.outputs = ["generated.wav"]
    if result.score is not None:
        write_midi_file(result.score, out / "generated.mid")
        m.outputs.append("generated.mid")
    m.write(out)
    print(f"generated {len(result.pcm)} samples, log-prob {result.log_prob:.3f}")


def cmd_edit(args, cfg):
    out = _out_dir(args)
    score = _load_score(args.score)
    edits = gen.parse_edit_script(_need(args.script).read_text())
    res = gen.edit_and_regenerate(_request(args, score), edits)
    write_wav(res.original.pcm, out / "original.wav")
    write_wav(res.edited.pcm, out / "edited.wav")
    write_midi_file(res.edited_score, out / "edited.mid")
    m = _manifest(args, [args.checkpoint, args.score, args.script])
    m.outputs = ["original.wav", "edited.wav", "edited.mid"]
    m.write(out)
    print(f"applied {len(edits)} edit(s); wrote original.wav and edited.wav")


def cmd_eval_xcorr(args, cfg):
    out = _out_dir(args)
    pcm = read_wav(_need(args.wav))
    score = _load_score(args.score)
    if args.distractor_score:
        distractors = [_load_score(p) for p in args.distractor_score]
    else:
        rng = np.random.default_rng(args.seed)
        distractors = evaluation.distractor_scores(rng, args.distractors, pcm.duration)
    spec = evaluation.stft(pcm, args.window, args.hop)
    report = evaluation.structure_test(pcm, score, distractors, args.max_lag, args.window, args.hop)
    evaluation.write_xcorr_csv(report.candidate, out / "xcorr.csv")
    evaluation.write_spectrogram_csv(spec, out / "spectrogram.csv")
    (out / "summary.csv").write_text("peak_lag,peak_value,percentile\n" + report.summary_line() + "\n")
    m = _manifest(args, [args.wav, args.score] + list(args.distractor_score or []))
    m.outputs = ["xcorr.csv", "spectrogram.csv", "summary.csv"]
    m.write(out)
    print(report.summary_line())


def cmd_synth(args, cfg):
    out = _out_dir(args)
    if args.score:
        score = _load_score(args.score)
    else:
        score = scale_score(duration=args.duration or 4.0)
        write_midi_file(score, out / "scale.mid")
    pcm = render_sine(score, args.sample_rate, args.duration)
    write_wav(pcm, out / "synth.wav")
    m = _manifest(args, [args.score])
    m.outputs = ["synth.wav"] + ([] if args.score else ["scale.mid"])
    m.write(out)
    print(f"rendered {pcm.duration:.3f}s at {pcm.sample_rate} Hz")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="wavecompose", description="Score-conditioned raw audio synthesis pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    def gen_flags(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--temperature", type=float, default=1.0)
        sp.add_argument("--duration", type=float)
        sp.add_argument("--fast", dest="fast", action="store_true", default=True)
        sp.add_argument("--slow", dest="fast", action="store_false")

    sp = add("prep", cmd_prep, "build an aligned dataset directory")
    sp.add_argument("--wav", nargs="+")
    sp.add_argument("--score", nargs="+", help="MIDI files or note-label CSVs, one per WAV")
    sp.add_argument("--synthetic", type=int, default=0, help="render N random melodies instead")
    sp.add_argument("--duration", type=float, default=8.0)

    for name, fn in (("train-audio", cmd_train_audio), ("compare-loss", cmd_compare_loss)):
        sp = add(name, fn, "train the audio model" if fn is cmd_train_audio
                 else "train both variants and write their loss curves")
        sp.add_argument("--data", required=True, help="directory written by prep")
        sp.add_argument("--steps", type=int)
        if fn is cmd_train_audio:
            sp.add_argument("--conditioned", dest="conditioned", action="store_true", default=True)
            sp.add_argument("--unconditioned", dest="conditioned", action="store_false")
            sp.add_argument("--resume", help="checkpoint to continue from")

    sp = add("train-composer", cmd_train_composer, "train the symbolic composer")
    sp.add_argument("--score", nargs="+")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--learning-rate", type=float, default=1e-2)
    sp.add_argument("--step-rate", type=float, default=biaxial.DEFAULT_STEP_RATE)

    sp = add("compose", cmd_compose, "sample a MIDI score from a composer checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--step-rate", type=float, default=biaxial.DEFAULT_STEP_RATE)

    sp = add("generate", cmd_generate, "render a score to audio with a trained model")
    gen_flags(sp)
    sp.add_argument("--score")

    sp = add("edit", cmd_edit, "edit a score and regenerate both versions")
    gen_flags(sp)
    sp.add_argument("--score", required=True)
    sp.add_argument("--script", required=True, help="edit script")

    sp = add("eval-xcorr", cmd_eval_xcorr, "score-vs-audio cross-correlation with a null test")
    sp.add_argument("--wav", required=True)
    sp.add_argument("--score", required=True)
    sp.add_argument("--distractors", type=int, default=50)
    sp.add_argument("--distractor-score", nargs="+")
    sp.add_argument("--max-lag", type=int, default=20)
    sp.add_argument("--window", type=int, default=evaluation.WINDOW_SIZE)
    sp.add_argument("--hop", type=int, default=evaluation.HOP_SIZE)

    sp = add("synth", cmd_synth, "sine-render a score (default: a C-major scale)")
    sp.add_argument("--score")
    sp.add_argument("--duration", type=float)
    sp.add_argument("--sample-rate", type=int, default=16000)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.fn(args, cfg)
    except (FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (InputError, TrainingError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


cli_dispatch = main


if __name__ == "__main__":
    sys.exit(main())
