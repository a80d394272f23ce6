"""Command-line interface: ``weaksep <subcommand> ...``.

Subcommands: synthesize, train, train-nmf, separate, evaluate, experiment.
Every pipeline tunable is a flag whose default is the library default.
Failures exit with status 1 and a one-line message on stderr; bad usage
exits with status 2.
"""
import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from . import autoencoder as ae
from . import checkpoint
from .evaluation import (EvalReport, Piece, SynthConfig, evaluate_stems, load_toy_piece,
                         reports_to_csv, reports_to_table, run_experiment, synthesize)
from .nmf import load_nmf, nmf_separate, save_nmf
from .pipeline import PipelineConfig, analyze, train_autoencoder, train_nmf
from .score import group_notes, load_notes
from .separation import SeparationRequest, group_restrictions, separate
from .signal import read_wav, write_wav

log = logging.getLogger("weaksep")

# PipelineConfig fields set elsewhere (seed) or given their own flag name
_SKIP = {"seed"}
_FLAG_NAMES = {"multi_frame_context": "context"}
_HELP = {
    "window": "STFT window length in samples (power of two)",
    "hop": "STFT hop size in samples",
    "units_per_class": "representation units per (instrument, pitch) class (P)",
    "free_units": "unlabelled units that may always be active",
    "onset_tolerance": "seconds around an onset during which the onset unit may be active",
    "sustain_tolerance": "seconds by which a note's span is widened for its sustain units",
    "hidden_dims": "comma-separated encoder hidden widths",
    "decoder_hidden_dims": "comma-separated decoder hidden widths; empty for a single layer "
                           "(default: last encoder width)",
    "multi_frame_context": "frames of context on each side for method D",
    "init_output_scale": "initial gain on the decoder's output weights",
    "input_peak": "magnitudes are scaled so the largest training value equals this",
    "lam": "activity-cost weight in the refinement stage",
    "stage1_iters": "structured-dropout ADAM iterations",
    "stage2_iters": "activity-cost refinement iterations",
    "step_size": "ADAM step size",
    "eps_kl": "smoothing constant of the KL divergence",
    "loss_tolerance": "stop a stage when the relative improvement over 50 iterations is "
                      "below this (0 disables)",
    "nmf_iters": "NMF multiplicative update iterations",
    "nmf_tol": "NMF relative improvement stopping threshold",
    "mask_denominator": "soft-mask denominator",
    "eps_mask": "soft-mask denominator floor",
}
_LABEL_KEYS = ("window", "hop", "units_per_class", "free_units", "onset_tolerance",
               "sustain_tolerance")


class CliError(Exception):
    pass


def _dims(text):
    text = text.strip()
    if not text:
        return ()
    try:
        dims = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if any(d <= 0 for d in dims):
        raise argparse.ArgumentTypeError("widths must be positive")
    return dims


def _show(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return value


def _add_pipeline_flags(parser, only=None):
    defaults = PipelineConfig()
    group = parser.add_argument_group("pipeline settings")
    for f in fields(PipelineConfig):
        if f.name in _SKIP or (only is not None and f.name not in only):
            continue
        flag = "--" + _FLAG_NAMES.get(f.name, f.name).replace("_", "-")
        default = getattr(defaults, f.name)
        kw = {"dest": f.name, "default": default, "help": _HELP[f.name]}
        if default is not None:
            kw["help"] += f" (default: {_show(default)})"
        if f.name in ("hidden_dims", "decoder_hidden_dims"):
            kw["type"] = _dims
            kw["metavar"] = "W1,W2,..."
        elif f.name == "mask_denominator":
            kw["choices"] = ("sum_of_groups", "full_label_output")
        else:
            kw["type"] = type(default)
        group.add_argument(flag, **kw)


def _pipeline_config(args):
    values = {}
    for f in fields(PipelineConfig):
        if hasattr(args, f.name) and f.name not in _SKIP:
            values[f.name] = getattr(args, f.name)
    values["seed"] = args.seed if args.seed is not None else values.get("seed", 0)
    return PipelineConfig.from_dict(values)


def _add_synth_flags(parser):
    defaults = SynthConfig()
    group = parser.add_argument_group("synthesizer")
    for f in fields(SynthConfig):
        if f.name == "timbre_seed":
            continue
        default = getattr(defaults, f.name)
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(default),
                           default=default, help=f"(default: {default})")


def _synth_config(args, seed_config):
    values = {f.name: getattr(args, f.name) for f in fields(SynthConfig)
              if f.name != "timbre_seed"}
    return SynthConfig(timbre_seed=seed_config.sub_seed("synth"), **values)


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# subcommands ----------------------------------------------------------------

def cmd_synthesize(args):
    notes = load_notes(_existing(args.notes, "note list"))
    config = _pipeline_config(args)
    mixture, stems = synthesize(notes, group_notes(notes, args.group_by),
                                _synth_config(args, config))
    out = _out_dir(args.out)
    write_wav(out / "mixture.wav", mixture)
    for name, clip in stems.items():
        write_wav(out / f"{name}.wav", clip)
    print(f"wrote mixture and {len(stems)} stems to {out}")


def _train_inputs(args):
    clip = read_wav(_existing(args.audio, "audio file"))
    notes = load_notes(_existing(args.notes, "note list"))
    config = _pipeline_config(args)
    return config, analyze(clip, notes, config)


def _model_meta(config, method):
    return {"method": method, "labels": {k: getattr(config, k) for k in _LABEL_KEYS},
            "pipeline": config.to_dict()}


def cmd_train(args):
    config, analysis = _train_inputs(args)
    model, trace = train_autoencoder(args.method, analysis, config)
    ae.save_model(args.model, model, _model_meta(config, args.method))
    final = trace.all[-1] if trace.all else float("nan")
    print(f"trained method {args.method}: K={model.n_units}, {len(trace.all)} iterations, "
          f"final loss {final:.6g}; saved {args.model}")


def cmd_train_nmf(args):
    config, analysis = _train_inputs(args)
    model, trace = train_nmf(analysis, config)
    save_nmf(args.model, model, _model_meta(config, "A"))
    final = trace[-1] if trace else float("nan")
    print(f"trained NMF: K={model.n_units}, {len(trace)} updates, final divergence "
          f"{final:.6g}; saved {args.model}")


def cmd_separate(args):
    path = _existing(args.model, "model")
    kind, _, _ = checkpoint.load(path)
    if kind == "autoencoder":
        model, meta = ae.load_model(path)
    elif kind == "nmf":
        model, meta = load_nmf(path)
    else:
        raise CliError(f"{path}: unknown model kind {kind!r}")
    clip = read_wav(_existing(args.audio, "audio file"))
    notes = load_notes(_existing(args.notes, "note list"))
    config = PipelineConfig.from_dict({**meta.get("pipeline", {}), **meta.get("labels", {}),
                                       "mask_denominator": args.mask_denominator,
                                       "eps_mask": args.eps_mask})
    analysis = analyze(clip, notes, config)
    request = SeparationRequest(group_notes(notes, args.group_by), args.mask_denominator,
                                args.eps_mask)
    K = analysis.labels.L.shape[0]
    if kind == "autoencoder":
        stems = separate(model, analysis.V, analysis.X, analysis.labels, request).stems
    else:
        if model.H.shape != analysis.labels.L.shape or model.W.shape[0] != analysis.V.shape[0]:
            raise CliError(f"NMF model has W {model.W.shape}, H {model.H.shape} but the input "
                           f"yields V {analysis.V.shape} and K={K}")
        restrictions = {k: v.L for k, v in group_restrictions(analysis.labels, request).items()}
        stems, _ = nmf_separate(model, restrictions, analysis.X, args.eps_mask,
                                args.mask_denominator)
    out = _out_dir(args.out)
    for name, stem in stems.items():
        write_wav(out / f"{name}.wav", stem)
    print(f"wrote {len(stems)} stems to {out}: {', '.join(stems)}")


def cmd_evaluate(args):
    ref_dir, est_dir = _existing(args.ref, "reference directory"), _existing(args.est,
                                                                             "estimate directory")
    mixture = read_wav(_existing(args.mix, "mixture"))
    refs, ests = {}, {}
    for ref_path in sorted(ref_dir.glob("*.wav")):
        if ref_path.stem == "mixture":
            continue
        est_path = est_dir / ref_path.name
        if not est_path.exists():
            raise CliError(f"no estimate for reference {ref_path.name} in {est_dir}")
        refs[ref_path.stem] = read_wav(ref_path)
        ests[ref_path.stem] = read_wav(est_path)
    if not refs:
        raise CliError(f"no reference WAV files in {ref_dir}")
    # WAV round trips may differ by a few samples; score the common prefix
    n = min(c.samples.size for c in [mixture, *refs.values(), *ests.values()])
    sdrs, nsdrs = evaluate_stems({k: v.samples[:n] for k, v in refs.items()},
                                 {k: v.samples[:n] for k, v in ests.items()},
                                 mixture.samples[:n])
    report = EvalReport(args.piece, args.label, sdrs, nsdrs)
    sys.stdout.write(reports_to_table([report]))
    if args.out:
        Path(args.out).write_text(reports_to_csv([report]))


EXPERIMENT_KEYS = {"dataset", "methods", "seed", "group_by", "include_oracle", "pipeline",
                   "synth"}


def load_experiment(path, seed=None):
    """Parse an experiment file; returns ``(pieces, methods, config, synth, oracle)``.

    ``seed``, when given, replaces the file's seed.
    """
    path = _existing(path, "experiment config")
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(spec, dict):
        raise CliError(f"{path}: top level must be an object")
    unknown = set(spec) - EXPERIMENT_KEYS
    if unknown:
        raise CliError(f"{path}: unknown keys {sorted(unknown)}")
    if "dataset" not in spec:
        raise CliError(f"{path}: missing 'dataset'")
    group_by = spec.get("group_by", "tag")
    pieces = []
    for entry in spec["dataset"]:
        if isinstance(entry, str) and entry.startswith("toy:"):
            notes, name = load_toy_piece(int(entry[4:])), f"toy_piece_{entry[4:]}"
        else:
            notes_path = Path(entry)
            if not notes_path.is_absolute():
                notes_path = path.parent / notes_path
            notes = load_notes(_existing(notes_path, "note list"))
            name = notes_path.stem
        pieces.append(Piece(name, notes, group_notes(notes, group_by)))
    seed = spec.get("seed", 0) if seed is None else seed
    config = PipelineConfig.from_dict({**spec.get("pipeline", {}), "seed": seed})
    synth = SynthConfig(**{"timbre_seed": config.sub_seed("synth"), **spec.get("synth", {})})
    methods = tuple(spec.get("methods", ("A", "B", "C", "D")))
    return pieces, methods, config, synth, bool(spec.get("include_oracle", False))


def cmd_experiment(args):
    pieces, methods, config, synth, oracle = load_experiment(args.config, args.seed)
    reports = run_experiment(pieces, methods, config, synth, include_oracle=oracle)
    table = reports_to_table(reports)
    sys.stdout.write(table)
    if args.out:
        out = _out_dir(args.out)
        (out / "report.csv").write_text(reports_to_csv(reports))
        (out / "report.txt").write_text(table)
    if any(r.status != "ok" for r in reports):
        log.warning("some runs failed; see the status column")


# parser ---------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="weaksep",
        description="Score-informed source separation with weakly labelled autoencoders.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed for every random choice (default: 0)")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS/OpenMP threads; 1 gives bit-reproducible results (default: 1)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synthesize", help="render a note list to a mixture and per-group stems")
    p.add_argument("--notes", required=True, help="note list CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--group-by", default="tag", choices=("tag", "instrument", "pitch"))
    _add_synth_flags(p)
    p.set_defaults(func=cmd_synthesize)

    for name, func, hint in (("train", cmd_train, "train an autoencoder (methods B, C, D)"),
                             ("train-nmf", cmd_train_nmf, "train the score-informed NMF "
                                                           "baseline (method A)")):
        p = sub.add_parser(name, help=hint)
        p.add_argument("--audio", required=True, help="mixture WAV")
        p.add_argument("--notes", required=True, help="note list CSV aligned to the audio")
        p.add_argument("--model", required=True, help="output model file")
        if name == "train":
            p.add_argument("--method", required=True, choices=("B", "C", "D"),
                           help="B: plain decoder, C: non-negative decoder, "
                                "D: C with multi-frame input")
        _add_pipeline_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("separate", help="split a mixture into note-group stems")
    p.add_argument("--model", required=True, help="model written by train or train-nmf")
    p.add_argument("--audio", required=True, help="mixture WAV")
    p.add_argument("--notes", required=True, help="note list CSV")
    p.add_argument("--out", required=True, help="output directory for <group>.wav and "
                                                 "residual.wav")
    p.add_argument("--group-by", default="tag", choices=("tag", "instrument", "pitch"))
    _add_pipeline_flags(p, only={"mask_denominator", "eps_mask"})
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="SDR/NSDR of estimated stems against references")
    p.add_argument("--ref", required=True, help="directory of reference <group>.wav files")
    p.add_argument("--est", required=True, help="directory of estimated <group>.wav files")
    p.add_argument("--mix", required=True, help="mixture WAV")
    p.add_argument("--out", help="write the report as CSV")
    p.add_argument("--piece", default="piece", help="piece name in the report")
    p.add_argument("--label", default="est", help="method label in the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run a multi-piece, multi-method comparison")
    p.add_argument("--config", required=True, help="experiment file (JSON)")
    p.add_argument("--out", help="directory for report.csv and report.txt")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except (CliError, OSError, ValueError, KeyError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"weaksep {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
