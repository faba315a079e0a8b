"""Command-line entry point: ``ivector-nda <subcommand> [--section.key value ...]``.

Every pipeline subcommand runs one stage (``run`` runs several). Config keys
can come from ``--config FILE`` and be overridden by flags of the same name.
On failure a single line ``error: <Kind>: <message>`` goes to stderr and the
exit status is 1 (2 for usage errors).
"""

import argparse
import json
import logging
from pathlib import Path
import sys

import numpy as np

from . import io
from .compare import compare_projections, format_report, split_by_speaker
from .discriminant import LabeledVectors
from .pipeline import STAGES, PathsConfig, build_config, config_keys, format_config, parse_config_text, run_pipeline
from .synth import SynthSpec, gen_synthetic, make_audio_corpus

STAGE_COMMANDS = {
    "features": "features",
    "train-ubm": "ubm",
    "stats": "stats",
    "train-tv": "tv",
    "extract": "ivectors",
    "train-projection": "projection",
    "whiten": "whiten",
    "train-plda": "plda",
    "score": "score",
    "evaluate": "evaluate",
}


def _add_config_flags(p):
    p.add_argument("--config", help="flat 'section.key = value' config file")
    group = p.add_argument_group("config keys")
    for key, (_, default) in config_keys().items():
        group.add_argument(f"--{key}", dest=key, default=None, metavar="V", help=f"default: {default}")


def _config_values(args):
    values = parse_config_text(Path(args.config).read_text(), args.config) if args.config else {}
    for key in config_keys():
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return values


def _config_from_args(args):
    return build_config(_config_values(args))


def _print_results(results):
    print(json.dumps(results, sort_keys=True))


def _cmd_stage(args):
    cfg = _config_from_args(args)
    results = run_pipeline(cfg, [STAGE_COMMANDS[args.command]])
    if results is not None:
        _print_results(results)


def _cmd_run(args):
    cfg = _config_from_args(args)
    stages = args.stages.split(",") if args.stages else STAGES
    results = run_pipeline(cfg, stages)
    if results is not None:
        _print_results(results)


def _cmd_config(args):
    sys.stdout.write(format_config(_config_from_args(args)))


def _synth_spec(args):
    return SynthSpec(
        num_speakers=args.num_speakers,
        sessions_per_speaker=args.sessions_per_speaker,
        dim=args.dim,
        channel_modes=args.channel_modes,
        speaker_spread=args.speaker_spread,
        channel_spread=args.channel_spread,
        noise_spread=args.noise_spread,
        seed=args.seed,
        mode_rank=args.mode_rank,
    )


def _cmd_synth(args):
    out = Path(args.out)
    if args.kind == "audio":
        u2s = make_audio_corpus(
            out, args.num_speakers, args.sessions_per_speaker, args.sample_rate, args.duration, args.seed
        )
        print(f"wrote {len(u2s)} recordings to {out}")
        return
    data = gen_synthetic(_synth_spec(args))
    out.mkdir(parents=True, exist_ok=True)
    utts = _synth_utt_ids(data.labels)
    io.write_ivectors(out / "ivectors.fmat", utts, data.X)
    io.write_utt2spk(out / "utt2spk", dict(zip(utts, data.labels)))
    print(f"wrote {len(utts)} vectors to {out}")


def _synth_utt_ids(labels):
    counts = {}
    ids = []
    for spk in labels:
        j = counts.get(spk, 0)
        counts[spk] = j + 1
        ids.append(f"{spk}-s{j:02d}")
    return ids


def _cmd_compare(args):
    values = _config_values(args)
    if args.synth:
        data = gen_synthetic(_synth_spec(args))
    else:
        defaults = PathsConfig()
        work = Path(values.get("paths.work_dir", defaults.work_dir))
        iv = Path(args.ivectors) if args.ivectors else work / "ivectors.fmat"
        u2s_path = Path(args.utt2spk) if args.utt2spk else Path(values.get("paths.data_dir", defaults.data_dir)) / "utt2spk"
        ids, X = io.read_ivectors(iv)
        u2s = io.read_utt2spk(u2s_path)
        missing = [u for u in ids if u not in u2s]
        if missing:
            raise ValueError(f"{u2s_path}: no speaker for {missing[0]}")
        data = LabeledVectors(X, np.array([u2s[u] for u in ids]))
    # the input vectors play the role of i-vectors, so their dim bounds projection.dim
    values.setdefault("tv.rank", data.X.shape[1])
    cfg = build_config(values)
    train, test = split_by_speaker(data, cfg.split.train_fraction)
    report = compare_projections(
        train, test, cfg.projection.dim, cfg.projection.nda_config(), cfg.plda.iters, cfg.plda.seed
    )
    print(format_report(report))
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")


def _add_synth_flags(p):
    d = SynthSpec()
    p.add_argument("--num-speakers", type=int, default=None)
    p.add_argument("--sessions-per-speaker", type=int, default=None)
    p.add_argument("--dim", type=int, default=d.dim)
    p.add_argument("--channel-modes", type=int, default=d.channel_modes)
    p.add_argument("--speaker-spread", type=float, default=d.speaker_spread)
    p.add_argument("--channel-spread", type=float, default=d.channel_spread)
    p.add_argument("--noise-spread", type=float, default=d.noise_spread)
    p.add_argument("--mode-rank", type=int, default=d.mode_rank)
    p.add_argument("--seed", type=int, default=d.seed)


def build_parser():
    parser = argparse.ArgumentParser(prog="ivector-nda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, stage in STAGE_COMMANDS.items():
        p = sub.add_parser(name, help=f"run the '{stage}' stage")
        _add_config_flags(p)
        if name == "train-projection":
            p.add_argument("--method", dest="projection.method", choices=("lda", "nda"), default=None)
        p.set_defaults(func=_cmd_stage)

    p = sub.add_parser("run", help="run several stages in order")
    _add_config_flags(p)
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("config", help="print the resolved config with all defaults")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_config)

    p = sub.add_parser("synth", help="write a synthetic audio corpus or i-vector set")
    p.add_argument("kind", choices=("audio", "ivectors"))
    p.add_argument("--out", required=True)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--duration", type=float, default=1.5)
    _add_synth_flags(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("compare", help="LDA vs NDA on identical inputs")
    _add_config_flags(p)
    p.add_argument("--ivectors", help="i-vector FMAT (default: <work_dir>/ivectors.fmat)")
    p.add_argument("--utt2spk", help="speaker map (default: <data_dir>/utt2spk)")
    p.add_argument("--synth", action="store_true", help="use the synthetic multimodal benchmark")
    p.add_argument("--json", help="also write the report as JSON")
    _add_synth_flags(p)
    p.set_defaults(func=_cmd_compare)
    return parser


def _fill_synth_defaults(args):
    if not hasattr(args, "num_speakers"):
        return
    audio = getattr(args, "kind", None) == "audio"
    if args.num_speakers is None:
        args.num_speakers = 10 if audio else SynthSpec.num_speakers
    if args.sessions_per_speaker is None:
        args.sessions_per_speaker = 8 if audio else SynthSpec.sessions_per_speaker


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    _fill_synth_defaults(args)
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001 - reported as one line
        msg = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
