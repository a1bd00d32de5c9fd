"""Command-line entry point: ``wavesep <subcommand>``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import bss_eval, dataset, plotting
from .checkpoint import load_checkpoint, save_checkpoint
from .config import help_text, load_run_config
from .errors import ConfigError, DatasetError, WavesepError
from .fileio import atomic_write
from .model import (ModelConfig, Model, complete_sources, parameter_count, receptive_field,
                    receptive_field_ms, separate_track)
from .training import train

log = logging.getLogger("wavesep")

TABLE1_ROWS = [(1, 512), (2, 256), (3, 128), (4, 64), (5, 32)]


# ---------------------------------------------------------------------------
# inspect


def describe(config: ModelConfig):
    rf = receptive_field(config)
    ms = receptive_field_ms(config)
    return {
        "stacks": config.stacks,
        "layers": config.stacks * config.dilation_depth,
        "filters": config.filters,
        "params": parameter_count(config),
        "receptive_field_samples": rf,
        "receptive_field_ms": ms,
        "receptive_field_ms_rounded": int(round(ms)),
        "target_field_samples": config.target_field,
        "target_field_ms": 1000.0 * config.target_field / config.sample_rate,
        "input_field_samples": config.input_field,
    }


def format_table(rows):
    lines = [f"{'N stacks / layers':<18} {'k':>5} {'# params':>22} {'receptive field':>26} {'target field':>22}"]
    for r in rows:
        params = f"{r['params']:,} ({r['params'] / 1e6:.2f}M)"
        rf = f"{r['receptive_field_samples']} samples / {r['receptive_field_ms_rounded']} ms"
        tf = f"{r['target_field_samples']} samples / {r['target_field_ms']:.0f} ms"
        lines.append(f"{str(r['stacks']) + ' / ' + str(r['layers']):<18} {r['filters']:>5} "
                     f"{params:>22} {rf:>26} {tf:>22}")
    return "\n".join(lines)


def table1_configs():
    return [ModelConfig(stacks=n, filters=k, dilation_depth=10, target_field=1600, num_outputs=3,
                        sample_rate=16000, post_filters=(2048, 256)) for n, k in TABLE1_ROWS]


def cmd_inspect(args, cfg):
    configs = table1_configs() if args.table1 else [cfg.model_config()]
    rows = [describe(c) for c in configs]
    print(format_table(rows))
    if args.json:
        text = json.dumps(rows if args.table1 else rows[0], indent=2)
        if args.json == "-":
            print(text)
        else:
            with atomic_write(args.json, "w") as fh:
                fh.write(text)
    return 0


# ---------------------------------------------------------------------------
# mix


def cmd_mix(args, cfg):
    root = Path(args.dataset or cfg["dataset"] or ".")
    sr = cfg["sample_rate"]
    for name in dataset.list_tracks(root):
        d = root / name
        present = {p.stem for p in d.glob("*.wav")} - {"mixture"}
        stems = dataset.detect_layout(present)
        if stems is None:
            raise DatasetError(f"track {name!r}: no complete stem set in {sorted(present)}")
        sources = {}
        for s in stems:
            wav, rate = dataset.read_wav(d / f"{s}.wav")
            if rate != sr:
                raise DatasetError(f"track {name!r}: {s}.wav is {rate} Hz; resample externally to "
                                   f"{sr / 1000:g} kHz")
            sources[s] = wav
        lengths = {s: len(w) for s, w in sources.items()}
        if len(set(lengths.values())) > 1:
            raise DatasetError(f"track {name!r}: stems differ in length {lengths}")
        dataset.write_wav(d / "mixture.wav", dataset.synthesize_mixture(sources), sr)
        print(f"{name}: mixture.wav ({len(next(iter(sources.values())))} samples)")
    return 0


# ---------------------------------------------------------------------------
# train


def write_history_csv(path, history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss"])
    for i, (tr, va) in enumerate(history):
        w.writerow([i, repr(float(tr)), repr(float(va))])
    with atomic_write(path, "w") as fh:
        fh.write(buf.getvalue())


def cmd_train(args, cfg):
    root = args.dataset or cfg["dataset"]
    if not root:
        raise ConfigError("train needs a dataset (config key 'dataset' or --dataset)")
    manifest = dataset.load_manifest(cfg["manifest"] or root)
    mcfg = cfg.model_config()
    stems = dataset.SINGING_VOICE_STEMS if mcfg.num_outputs == 1 else dataset.MULTI_INSTRUMENT_STEMS
    train_tracks = dataset.load_stem_directory(root, stems, mcfg.sample_rate, manifest["train"])
    val_tracks = dataset.load_stem_directory(root, stems, mcfg.sample_rate, manifest["validation"])
    out = Path(args.output or cfg["output_dir"])
    model = Model.init(mcfg, seed=cfg["init_seed"])

    def on_epoch(epoch, losses):
        print(f"epoch {epoch}: train {losses[0]:.6g}  val {losses[1]:.6g}", flush=True)

    result = train(model, train_tracks, val_tracks, cfg.train_config(), cfg.loss_config(),
                   cfg.sampler_config(), on_epoch=on_epoch)
    save_checkpoint(out / "best.wssm", result.best)
    write_history_csv(out / "history.csv", result.history)
    plotting.plot_loss_history(result.history, out / "history.png", result.best_epoch)
    print(f"best epoch {result.best_epoch}; wrote {out / 'best.wssm'}")
    return 0


# ---------------------------------------------------------------------------
# separate


def cmd_separate(args, cfg):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    mixture, rate = dataset.read_wav(args.input)
    if rate != model.config.sample_rate:
        raise ConfigError(f"{args.input} is {rate} Hz, model expects {model.config.sample_rate} Hz; "
                          "resample externally")
    est = complete_sources(mixture, separate_track(model, mixture, rate), model.config.residual_source)
    out = Path(args.output)
    for name in est:
        dataset.write_wav(out / f"{name}.wav", est[name], rate)
        print(f"{out / (name + '.wav')}: {len(est[name])} samples")
    return 0


# ---------------------------------------------------------------------------
# evaluate / report


def _load_source_dir(root, sample_rate=None):
    tracks = {}
    for name in dataset.list_tracks(root):
        d = Path(root) / name
        srcs = {}
        for p in sorted(d.glob("*.wav")):
            if p.stem == "mixture":
                continue
            wav, rate = dataset.read_wav(p)
            if sample_rate is not None and rate != sample_rate:
                raise DatasetError(f"{p}: {rate} Hz, expected {sample_rate} Hz")
            srcs[p.stem] = wav
        if srcs:
            tracks[name] = srcs
    return tracks


def cmd_evaluate(args, cfg):
    refs = _load_source_dir(args.references)
    ests = _load_source_dir(args.estimates)
    if not refs:
        raise DatasetError(f"no reference tracks under {args.references}")
    length = args.filter_length or cfg["filter_length"]
    report = bss_eval.evaluate_dataset(ests, refs, length, name=args.name)
    out = Path(args.output)
    report.save(out / "report.json", out / "report.csv")
    plotting.plot_median_scores([report], out / "report.png")
    print(bss_eval.reports_to_csv([report]), end="")
    return 0


def cmd_report(args, cfg):
    reports = [bss_eval.EvalReport.load(p) for p in args.reports]
    text = bss_eval.reports_to_csv(reports)
    with atomic_write(args.output, "w") as fh:
        fh.write(text)
    figure = args.figure or os.path.splitext(args.output)[0] + ".png"
    plotting.plot_median_scores(reports, figure)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="key = value configuration file")
    common.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key (repeatable)")
    common.add_argument("--threads", type=int, default=None,
                        help="cap numeric library threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="wavesep", description="Waveform-domain music source separation with a non-causal Wavenet.",
        epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", parents=[common], help="architecture sizes (receptive field, params)",
                       epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--table1", action="store_true", help="the five reference configurations (N=1..5)")
    p.add_argument("--json", metavar="PATH", help="also write JSON ('-' for stdout)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("mix", parents=[common], help="write mixture.wav = sum of stems for every track")
    p.add_argument("--dataset", help="stem directory root")
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", parents=[common], help="train a model from a dataset manifest",
                       epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--dataset", help="stem directory root containing dataset.json")
    p.add_argument("--output", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", parents=[common], help="separate one mixture WAV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="mixture WAV at the model sample rate")
    p.add_argument("--output", required=True, help="directory for one WAV per source")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", parents=[common], help="BSS Eval report for a directory of estimates")
    p.add_argument("--estimates", required=True, help="<dir>/<track>/<source>.wav")
    p.add_argument("--references", required=True, help="<dir>/<track>/<source>.wav")
    p.add_argument("--filter-length", type=int, default=None, help="distortion filter taps L")
    p.add_argument("--name", default="model", help="row label in the CSV")
    p.add_argument("--output", required=True, help="directory for report.json / report.csv / report.png")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="merge JSON reports into one comparison CSV")
    p.add_argument("reports", nargs="+")
    p.add_argument("--output", required=True, help="CSV path")
    p.add_argument("--figure", help="PNG path (default: next to the CSV)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.set)
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=max(1, args.threads)):
                return args.func(args, cfg)
        return args.func(args, cfg)
    except WavesepError as exc:
        print(f"wavesep {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"wavesep {args.command}: error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
