"""``csi-mtl`` command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data or file-format error,
4 integrity error (mismatched dims or checkpoints), 5 partial report.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import nn
from .channels import PRESETS, generate_dataset, get_profile, load_dataset, load_profile, save_dataset
from .config import load_config
from .errors import ConfigError, DegenerateScaleError, FormatError, IntegrityError
from .experiment import load_report, run_experiment, run_phase, write_report
from .models import (
    DECODER,
    ENCODER,
    Checkpoint,
    CompressionConfig,
    assemble,
    build_model,
    count_params,
    load_checkpoint,
    reduction,
    ue_storage,
)
from .training import evaluate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTEGRITY, EXIT_PARTIAL = 0, 2, 3, 4, 5
EVAL_HEADER = "encoder,decoder,data,scenario,split,nmse_linear,nmse_db"


def _profile(arg: str, args):
    profile = PRESETS.get(arg)
    if profile is None:
        if not Path(arg).is_file():
            raise ConfigError(f"unknown profile {arg!r}: not a preset ({', '.join(PRESETS)}) "
                              "and not a file")
        profile = load_profile(arg)
    return profile.with_dims(args.subcarriers, args.antennas, args.delay_taps).validate()


def cmd_generate_data(args) -> int:
    counts = {"train": args.train, "val": args.val, "test": args.test}
    bad = [f"--{k} {v}" for k, v in counts.items() if v < 1]
    if bad:
        raise ConfigError("split sizes must be >= 1: " + ", ".join(bad))
    profile = _profile(args.profile, args)
    ds = generate_dataset(profile, counts, args.seed)
    out = Path(args.out)
    if out.parent and not out.parent.is_dir():
        raise ConfigError(f"output directory {out.parent} does not exist")
    save_dataset(ds, out)
    total = sum(counts.values())
    print(f"wrote {out}: scenario={ds.scenario} seed={ds.master_seed} "
          f"train={counts['train']} val={counts['val']} test={counts['test']} "
          f"sample={'x'.join(map(str, ds.sample_shape))} bytes={out.stat().st_size}")
    print(f"mean truncation energy ratio {ds.energy_ratio:.6f} over {total} samples; "
          f"normalization scale {ds.scale:.6g}; clamped components {ds.clamped}")
    return EXIT_OK


def _experiment_config(args):
    overrides = list(args.set or [])
    if args.output:
        overrides.append(f"output = {args.output}")
    return load_config(args.config, overrides)


def _print_cells(cells):
    for c in cells:
        print(f"{c.strategy:<12} {c.scenario:<14} CR={c.cr.numerator}/{c.cr.denominator} "
              f"NMSE {c.nmse_db:.2f} dB ({c.seconds:.1f} s, seed {c.seed})")


def _phase_command(phase):
    def run(args) -> int:
        cfg = _experiment_config(args)
        _print_cells(run_phase(cfg, phase, jobs=args.jobs))
        return EXIT_OK
    return run


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    report = run_experiment(cfg, jobs=args.jobs)
    sys.stdout.write(report.text())
    return EXIT_OK if report.complete else EXIT_PARTIAL


def cmd_report(args) -> int:
    directory = Path(args.experiment)
    if not directory.is_dir():
        raise ConfigError(f"experiment directory {directory} does not exist")
    report = load_report(directory)
    txt, csv_path = write_report(report, directory)
    sys.stdout.write(report.text())
    print(f"wrote {txt} and {csv_path}")
    if not report.complete:
        print(f"partial report: {len(report.missing)} cells MISSING", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _part(ck: Checkpoint, part: str) -> Checkpoint:
    names = [n for n in ck.params if ck.partition[n] == part]
    if not names:
        raise IntegrityError(f"checkpoint holds no {part} tensors")
    return Checkpoint(ck.meta, {n: ck.params[n] for n in names},
                      {n: ck.partition[n] for n in names})


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.data)
    split = getattr(ds, args.split)
    if args.decoder == "oracle":
        lin, db = evaluate(None, split, oracle=True)
    else:
        enc = load_checkpoint(args.encoder)
        dec = load_checkpoint(args.decoder)
        cfg = enc.meta.cfg
        if ds.sample_shape != cfg.sample_shape:
            raise IntegrityError(f"dataset {args.data} has samples {ds.sample_shape}, "
                                 f"checkpoint {args.encoder} expects {cfg.sample_shape}")
        model = assemble(cfg, _part(enc, ENCODER), _part(dec, DECODER),
                         architecture=args.architecture)
        lin, db = evaluate(model, split)
    print(f"scenario={ds.scenario} split={args.split} samples={len(split)}")
    print(f"nmse_linear={lin!r}")
    print(f"nmse_db={db:.2f}")
    if args.report:
        path = Path(args.report)
        fresh = not path.exists() or path.stat().st_size == 0
        with open(path, "a", encoding="utf-8") as fh:
            if fresh:
                fh.write(EVAL_HEADER + "\n")
            fh.write(f"{args.encoder},{args.decoder},{args.data},{ds.scenario},{args.split},"
                     f"{lin!r},{db!r}\n")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = CompressionConfig(args.n_delay, args.antennas, args.cr)
    model = build_model(cfg, architecture=args.architecture)
    enc, dec = count_params(model, ENCODER), count_params(model, DECODER)
    single = ue_storage(enc, args.scenarios, "single-task")
    shared = ue_storage(enc, args.scenarios, "shared-encoder")
    saving = reduction(single, shared)
    print(f"input 2x{cfg.n_delay}x{cfg.n_antennas}  N={cfg.input_size}  CR={cfg.cr}  "
          f"M={cfg.codeword_length}")
    print(f"encoder parameters   {enc:>12,}")
    print(f"decoder parameters   {dec:>12,}")
    print(f"total parameters     {enc + dec:>12,}")
    print(f"UE storage, {args.scenarios} scenarios: single-task {single:,}, shared-encoder "
          f"{shared:,}, reduction {saving.numerator}/{saving.denominator} "
          f"({float(saving) * 100:.2f}%)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csi-mtl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="generate one scenario dataset file")
    g.add_argument("--profile", required=True, help="preset name or profile file")
    g.add_argument("--train", type=int, required=True)
    g.add_argument("--val", type=int, required=True)
    g.add_argument("--test", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--subcarriers", type=int, default=None)
    g.add_argument("--antennas", type=int, default=None)
    g.add_argument("--delay-taps", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    for name, phase, text in (("pretrain", "pretrain", "pre-train the general model"),
                              ("finetune", "finetune", "fine-tune one decoder per scenario"),
                              ("train-single", "single", "train single-task baselines"),
                              ("run", None, "run the whole grid and write the report")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--output", default=None, help="experiment directory (overrides config)")
        p.add_argument("--jobs", type=int, default=None,
                       help="parallel grid cells; CSI_MTL_THREADS overrides")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.set_defaults(func=cmd_run if phase is None else _phase_command(phase))

    e = sub.add_parser("evaluate", help="NMSE of an encoder/decoder pair on a dataset")
    e.add_argument("--encoder", required=False)
    e.add_argument("--decoder", required=True, help="checkpoint, or 'oracle' (debug: Ĥ = H)")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--architecture", default="csinet")
    e.add_argument("--report", default=None, help="CSV file to append the result to")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="write text and CSV reports for an experiment")
    r.add_argument("--experiment", required=True)
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("params", help="parameter counts and UE storage")
    c.add_argument("--n-delay", type=int, default=32)
    c.add_argument("--antennas", type=int, default=32)
    c.add_argument("--cr", default="1/4")
    c.add_argument("--scenarios", type=int, default=2)
    c.add_argument("--architecture", default="csinet")
    c.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "evaluate" and args.decoder != "oracle" and not args.encoder:
        parser.error("--encoder is required unless --decoder oracle")
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except nn.ShapeError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DegenerateScaleError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
