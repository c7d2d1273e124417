"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 pipeline failure.
Logs go to stderr as ``key=value`` records; the level comes from the
``HEADSEG_LOG_LEVEL`` environment variable (default WARNING).
"""
from __future__ import annotations

import argparse
import difflib
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path


from . import __version__, io

log = logging.getLogger("headseg")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_PIPELINE = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _vocabulary(parser) -> list:
    words = []
    for action in parser._actions:
        words += list(action.option_strings)
        if isinstance(action, argparse._SubParsersAction):
            for name, subparser in action.choices.items():
                words.append(name)
                words += _vocabulary(subparser)
    return words


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that suggests close matches for unknown words."""

    def error(self, message):
        words = _vocabulary(self)
        hint = ""
        bad = None
        if "invalid choice:" in message:
            bad = message.split("invalid choice:")[1].split("'")[1]
        elif "unrecognized arguments:" in message:
            bad = message.split("unrecognized arguments:")[1].split()[0].split("=")[0]
        if bad:
            close = difflib.get_close_matches(bad, words, n=1)
            if close:
                hint = f" (did you mean {close[0]}?)"
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}{hint}\n")


def _setup_logging() -> None:
    level = os.environ.get("HEADSEG_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="level=%(levelname)s logger=%(name)s %(message)s", force=True)


def _cmd_phantom(args) -> int:
    from .phantom import generate_cohort

    cohort = generate_cohort(args.count, args.seed, args.out, args.grid, args.noise, args.bias)
    print(f"wrote {len(cohort.entries)} phantoms; manifest {cohort.manifest}")
    return EXIT_OK


def _cmd_preprocess(args) -> int:
    from .preprocess import PreprocessConfig, preprocess_pair

    t1, t2 = io.read_nifti(args.t1), io.read_nifti(args.t2)
    if args.labels:
        labels = io.read_nifti(args.labels)
    else:
        labels = None
    cfg = PreprocessConfig(edge=args.grid, spacing=args.spacing, bias=args.bias, bias_order=args.bias_order)
    n1, n2, mask, lab, reports = preprocess_pair(t1, t2, cfg, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_nifti(n1, out / "t1.nii.gz")
    io.write_nifti(n2, out / "t2.nii.gz")
    if lab is not None:
        io.write_nifti(lab, out / "labels.nii.gz")
    (out / "report.txt").write_text("".join(r.to_text() for r in reports), encoding="utf-8")
    print(f"wrote {out}/t1.nii.gz {out}/t2.nii.gz (mask {int(mask.sum())} voxels)")
    return EXIT_OK


def _rule_config(path):
    from .ruleseg import RuleConfig

    if not path:
        return RuleConfig()
    return RuleConfig.from_text(Path(path).read_text(encoding="utf-8"))


def _cmd_ruleseg(args) -> int:
    from .ruleseg import run_ruleseg

    cfg = _rule_config(args.config)
    if args.cleanup:
        cfg = replace(cfg, cleanup=True)
    t1, t2 = io.read_nifti(args.t1), io.read_nifti(args.t2)
    lab, rep = run_ruleseg(t1, t2, cfg)
    io.write_nifti(lab, args.out)
    if args.report:
        Path(args.report).write_text(rep.to_text(), encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .forknet import NetworkConfig, NetworkModel, tissue_groups, train
    from .pipeline import write_history

    groups = tissue_groups(args.group_size)
    if not 0 <= args.group < len(groups):
        raise UsageError(f"--group must be in [0, {len(groups) - 1}]")
    entries = io.read_manifest(args.manifest)
    subjects = []
    for e in entries:
        if e.labels is None:
            raise UsageError(f"manifest row {e.id} has no labels")
        t1, t2, lab = io.read_nifti(e.t1), io.read_nifti(e.t2), io.read_nifti(e.labels)
        if t1.dims != (args.grid,) * 3:
            raise UsageError(f"{e.t1} is {t1.dims}, expected a preprocessed {args.grid}^3 grid")
        subjects.append((t1.data, t2.data, lab.labels))
    widths = tuple(int(w) for w in args.widths.split(","))
    cfg = NetworkConfig(slice_edge=args.grid, levels=len(widths), widths=widths, tracks=groups[args.group],
                        axis=args.axis, seed=args.seed)
    model, hist = train(NetworkModel.init(cfg), subjects, args.epochs, args.batch, args.seed, lr=args.lr)
    io.save_model(model, args.out)
    hist_path = args.history or str(Path(args.out).with_suffix(".loss.csv"))
    write_history(hist, args.epochs, hist_path)
    print(f"wrote {args.out} and {hist_path}")
    return EXIT_OK


def _cmd_segment(args) -> int:
    from .fuse import FusionConfig, build_head_model, read_weights
    from .pipeline import load_models

    t1, t2 = io.read_nifti(args.t1), io.read_nifti(args.t2)
    models = load_models(args.models)
    weights = read_weights(args.weights) if args.weights else None
    cfg = FusionConfig(method=args.fusion, tau=args.tau, connectivity=args.connectivity, cleanup=args.cleanup)
    head, qc, _ = build_head_model(t1, t2, models, cfg, weights)
    io.write_nifti(head, args.out)
    if args.qc:
        Path(args.qc).write_text(qc.to_text(), encoding="utf-8")
    print(f"wrote {args.out} (tie fraction {qc.tie_fraction:.4f})")
    return EXIT_OK


def _find_model(directory: Path, sid: str) -> Path:
    for name in (f"{sid}_model.nii.gz", f"{sid}_model.nii", f"{sid}.nii.gz", f"{sid}.nii"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no head model for subject {sid} in {directory}")


def _cmd_stats(args) -> int:
    from . import morpho

    entries = io.read_manifest(args.manifest, check_files=False)
    mdir = Path(args.models)
    records = []
    for e in entries:
        model = io.read_nifti(_find_model(mdir, e.id))
        records.append(morpho.subject_record(model, e.id, e.age, e.sex, e.height_m, e.weight_kg))
    io.write_stats_csv(records, args.out)
    out = Path(args.out)
    lines = ["x,y,group,slope,intercept,r_squared,n"]
    for y in ("brain_gm_ml", "brain_wm_ml", "csf_ml", "tiv_l"):
        for x in ("age", "bmi"):
            for g in ("all", "F", "M"):
                try:
                    r = morpho.regress(records, x, y, g)
                except ValueError as exc:
                    log.warning("regression x=%s y=%s group=%s skipped=%s", x, y, g, str(exc).replace(" ", "_"))
                    continue
                lines.append(f"{x},{y},{g},{r.slope!r},{r.intercept!r},{r.r_squared!r},{r.n}")
    out.with_name(out.stem + "_regression.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.icrp:
        summ = morpho.cohort_summary(records, quantity="g")
        out.with_name(out.stem + "_icrp.csv").write_text(morpho.format_icrp(morpho.icrp_report(summ)),
                                                         encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_demo(args) -> int:
    from .pipeline import PipelineConfig, load_config, run_demo

    cfg = load_config(args.config) if args.config else PipelineConfig()
    over = {k: v for k, v in (("grid", args.grid), ("seed", args.seed), ("out_dir", args.out),
                              ("fusion", args.fusion), ("epochs", args.epochs)) if v is not None}
    cfg = replace(cfg, **over)
    t0 = time.perf_counter()
    rep = run_demo(cfg, progress=lambda msg: print(msg, flush=True))
    print(rep.dice_table(), end="")
    print("tie_fraction " + " ".join(f"{f:.4f}" for f in rep.tie_fractions))
    print(f"stats CSV: {rep.stats_csv}")
    print(f"elapsed {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="headseg", description="Head tissue segmentation pipeline on T1/T2 volumes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("phantom", help="generate a synthetic phantom cohort")
    s.add_argument("--count", type=int, default=6)
    s.add_argument("--grid", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.02)
    s.add_argument("--bias", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_phantom)

    s = sub.add_parser("preprocess", help="mask, bias-correct, normalize and regrid a T1/T2 pair")
    s.add_argument("--t1", required=True)
    s.add_argument("--t2", required=True)
    s.add_argument("--labels", help="optional label volume carried onto the same grid")
    s.add_argument("--out", required=True)
    s.add_argument("--bias", choices=("poly", "none"), default="poly")
    s.add_argument("--bias-order", type=int, default=2)
    s.add_argument("--grid", type=int, default=64)
    s.add_argument("--spacing", type=float, default=1.0)
    s.set_defaults(func=_cmd_preprocess)

    s = sub.add_parser("ruleseg", help="rule-based 15-tissue segmentation")
    s.add_argument("--t1", required=True)
    s.add_argument("--t2", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--cleanup", action="store_true")
    s.set_defaults(func=_cmd_ruleseg)

    s = sub.add_parser("train", help="train one axis/tissue-group network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--axis", choices=("axial", "sagittal", "coronal"), default="axial")
    s.add_argument("--group", type=int, default=0)
    s.add_argument("--group-size", type=int, default=4)
    s.add_argument("--grid", type=int, default=64)
    s.add_argument("--widths", default="8,16,32")
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--history")
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("segment", help="segment a pair with trained models and fuse the axes")
    s.add_argument("--t1", required=True)
    s.add_argument("--t2", required=True)
    s.add_argument("--models", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fusion", choices=("majority", "weighted"), default="majority")
    s.add_argument("--weights")
    s.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    s.add_argument("--cleanup", action="store_true")
    s.add_argument("--qc")
    s.set_defaults(func=_cmd_segment)

    s = sub.add_parser("stats", help="tissue volumes, masses and regressions for a set of head models")
    s.add_argument("--models", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--icrp", action="store_true")
    s.set_defaults(func=_cmd_stats)

    s = sub.add_parser("demo", help="run the full pipeline on a small phantom cohort")
    s.add_argument("--grid", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--fusion", choices=("majority", "weighted"))
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=_cmd_demo)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    from .config import ConfigError
    from .pipeline import StageError

    try:
        return args.func(args)
    except UsageError as e:
        print(f"headseg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"headseg: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as e:
        log.error("stage=%s error=%r", e.stage, str(e.cause))
        print(f"headseg: {e}", file=sys.stderr)
        return EXIT_PIPELINE
    except (OSError, io.NiftiError, io.ModelFormatError) as e:
        log.error("stage=%s io_error=%r", args.command, str(e))
        print(f"headseg: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # any other stage failure
        log.error("stage=%s error=%r", args.command, str(e))
        print(f"headseg: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
