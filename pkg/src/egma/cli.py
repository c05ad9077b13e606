"""Command-line entry point: ``egma <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data/validation
error, 3 numeric failure (non-finite loss or failed gradient check).
"""
import argparse
import logging
import sys
from pathlib import Path

from .encoders import load_checkpoint
from .errors import ConfigError, DataError, DimensionMismatch, NumericError
from .evaluator import EvalResult, PromptBank, evaluate_retrieval, evaluate_zero_shot
from .gradcheck import COMPONENTS, run_suite
from .heatmap import (
    DEFAULT_SIGMA_FRAC,
    PatchGrid,
    render_heatmap,
    sentence_heatmaps,
    session_gaze_matrices,
    write_gaze_csv,
    write_pgm,
)
from .session import fixations_in_interval, parse_session, read_fixations, read_manifest
from .synthetic import generate_planted_dataset, read_dataset, read_prompt_bank, write_dataset
from .trainer import TrainConfig, read_config, run_training

log = logging.getLogger("egma")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _grid(text):
    try:
        return PatchGrid.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _dims(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    return h, w


def cmd_preprocess(args):
    """Per-session GS/GL CSVs plus one PGM heatmap per sentence."""
    out = Path(args.out)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    for entry in read_manifest(args.manifest):
        session = entry.load()
        dims = (entry.height, entry.width)
        heatmaps = sentence_heatmaps(session, dims, args.sigma_frac)
        gaze = session_gaze_matrices(session, args.grid, args.sigma_frac, dims)
        write_gaze_csv(out / f"{entry.session_id}_gaze.csv", gaze)
        for j, h in enumerate(heatmaps):
            write_pgm(out / "heatmaps" / f"{entry.session_id}_s{j}.pgm", h)
        print(f"{entry.session_id}: {len(heatmaps)} sentences, {int(gaze.gl.sum())} gazed cells")
    return EXIT_OK


def cmd_render_heatmap(args):
    dims = args.size
    if args.transcript:
        session = parse_session(args.fixations, args.transcript, (dims[1], dims[0]))
        if not 0 <= args.sentence < len(session.sentences):
            raise DataError(f"sentence {args.sentence} out of range (0..{len(session.sentences) - 1})")
        fixations = fixations_in_interval(session, session.sentences[args.sentence])
    else:
        fixations = read_fixations(args.fixations)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, render_heatmap(fixations, dims, args.sigma_frac))
    print(f"wrote {out} from {len(fixations)} fixations")
    return EXIT_OK


def cmd_gen_synthetic(args):
    ds = generate_planted_dataset(args.num_samples, args.grid, args.classes, args.seed,
                                  holdout=args.holdout, sigma_frac=args.sigma_frac)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.samples)} samples ({args.holdout} held out) to {args.out}")
    return EXIT_OK


def _train_config(args):
    cfg = read_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.grid is not None:
        overrides["grid"] = str(args.grid)
    return TrainConfig(**{**cfg.__dict__, **overrides}) if overrides else cfg


def cmd_train(args):
    cfg = _train_config(args)
    ds = read_dataset(args.data, cfg.patch_grid, args.sigma_frac)
    train = ds.split("train")
    state, rows = run_training(cfg, train, len(ds.vocab), args.out, args.workers)
    last = rows[-1] if rows else None
    print(f"trained {state.step} steps on {len(train)} samples; "
          f"final total={last[9] if last else 'n/a'} tau={state.tau:.6f}")
    return EXIT_OK


def cmd_eval(args):
    params = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data, args.grid)
    if (params.grid_rows, params.grid_cols) != (ds.grid.rows, ds.grid.cols):
        raise DimensionMismatch(f"checkpoint grid {params.grid_rows}x{params.grid_cols} "
                                f"does not match data grid {ds.grid}")
    samples = ds.samples if args.split == "all" else ds.split(args.split)
    if not samples:
        raise DataError(f"no samples in split {args.split!r}")
    if args.task == "zeroshot":
        bank_dict = read_prompt_bank(args.bank) if args.bank else ds.prompts
        bank = PromptBank.from_dict(bank_dict, ds.class_names)
        _, result, _ = evaluate_zero_shot(samples, params, ds.grid, bank, ds.vocab, args.policy)
    else:
        result = EvalResult(p_at_k=evaluate_retrieval(samples, params, ds.grid, args.direction))
    for name, value in result.rows():
        print(f"{name}: {value:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result.write_csv(out / f"eval_{args.task}.csv")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    reports = run_suite(seed=args.seed, trials=args.trials, corrupt=args.corrupt)
    failed = []
    for name, r in reports.items():
        status = "ok" if r.passed else "FAIL"
        print(f"{name:<11} max_rel_err={r.max_rel_err:.3e} at {r.worst_coordinate} {status}")
        if not r.passed:
            failed.append(name)
    worst = max(reports, key=lambda k: reports[k].max_rel_err)
    print(f"worst offender: {worst} ({reports[worst].max_rel_err:.3e})")
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--workers", type=int, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("--grid", type=_grid, default=None, help="patch grid RxC, e.g. 7x7")
    common.add_argument("--config", help="flat key = value training config")
    common.add_argument("--out", help="output directory (or file for render-heatmap)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="egma", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", parents=[common], help="gaze sessions -> GS/GL CSVs and heatmaps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma-frac", type=float, default=DEFAULT_SIGMA_FRAC)
    p.set_defaults(func=cmd_preprocess, need_out=True)

    p = sub.add_parser("render-heatmap", parents=[common], help="fixation CSV -> PGM heatmap")
    p.add_argument("--fixations", required=True)
    p.add_argument("--transcript", help="restrict to one sentence of this transcript")
    p.add_argument("--sentence", type=int, default=0)
    p.add_argument("--size", type=_dims, default=(224, 224), help="HxW")
    p.add_argument("--sigma-frac", type=float, default=DEFAULT_SIGMA_FRAC)
    p.set_defaults(func=cmd_render_heatmap, need_out=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a planted-correspondence dataset")
    p.add_argument("--num-samples", type=int, default=264)
    p.add_argument("--holdout", type=int, default=64)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--sigma-frac", type=float, default=DEFAULT_SIGMA_FRAC)
    p.set_defaults(func=cmd_gen_synthetic, need_out=True)

    p = sub.add_parser("train", parents=[common], help="train encoders on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--sigma-frac", type=float, default=DEFAULT_SIGMA_FRAC)
    p.set_defaults(func=cmd_train, need_out=True)

    p = sub.add_parser("eval", parents=[common], help="zero-shot classification or retrieval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bank", help="prompt bank (class<TAB>prompt); defaults to the dataset's")
    p.add_argument("--task", choices=("zeroshot", "retrieval"), default="zeroshot")
    p.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    p.add_argument("--direction", choices=("t2i", "i2t"), default="t2i")
    p.add_argument("--policy", choices=("mean_similarity", "mean_embedding"), default="mean_similarity")
    p.set_defaults(func=cmd_eval, need_out=False)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--corrupt", choices=COMPONENTS, help=argparse.SUPPRESS)  # test hook
    p.set_defaults(func=cmd_gradcheck, need_out=False)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.need_out and not args.out:
            raise UsageError(f"egma {args.command}: --out is required")
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        if args.grid is None and args.command in ("preprocess", "gen-synthetic"):
            args.grid = PatchGrid()
        if args.seed is None and args.command in ("gen-synthetic", "gradcheck"):
            args.seed = 0
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        dump = getattr(exc, "dump", None)
        if dump:
            print(f"state: {dump}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
