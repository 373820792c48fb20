"""``mtspine`` command line: synth, train, eval, gradcheck."""
import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, config, datagen, evalkit, training
from .autodiff import gradcheck
from .objectives import SplError

SEED_ENV = "MTSPINE_SEED"


class CliError(Exception):
    pass


def _default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _format_grid(grid):
    cols = [p.name.lower() for p in datagen.PosterolateralInvolvement]
    lines = ["class".ljust(10) + "".join(c.rjust(12) for c in cols) + "total".rjust(8)]
    for bq, row in zip(datagen.BoneQuality, grid):
        lines.append(bq.name.lower().ljust(10) + "".join(str(v).rjust(12) for v in row)
                     + str(int(row.sum())).rjust(8))
    return "\n".join(lines)


def cmd_synth(args):
    cfg = config.load(args.config)
    spec = cfg.phantom_spec(args.seed)
    samples = datagen.generate_phantoms(spec)
    if cfg["data.balance_cap"] > 0:
        samples = datagen.balance_subsample(samples, cfg["data.balance_cap"], args.seed)
    try:
        datagen.write_dataset(args.out, samples)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {args.out}: {exc}") from None
    print(f"wrote {len(samples)} slices to {args.out}")
    print(_format_grid(datagen.class_counts(samples)))
    return 0


def _load_data(path, hu_threshold, crop_size):
    samples = datagen.read_dataset(path)
    if not samples:
        raise CliError(f"{path}: dataset is empty")
    return samples, datagen.prepare_inputs(samples, hu_threshold, crop_size)


def cmd_train(args):
    if args.resume:
        ckpt = checkpoint.load(args.resume)
        train_cfg, model_cfg, data_cfg = ckpt.train_config, ckpt.model_config, ckpt.data_config
        net, state = ckpt.network(), ckpt.train_state()
    else:
        cfg = config.load(args.config)
        train_cfg, model_cfg, data_cfg = cfg.train_config(args.seed), cfg.model_config(), cfg.data_dict()
        data_cfg["vote_threshold"] = cfg["eval.vote_threshold"]
        net, state = None, None
    if args.epochs is not None:
        updated = train_cfg.to_dict()
        updated["epochs"] = args.epochs
        if args.epochs and train_cfg.warmup_epochs >= args.epochs:
            raise CliError(f"--epochs {args.epochs} must exceed train.warmup_epochs "
                           f"({train_cfg.warmup_epochs})")
        train_cfg = training.TrainConfig.from_dict(updated)

    samples, inputs = _load_data(args.data, data_cfg["hu_threshold"], tuple(data_cfg["crop_size"]))
    bq = np.array([s.bq_label for s in samples])
    pi = np.array([s.pi_label for s in samples])
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")

    def report(_net, st):
        r = st.log.records[-1]
        print(f"epoch {r.epoch:3d}  lr {r.lr:.6f}  loss {r.mean_selected_loss:.4f}  "
              f"selected {r.selected_fraction:.2f}  acc {r.train_accuracy:.3f}", flush=True)

    t0 = time.perf_counter()
    net, log, state = training.train(inputs, bq, pi, train_cfg, model_config=model_cfg, net=net,
                                     state=state, stop_after=args.stop_after,
                                     on_epoch_end=None if args.quiet else report)
    try:
        checkpoint.save(out, checkpoint.from_training(net, train_cfg, state, data_cfg))
        log_path.write_text(log.to_csv())
    except OSError as exc:
        raise CliError(f"cannot write outputs: {exc}") from None
    print(f"trained to epoch {state.epoch} in {time.perf_counter() - t0:.1f}s; "
          f"checkpoint {out}, log {log_path}")
    return 0


def cmd_eval(args):
    ckpt = checkpoint.load(args.ckpt)
    net = ckpt.network()
    data_cfg = ckpt.data_config
    crop = tuple(data_cfg.get("crop_size", net.config.input_size[1:]))
    if crop != tuple(net.config.input_size[1:]):
        raise CliError(f"checkpoint crop size {crop} does not match model input "
                       f"{net.config.input_size[1:]}")
    samples, inputs = _load_data(args.data, data_cfg.get("hu_threshold", 150.0), crop)
    bq_max = max(s.bq_label for s in samples)
    pi_max = max(s.pi_label for s in samples)
    if bq_max >= net.config.num_bq_classes or pi_max >= net.config.num_pi_classes:
        raise CliError("dataset labels exceed the checkpoint's class counts")
    threshold = args.vote_threshold
    if threshold is None:
        threshold = data_cfg.get("vote_threshold", 1)

    slice_r, vert_r, pi_r = evalkit.evaluate(net, samples, threshold, inputs=inputs)
    out = Path(args.out) if args.out else Path(args.ckpt).with_name(Path(args.ckpt).name + ".eval")
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, rep in (("slice", slice_r), ("vertebra", vert_r), ("pi_slice", pi_r)):
            (out / f"{name}_metrics.csv").write_text(rep.metrics_csv())
            (out / f"{name}_confusion.txt").write_text(rep.confusion_text())
    except OSError as exc:
        raise CliError(f"cannot write reports to {out}: {exc}") from None

    for name, rep in (("bone quality, slice", slice_r), ("bone quality, vertebra", vert_r),
                      ("PI, slice", pi_r)):
        cells = "  ".join(f"{c}={'NA' if np.isnan(v) else f'{v:.3f}'}"
                          for c, v in zip(rep.columns(), rep.values()))
        print(f"{name} (n={rep.n}, acc={rep.accuracy:.4f}): {cells}")
    print(f"reports written to {out}")
    return 0


def cmd_gradcheck(args):
    modes = ("hard_all", "hard_partial", "soft") if args.all_modes else ("hard_all",)
    t0 = time.perf_counter()
    results = gradcheck.run_suite(args.seed, network_modes=modes)
    width = max(len(r.name) for r in results)
    print(f"{'check'.ljust(width)}  {'max rel err':>12}  {'probes':>6}  {'skipped':>7}  result")
    for r in results:
        print(f"{r.name.ljust(width)}  {r.max_rel_error:12.3e}  {r.coords:6d}  {r.skipped:7d}  "
              f"{'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed (tolerance "
          f"{gradcheck.TOLERANCE:g}) in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


def build_parser():
    seed_opt = argparse.ArgumentParser(add_help=False)
    seed_opt.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                          help=f"random seed (default: ${SEED_ENV} or 0)")

    parser = argparse.ArgumentParser(prog="mtspine", parents=[seed_opt],
                                     description="Multi-task self-paced bone lesion classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[seed_opt], help="generate a phantom dataset")
    p.add_argument("--config", help="key=value run config (defaults if omitted)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[seed_opt], help="train a network on a dataset")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="continue from this checkpoint (its configs take over)")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--stop-after", type=int, help="stop once this many epochs are complete")
    p.add_argument("--log", help="train log CSV (default: <out>.log.csv)")
    p.add_argument("--quiet", action="store_true", help="no per-epoch lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[seed_opt], help="score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vote-threshold", type=int)
    p.add_argument("--out", help="report directory (default: <ckpt>.eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[seed_opt], help="finite-difference gradient checks")
    p.add_argument("--all-modes", action="store_true",
                   help="also check the partial and soft sharing networks")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if not hasattr(args, "seed"):
            args.seed = _default_seed()
        return args.func(args)
    except (CliError, config.ConfigError, checkpoint.CheckpointError, datagen.DatasetError,
            SplError, ValueError) as exc:
        print(f"mtspine {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
