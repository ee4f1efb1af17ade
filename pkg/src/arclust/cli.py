"""Command-line entry point.

Exit status is 0 on success, 1 for usage and configuration errors and 2 for
runtime failures (unreadable files, numeric aborts, failed gradient checks).
Progress goes to standard error as one ``event=... key=value`` line per event;
results go to the declared output paths or standard output.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DESK, PAPER, PAPER_MAE, TrainConfig, parse_pairs
from .costmodel import CostConfig, cost_report, reports_to_csv
from .errors import ConfigurationError, ContractError, NumericError, ParseError

log = logging.getLogger("arclust")

PRESETS = {"desk": DESK, "paper": PAPER, "paper-mae": PAPER_MAE}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _event(event: str, /, **fields) -> None:
    log.info("event=%s %s", event, " ".join(f"{k}={v}" for k, v in fields.items()))


# --------------------------------------------------------------------------- config resolution


def resolve_config(args) -> TrainConfig:
    """Preset, then config file, then ``--set`` pairs, then ``--seed``."""
    cfg = PRESETS[args.preset]
    if args.config:
        cfg = TrainConfig.from_text(Path(args.config).read_text(encoding="utf-8"), base=cfg)
    if args.set:
        cfg = cfg.replace(**parse_pairs("\n".join(args.set)))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _announce(cfg: TrainConfig) -> None:
    pairs = " ".join(line.replace(" = ", "=") for line in cfg.to_text().splitlines())
    _event("config", **{"seed": cfg.seed})
    log.info("event=resolved %s", pairs)


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: TrainConfig) -> int:
    from .videodata import write_corpus

    count = cfg.num_videos if args.count is None else args.count
    paths = write_corpus(args.out, cfg.task_spec(), count)
    _event("gen-data", videos=len(paths), out=args.out)
    return 0


def cmd_pretrain(args, cfg: TrainConfig) -> int:
    from .trainer import pretrain_loop, write_metrics

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        if resume.config != cfg:
            cfg = resume.config
            _event("resume-config", note="using the configuration stored in the checkpoint")
            _announce(cfg)
    try:
        ckpt, rows = pretrain_loop(cfg, resume=resume, stop_at=args.stop_at)
    except NumericError:
        log.error("event=abort reason=non-finite-loss seed=%d", cfg.seed)
        raise
    write_metrics(out / "metrics.csv", rows, append=resume is not None)
    save_checkpoint(out / "checkpoint.arvc", ckpt)
    if rows:
        _event("pretrain", steps=ckpt.step, first_loss=f"{rows[0].loss:.6f}", last_loss=f"{rows[-1].loss:.6f}",
               out=str(out))
    return 0


def _checkpoint_or_init(args, cfg):
    from .trainer import initial_checkpoint

    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    _event("init", note="no checkpoint given, using freshly initialized parameters")
    return initial_checkpoint(cfg)


def cmd_probe(args, cfg: TrainConfig) -> int:
    from .trainer import probe_finetune

    ckpt = _checkpoint_or_init(args, cfg)
    res = probe_finetune(ckpt, args.mode, seed=cfg.seed)
    print(f"mode,accuracy,correct,total,train_accuracy\n"
          f"{args.mode},{res.accuracy:.6f},{res.correct},{res.total},{res.train_accuracy:.6f}")
    return 0


def cmd_layout_dump(args, cfg: TrainConfig) -> int:
    from .layout import mask_to_csv, mask_to_pgm, sample_layout

    plan = sample_layout(cfg.scheme, cfg.policy, cfg.mask_ratio, cfg.seed, args.step, args.slot,
                         targets=cfg.targets)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, mask in (("enc_mask", plan.enc_mask), ("cross_mask", plan.cross_mask)):
        if args.format == "csv":
            (out / f"{name}.csv").write_text(mask_to_csv(mask))
        else:
            (out / f"{name}.pgm").write_bytes(mask_to_pgm(mask))
        _event("layout-dump", mask=name, rows=mask.shape[0], cols=mask.shape[1])
    order = ",".join(str(int(c)) for c in plan.order)
    (out / "order.txt").write_text(order + "\n")
    return 0


def cmd_rank_report(args, cfg: TrainConfig) -> int:
    from .diagnostics import attention_rank_report
    from .model import Net
    from .trainer import batch_layout, load_corpus

    ckpt = _checkpoint_or_init(args, cfg)
    cfg = ckpt.config
    corpus = load_corpus(cfg)
    cubes = corpus.cubes[corpus.test_indices[:args.samples]]
    net = Net(cfg.model_config(), ckpt.params)
    if args.layout:
        _, record = net.encode(cubes, batch_layout(cfg, 0, len(cubes)), record=True)
    else:
        _, record = net.features(cubes, record=True)
    report = attention_rank_report(record, args.rel_tol)
    _write(args.out, report.csv())
    return 0


def cmd_cost_report(args) -> int:
    configs = []
    for name in args.preset or []:
        configs.append((name, PRESETS[name]))
    for path in args.config or []:
        configs.append((Path(path).stem, TrainConfig.load(path)))
    if not configs:
        configs = [("paper", PAPER), ("paper-mae", PAPER_MAE)]
    reports = [cost_report(CostConfig.from_train(cfg, name=name)) for name, cfg in configs]
    for r in reports:
        _event("cost", name=r.name, enc_q=r.enc_q, enc_kv=r.enc_kv, dec_q=r.dec_q, dec_kv=r.dec_kv)
    _write(args.out, reports_to_csv(reports))
    return 0


def cmd_gradcheck(args, cfg: TrainConfig) -> int:
    from .trainer import gradcheck

    report = gradcheck(cfg, count=args.count, h=args.h, tol=args.tol)
    print("parameter,max_rel_err")
    for name, err in sorted(report.max_rel_err.items()):
        print(f"{name},{err:.3e}")
    _event("gradcheck", checked=report.checked, worst=f"{report.worst:.3e}", tol=args.tol,
           passed=report.passed)
    return 0 if report.passed else 2


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                        help="base configuration the file and --set pairs override (default: desk)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    common.add_argument("--seed", type=int, help="run seed; overrides the configuration file")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads (1 = single-threaded)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = _Parser(prog="arclust", description="Cluster-autoregressive video pretraining toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic moving-shape corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, help="number of videos (default: num_videos)")

    p = sub.add_parser("pretrain", parents=[common], help="run masked autoregressive pretraining")
    p.add_argument("--out", required=True, help="directory for metrics.csv and checkpoint.arvc")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-at", type=int, help="stop after this many total steps")

    p = sub.add_parser("probe", parents=[common], help="linear probe or full fine-tune on direction labels")
    p.add_argument("--checkpoint", help="pretrained checkpoint (default: fresh init)")
    p.add_argument("--mode", choices=["linear", "full"], default="linear")

    p = sub.add_parser("layout-dump", parents=[common], help="write encoder and cross-attention masks")
    p.add_argument("--format", choices=["csv", "pgm"], default="csv")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--step", type=int, default=0, help="training step whose layout is drawn")
    p.add_argument("--slot", type=int, default=0, help="batch slot whose layout is drawn")

    p = sub.add_parser("rank-report", parents=[common], help="numerical rank of encoder attention per layer")
    p.add_argument("--checkpoint", help="checkpoint to analyse (default: fresh init)")
    p.add_argument("--samples", type=int, default=4, help="held-out videos to run")
    p.add_argument("--layout", action="store_true", help="use the block-causal pretraining layout")
    p.add_argument("--rel-tol", type=float, help="singular values above rel_tol*sigma_max count")
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("cost-report", help="analytic sequence lengths, FLOPs and attention-map sizes")
    p.add_argument("--config", action="append", help="configuration file; repeat to compare")
    p.add_argument("--preset", action="append", choices=sorted(PRESETS), help="built-in configuration; repeatable")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the pretraining loss")
    p.add_argument("--count", type=int, default=20, help="parameter entries to probe")
    p.add_argument("--h", type=float, default=1e-4, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-5, help="maximum relative error")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "layout-dump": cmd_layout_dump,
    "rank-report": cmd_rank_report,
    "gradcheck": cmd_gradcheck,
}


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    """Parse ``argv`` and run one subcommand; returns the exit status."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    _setup_logging(args.log_level)
    try:
        if args.command == "cost-report":
            return cmd_cost_report(args)
        cfg = resolve_config(args)
        _announce(cfg)
        # non-finite values are caught explicitly by the autodiff ops
        with _thread_limit(args.threads), np.errstate(all="ignore"):
            return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigurationError) as exc:
        log.error("event=usage-error message=%r", str(exc))
        return 1
    except NumericError as exc:
        log.error("event=numeric-error message=%r", str(exc))
        return 2
    except (ParseError, ContractError, OSError) as exc:
        log.error("event=runtime-error message=%r", str(exc))
        return 2
    except Exception as exc:  # anything else is still a runtime failure, not a usage error
        log.exception("event=internal-error message=%r", str(exc))
        return 2


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def main() -> None:
    sys.exit(run())
