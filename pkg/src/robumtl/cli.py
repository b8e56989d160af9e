"""Command-line entry point.

Settings come from an optional ``--config`` file of ``key=value`` lines; any
``--key value`` flag overrides the file. Exit status: 0 on success, 1 on a
validation problem or bad usage, 2 on an I/O problem.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from typing import Optional, Sequence

from . import pipeline as P
from .errors import FormatError, RobuMTLError
from .perturb import ALL_KINDS, PerturbationKind

COMMANDS = {
    "gen-data": "write the six-kind synthetic corpus",
    "train-base": "train the shared multi-task model on clean data",
    "train-expert": "train one expert (--kind) or all of them",
    "train-dmls": "train the perturbation router",
    "train-monolithic": "fine-tune the whole model on pooled data (comparator)",
    "finetune": "adapt decoders and norms to the routed experts",
    "eval": "routed evaluation with --k and --mode",
    "ablate-ranks": "retrain the pool for several rank schedules",
    "ablate-k": "sweep k=1..6 on the single and mixed sets",
    "report": "collect every report into reports/summary.txt",
    "run": "every stage in order",
}

_MODE_FLAGS = {"lora": "robumtl", "squad": "robumtl_plus"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robumtl", description="Routed low-rank experts for robust multi-task vision.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key=value settings file")
        for f in dataclasses.fields(P.PipelineConfig):
            flag = "--" + f.name.replace("_", "-")
            if f.name == "mode":
                p.add_argument(flag, dest=f.name, choices=["robumtl", "robumtl_plus", *_MODE_FLAGS])
            else:
                p.add_argument(flag, dest=f.name, metavar=f.name.upper())
        if name == "train-expert":
            p.add_argument("--kind", help="perturbation kind; all kinds when omitted")
        if name == "eval":
            p.add_argument("--set", dest="eval_set", default="single", choices=["single", "mixed", "clean"])
    return parser


def _config_from(args) -> P.PipelineConfig:
    base = P.PipelineConfig.from_file(args.config) if args.config else P.PipelineConfig()
    overrides = {}
    for f in dataclasses.fields(P.PipelineConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = _MODE_FLAGS.get(value, value) if f.name == "mode" else value
    return P.PipelineConfig.from_items(overrides, base)


def _dispatch(cmd: str, cfg: P.PipelineConfig, args, out) -> None:
    lay = P.Layout(cfg.out)
    if cmd == "gen-data":
        manifest = P.generate_data(cfg)
        print(f"wrote {len(manifest['samples'])} samples to {lay.corpus}", file=out)
        return
    if cmd == "run":
        result = P.run_all(cfg, lambda s: print(f"-- {s}", file=out, flush=True))
        print(P.summary_block(result["single"] + result["mixed"]), end="", file=out)
        return
    corpus = P.Corpus(P._require(lay.corpus, "corpus"))
    if cmd == "train-base":
        P.run_train_base(cfg, corpus)
        print(f"saved {lay.checkpoint('base')}", file=out)
    elif cmd == "train-expert":
        base = P.load_model(cfg, lay.checkpoint("base"))
        kinds = [PerturbationKind.parse(args.kind)] if args.kind else list(ALL_KINDS)
        for kind in kinds:
            P.train_expert(base, kind, corpus, cfg)
            print(f"saved {lay.expert(cfg.fusion_mode, kind)}", file=out)
    elif cmd == "train-dmls":
        net, metrics = P.run_train_dmls(cfg, corpus)
        print(f"router parameters: {net.num_parameters()}", file=out)
        print(f"held-out accuracy {metrics['accuracy']:.4f}  precision {metrics['precision']:.4f}  "
              f"recall {metrics['recall']:.4f}  f1 {metrics['f1']:.4f}", file=out)
    elif cmd == "train-monolithic":
        P.train_monolithic(cfg, P.load_model(cfg, lay.checkpoint("base")), corpus)
        print(f"saved {lay.checkpoint('monolithic')}", file=out)
    elif cmd == "finetune":
        if cfg.mode != "robumtl":
            raise P.ModeError("finetune runs in robumtl mode only")
        base = P.load_model(cfg, lay.checkpoint("base"))
        P.finetune_shared(base, P.load_router(cfg), P.load_pool(cfg, base), corpus, cfg)
        print(f"saved {lay.checkpoint('base_ft')}", file=out)
    elif cmd == "eval":
        reports = P.run_eval(cfg, corpus, args.eval_set)
        print(P.summary_block(reports), end="", file=out)
    elif cmd == "ablate-k":
        rows = P.ablate_k(cfg, corpus)
        print("k  dm_single  dm_mixed", file=out)
        for r in rows:
            print(f"{r['k']}  {r['dm_single']:+.3f}  {r['dm_mixed']:+.3f}", file=out)
    elif cmd == "ablate-ranks":
        rows = P.ablate_ranks(cfg, corpus)
        for r in rows:
            print(f"{'/'.join(map(str, r['schedule']))}  params={r['parameters']}  dm={r['dm_single']:+.3f}", file=out)
    elif cmd == "report":
        print(P.collect_report(cfg), end="", file=out)


def main(argv: Optional[Sequence[str]] = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = _build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
        if not args.command:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc), file=err, end="" if str(exc).endswith("\n") else "\n")
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from(args)
        _dispatch(args.command, cfg, args, out)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=err)
        return 2
    except (RobuMTLError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=err)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
