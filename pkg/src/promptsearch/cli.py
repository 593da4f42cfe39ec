"""Command-line interface: pretrain, train, eval, report."""

from __future__ import annotations

import argparse
import json
import sys

from .config import load_config
from .harness import (build_report, load_system, pretrain, report_to_csv,
                      save_system, train_continual)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="promptsearch",
                                     description="Continual person search at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="detection pre-training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="sequential continual learning stage")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", required=True, choices=["pops", "oracle", "ft_seq"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="reformat a metrics report")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", required=True, choices=["json", "csv"])

    args = parser.parse_args(argv)
    log = lambda msg: print(msg, file=sys.stderr)

    if args.command == "pretrain":
        config = load_config(args.config)
        system = pretrain(config, log=log)
        save_system(args.out, system, config, stage="pretrained")
        log(f"wrote {args.out}")
    elif args.command == "train":
        config = load_config(args.config)
        system, _ = load_system(args.ckpt)
        system.config = config
        history, digests = train_continual(config, system, log=log)
        save_system(args.out, system, config, stage="trained",
                    history=history, slot_digests=digests)
        log(f"wrote {args.out}")
    elif args.command == "eval":
        from .config import config_from_dict

        system, manifest = load_system(args.ckpt)
        mode = {"oracle": "oracle_selection"}.get(args.mode, args.mode)
        config = config_from_dict(manifest["config"])
        history = manifest["history"]
        if not history:
            raise SystemExit("checkpoint has no training history; run `train` first")
        report = build_report(config, history, mode)
        with open(args.out, "w") as fh:
            fh.write(json.dumps(report, sort_keys=True, indent=2))
        log(f"wrote {args.out}")
    elif args.command == "report":
        with open(args.input) as fh:
            report = json.load(fh)
        if args.format == "json":
            print(json.dumps(report, sort_keys=True, indent=2))
        else:
            print(report_to_csv(report), end="")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
