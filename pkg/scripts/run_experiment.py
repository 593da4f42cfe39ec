"""Run the full two-stage protocol and print a comparison table.

Pre-trains the detector once, then runs the prompt-based method, the
oracle-selection upper bound, and the sequential fine-tuning baseline on
the same domain sequence, reporting final metrics and forgetting.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from promptsearch.config import RunConfig, config_from_dict, load_config
from promptsearch.harness import (build_report, load_system, pretrain,
                                  save_system, train_continual)

QUICK = dict(seed=0, num_domains=3, separation=1.0, identity_count=12,
             train_scenes=100, test_scenes=40, queries=12, gallery_size=20,
             corpus_size=800, warmup_steps=2000, pretrain_epochs=22,
             pretrain_lr=1e-3, continual_epochs=8, continual_lr=3e-3,
             batch_size=2)


def log(msg):
    print(msg, file=sys.stderr, flush=True)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", help="JSON run config (default: built-in quick settings)")
    parser.add_argument("--out", default="results", help="output directory")
    parser.add_argument("--modes", nargs="+",
                        default=["pops", "oracle_selection", "ft_seq"])
    args = parser.parse_args()

    config = load_config(args.config) if args.config else config_from_dict(QUICK)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    ckpt = out_dir / "pretrained.zip"
    if ckpt.exists():
        log(f"reusing {ckpt}")
        system, _ = load_system(ckpt)
    else:
        t0 = time.time()
        system = pretrain(config, log=log)
        log(f"pretrain done in {time.time() - t0:.0f}s")
        save_system(ckpt, system, config, stage="pretrained")

    reports = {}
    for mode in args.modes:
        baseline = "ft_seq" if mode == "ft_seq" else "pops"
        run_cfg = config_from_dict({**config.to_dict(), "baseline": baseline,
                                    "domains": []})
        fresh, _ = load_system(ckpt)
        t0 = time.time()
        history, digests = train_continual(run_cfg, fresh, log=log)
        log(f"{mode}: continual stage {time.time() - t0:.0f}s")
        report = build_report(run_cfg, history, mode)
        reports[mode] = report
        with open(out_dir / f"report_{mode}.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        if mode != "ft_seq":
            save_system(out_dir / f"trained_{mode}.zip", fresh, run_cfg,
                        stage="trained", history=history, slot_digests=digests)

    print(f"{'mode':<18}{'mAP':>8}{'top1':>8}{'det AP':>8}{'forget mAP d0':>15}")
    for mode, report in reports.items():
        wa = report["weighted_average"]
        f0 = report["forgetting"][0]["map"] if report["forgetting"] else 0.0
        print(f"{mode:<18}{wa['map']:>8.2f}{wa['top1']:>8.2f}"
              f"{wa['detection_ap']:>8.2f}{f0:>15.2f}")


if __name__ == "__main__":
    main()
