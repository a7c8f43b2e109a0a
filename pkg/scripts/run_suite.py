#!/usr/bin/env python3
"""Run a suite config, write reports and a summary, and print the directional checks."""

import argparse
import json
import time

from mansu.harness import SuiteConfig, directional_checks, run_experiment, summary_table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/default_suite.yaml")
    ap.add_argument("--out", default="runs/default_suite")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    cfg = SuiteConfig.load(args.config)
    t0 = time.perf_counter()
    reports = run_experiment(cfg, args.out, threads=args.threads)
    print(summary_table(reports))
    checks = directional_checks(reports, cfg.train_config(0).select_retain_budget)
    for key, res in checks.items():
        detail = {k: v for k, v in res.items() if k != "passed"}
        print(f"({key}) {'PASS' if res['passed'] else 'FAIL'}  {json.dumps(detail, default=float)}")
    print(f"{len(reports)} runs in {time.perf_counter() - t0:.1f}s; reports under {args.out}")


if __name__ == "__main__":
    main()
