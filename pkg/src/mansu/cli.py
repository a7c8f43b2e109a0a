"""Command-line entry point: ``mansu <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .attribution import Circuit, attribute, select_circuit
from .fisher import TradeoffInputs, theory_probes, tradeoff_bound
from .floor import FloorSpec, apply_floor, floor_ratio_stats
from .harness import EvalSet, SuiteConfig, emit_report, evaluate, run_experiment, run_method, summary_table
from .net import load_checkpoint, save_checkpoint
from .pipeline import unlearn

log = logging.getLogger("mansu")


def _config(args) -> SuiteConfig:
    return SuiteConfig.load(args.config) if args.config else SuiteConfig()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    print(path)


def cmd_train_base(args) -> int:
    cfg = _config(args)
    data = cfg.dataset()
    base = cfg.train_base(data, args.seed)
    out = _out(args)
    save_checkpoint(base, out / "base.ckpt")
    print(out / "base.ckpt")
    _dump({"seed": args.seed, **base.info, "steps": base.step}, out / "base.json")
    return 0


def cmd_attribute(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.ckpt)
    tc = cfg.train_config(args.seed)
    amap = attribute(ckpt, cfg.dataset(), tc.n_examples, tc.ig_steps)
    circuit = select_circuit(amap, args.k)
    _dump({**amap.to_dict(), "circuit": list(circuit.sublayers)}, _out(args) / "attribution.json")
    return 0


def cmd_unlearn(args) -> int:
    cfg = _config(args)
    data = cfg.dataset()
    base = load_checkpoint(args.ckpt)
    spec = cfg.method_spec(args.method)
    config = cfg.train_config(args.seed)
    out = _out(args)
    if spec.name == "redirect-surrogate":
        report = run_method(base, data, spec, config, EvalSet.sample(data, cfg.eval.get("n_retain")))
        emit_report(report, out / f"{spec.label}_seed{args.seed}.json")
        return 0
    res = unlearn(base, data, spec, config)
    save_checkpoint(res.checkpoint, out / "unlearned.ckpt")
    print(out / "unlearned.ckpt")
    _dump({"circuit": list(res.circuit.sublayers), "selected_step": res.selected_step,
           "zero_shot": res.zero_shot, "floor": res.floor_report, "steps": res.step_log},
          out / "unlearn_log.json")
    return 0


def cmd_floor(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    circuit = Circuit(tuple(args.layers), ckpt.dims.depth)
    spec = FloorSpec(mode=args.mode, alpha=args.alpha, sub_floor=args.sub_floor)
    before = floor_ratio_stats(ckpt, circuit, spec)
    floored, report = apply_floor(ckpt, circuit, spec)
    out = _out(args)
    save_checkpoint(floored, out / "floored.ckpt")
    print(out / "floored.ckpt")
    _dump({"before": before, "report": report.to_dict()}, out / "floor_report.json")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    data = cfg.dataset()
    ckpt = load_checkpoint(args.ckpt)
    ev = EvalSet.sample(data, cfg.eval.get("n_retain"), seed=cfg.data["seed"])
    fp, q = evaluate(ckpt, ev, data), evaluate(ckpt, ev, data, quantized=True)
    result = {"fp": fp, "nf4": q, "ptq_gap": q["forget_acc"] - fp["forget_acc"], "eval_set": ev.fingerprint}
    print(json.dumps(result, indent=2))
    return 0


def cmd_suite(args) -> int:
    cfg = _config(args)
    if args.seed is not None and args.seeds_from_flag:
        cfg.seeds = [args.seed]
    reports = run_experiment(cfg, args.out, threads=args.threads)
    print(summary_table(reports), end="")
    return 0 if all(r.status == "ok" for r in reports) else 1


def cmd_probes(args) -> int:
    probes = theory_probes(seed=args.seed, trials=args.trials, dim=args.dim)
    tb = tradeoff_bound(TradeoffInputs(0.02, 8.03e9, 8.03e9, 1.0), floor=8.4e-4)
    print(json.dumps({"probes": probes, "tradeoff": tb}, indent=2, default=float))
    return 0 if probes["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mansu", description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="suite config (YAML or JSON)")
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--threads", type=int, default=1, help="parallel workers; only the suite stage uses more than one")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train-base", help="train the base toy model").set_defaults(fn=cmd_train_base)

    s = sub.add_parser("attribute", help="IG sublayer attribution and top-k circuit")
    s.add_argument("ckpt")
    s.add_argument("-k", type=int, default=1)
    s.set_defaults(fn=cmd_attribute)

    s = sub.add_parser("unlearn", help="run one method on a base checkpoint")
    s.add_argument("ckpt")
    s.add_argument("--method", default="mansu")
    s.set_defaults(fn=cmd_unlearn)

    s = sub.add_parser("floor", help="apply the magnitude floor to a checkpoint")
    s.add_argument("ckpt")
    s.add_argument("--layers", type=int, nargs="+", required=True)
    s.add_argument("--mode", default="per-tensor-range", choices=("per-tensor-range", "scale-minspacing"))
    s.add_argument("--alpha", type=float, default=0.704)
    s.add_argument("--sub-floor", default="raise", choices=("raise", "zero"))
    s.set_defaults(fn=cmd_floor)

    s = sub.add_parser("eval", help="full-precision and NF4 accuracy")
    s.add_argument("ckpt")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("suite", help="methods x seeds from a suite config")
    s.add_argument("--only-seed", dest="seeds_from_flag", action="store_true",
                   help="run just the global --seed instead of the config's seeds")
    s.set_defaults(fn=cmd_suite)

    s = sub.add_parser("probes", help="theory probes and the tradeoff closed form")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--dim", type=int, default=16)
    s.set_defaults(fn=cmd_probes)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
