"""Evaluation (full precision and NF4), experiment reports, and suite orchestration."""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .attribution import AttributionMap, activation_shift, attribute, cad, select_circuit
from .floor import floor_ratio_stats
from .net import Checkpoint, FactDataset, NetDims, accuracy, generate_facts, train_base
from .nf4 import quantize_tensor
from .pipeline import MethodSpec, TrainConfig, UnlearnResult, method, redirect_surrogate, unlearn

log = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1
CONFIG_FORMAT_VERSION = 1
SUITE_METHODS = ("mansu", "global-ga", "surgical-ga", "redirect-surrogate", "ablation-A", "ablation-B",
                 "ablation-C1", "ablation-C2", "ablation-D")


# --------------------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalSet:
    forget_indices: tuple[int, ...]
    retain_indices: tuple[int, ...]
    data_fingerprint: str

    @classmethod
    def sample(cls, data: FactDataset, n_retain: int | None = None, seed: int = 0) -> "EvalSet":
        ridx = data.retain_indices
        if n_retain is not None and n_retain < len(ridx):
            ridx = np.sort(np.random.default_rng(seed).choice(ridx, size=n_retain, replace=False))
        return cls(tuple(int(i) for i in data.forget_indices), tuple(int(i) for i in ridx), data.fingerprint())

    @property
    def fingerprint(self) -> str:
        blob = json.dumps([self.forget_indices, self.retain_indices, self.data_fingerprint]).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({**asdict(self), "fingerprint": self.fingerprint}, indent=2))

    @classmethod
    def load(cls, path) -> "EvalSet":
        d = json.loads(Path(path).read_text())
        return cls(tuple(d["forget_indices"]), tuple(d["retain_indices"]), d["data_fingerprint"])


def quantized_params(ckpt: Checkpoint, policy: str = "absmax-per-channel") -> np.ndarray:
    """Copy of the parameters with every MLP weight replaced by its NF4 value.

    Embeddings and the readout stay in full precision.
    """
    flat = ckpt.params.copy()
    for name, (sl, shape) in ckpt.dims.layout().items():
        if name.startswith("blocks."):
            flat[sl] = quantize_tensor(flat[sl].reshape(shape), policy)[0].ravel()
    return flat


def evaluate(ckpt: Checkpoint, eval_set: EvalSet, data: FactDataset, quantized: bool = False) -> dict:
    """Exact-match accuracy of the argmax answer token on both splits."""
    if eval_set.data_fingerprint != data.fingerprint():
        raise ValueError("eval set was sampled from a different dataset")
    dims = ckpt.dims
    # quantize first, then evaluate from the quantized copy alone
    theta = quantized_params(ckpt) if quantized else ckpt.params
    return {
        "forget_acc": accuracy(dims, theta, data, list(eval_set.forget_indices)),
        "retain_acc": accuracy(dims, theta, data, list(eval_set.retain_indices)),
    }


# --------------------------------------------------------------------------- reports


@dataclass
class ExperimentReport:
    method: dict
    config: dict
    forget_acc_fp: float
    forget_acc_nf4: float
    ptq_gap: float
    retain_acc_fp: float
    retain_acc_nf4: float
    cad: float | None = None
    as_c: float | None = None
    as_nc: float | None = None
    floor_stats: dict = field(default_factory=dict)
    per_step_log: list | None = None
    provenance: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None

    def __post_init__(self):
        for name in ("forget_acc_fp", "forget_acc_nf4", "retain_acc_fp", "retain_acc_nf4"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @classmethod
    def from_accuracies(cls, method: dict, config: dict, fp: dict, nf4: dict, **kw) -> "ExperimentReport":
        return cls(method, config, fp["forget_acc"], nf4["forget_acc"], nf4["forget_acc"] - fp["forget_acc"],
                   fp["retain_acc"], nf4["retain_acc"], **kw)

    @classmethod
    def failed(cls, method: dict, config: dict, error: str, provenance: dict | None = None) -> "ExperimentReport":
        return cls(method, config, None, None, None, None, None, provenance=provenance or {},
                   status="failed", error=error)

    @property
    def label(self) -> str:
        return self.method.get("label", self.method.get("name", "?"))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if d["per_step_log"] is None:
            del d["per_step_log"]
        return {"format_version": REPORT_FORMAT_VERSION, **_plain(d)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        d = dict(d)
        version = d.pop("format_version", None)
        if version != REPORT_FORMAT_VERSION:
            raise ValueError(f"unsupported report format version {version}")
        return cls(**d)


def _plain(obj):
    """Recursively convert numpy scalars/arrays and tuples into JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def emit_report(report: ExperimentReport, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"could not write report to {path}: {exc}") from exc


def read_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))


def _code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --------------------------------------------------------------------------- one run


def run_method(base: Checkpoint, data: FactDataset, spec: MethodSpec, config: TrainConfig,
               eval_set: EvalSet | None = None, amap: AttributionMap | None = None,
               provenance: dict | None = None) -> ExperimentReport:
    """attribute -> unlearn -> floor -> evaluate (fp, nf4) -> CAD / AS -> report."""
    eval_set = eval_set or EvalSet.sample(data)
    amap = amap or attribute(base, data, config.n_examples, config.ig_steps)
    attributed = select_circuit(amap, spec.k)
    retain_eval = list(eval_set.retain_indices)
    if spec.name == "redirect-surrogate":
        res = redirect_surrogate(base, data, attributed, config, retain_eval=retain_eval, lr=spec.lr)
    else:
        res = unlearn(base, data, spec, config, amap=amap, retain_eval=retain_eval)
    return _report(base, data, spec, config, eval_set, amap, attributed, res, provenance)


def _report(base, data, spec, config, eval_set, amap, attributed, res: UnlearnResult, provenance):
    ck = res.checkpoint
    fp = evaluate(ck, eval_set, data, quantized=False)
    nf4 = evaluate(ck, eval_set, data, quantized=True)
    base_nf4 = evaluate(base, eval_set, data, quantized=True)
    after = attribute(ck, data, amap.n_examples, amap.ig_steps)
    floor_spec = spec.floor
    stats = {
        "pre_floor": floor_ratio_stats(res.pre_floor, res.circuit, floor_spec),
        "post_floor": floor_ratio_stats(ck, res.circuit, floor_spec),
        "floor_mode": floor_spec.mode,
        "sub_floor": floor_spec.sub_floor,
        "floor_applied": spec.use_floor,
    }
    if res.floor_report:
        stats["report"] = res.floor_report
    extra = {
        "circuit": list(res.circuit.sublayers),
        "attributed_circuit": list(attributed.sublayers),
        "selected_step": res.selected_step,
        "zero_shot": res.zero_shot,
        "base_nf4": base_nf4,
        "eval_set": eval_set.fingerprint,
        "attribution_before": amap.to_dict(),
        "attribution_after": after.to_dict(),
        "effective_fraction": float(np.count_nonzero(ck.delta()) / ck.dims.n_params),
        "fisher": res.fisher,
    }
    prov = {"seed": config.seed, "base_seed": base.seed, "code_version": _code_version(),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"), **(provenance or {})}
    return ExperimentReport.from_accuracies(
        spec.to_dict(), asdict(config), fp, nf4,
        cad=cad(amap, after, attributed),
        as_c=activation_shift(base, ck, data, attributed),
        as_nc=activation_shift(base, ck, data, attributed.complement()),
        floor_stats=stats, per_step_log=res.step_log, provenance=prov, extra=extra,
    )


# --------------------------------------------------------------------------- suites


@dataclass
class SuiteConfig:
    data: dict = field(default_factory=lambda: {"seed": 0, "n_forget": 20, "n_retain": 80, "vocab": 64})
    net: dict = field(default_factory=lambda: {"width": 32, "hidden": 64, "depth": 8})
    base: dict = field(default_factory=lambda: {"steps": 600, "lr": 1e-2, "target_loss": 0.05})
    train: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: list(SUITE_METHODS))
    method_overrides: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    eval: dict = field(default_factory=lambda: {"n_retain": None})
    format_version: int = CONFIG_FORMAT_VERSION

    @classmethod
    def load(cls, path) -> "SuiteConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "SuiteConfig":
        version = raw.get("format_version", CONFIG_FORMAT_VERSION)
        if version != CONFIG_FORMAT_VERSION:
            raise ValueError(f"unsupported suite config version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown suite config keys: {sorted(unknown)}")
        out = cls()
        for k, v in raw.items():
            if isinstance(getattr(out, k), dict) and isinstance(v, dict):
                merged = dict(getattr(out, k))
                merged.update(v)
                setattr(out, k, merged)
            else:
                setattr(out, k, v)
        return out

    def dims(self) -> NetDims:
        return NetDims(vocab=self.data["vocab"], **self.net)

    def dataset(self) -> FactDataset:
        d = self.data
        return generate_facts(d["seed"], d["n_forget"], d["n_retain"], d["vocab"])

    def train_base(self, data: FactDataset, seed: int) -> Checkpoint:
        return train_base(self.dims(), data, seed=seed, **self.base)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    def method_spec(self, label: str) -> MethodSpec:
        over = dict(self.method_overrides.get(label, {}))
        if "floor" in over:
            from .floor import FloorSpec
            over["floor"] = FloorSpec(**over["floor"])
        return method(label, **over)


def _run_one(args):
    cfg, label, seed, base, data, eval_set, amap = args
    spec = cfg.method_spec(label)
    config = cfg.train_config(seed)
    try:
        return run_method(base, data, spec, config, eval_set, amap, provenance={"suite_seeds": cfg.seeds})
    except Exception as exc:  # a failed run is recorded; the suite keeps going
        log.warning("run %s seed %s failed: %s", label, seed, exc)
        return ExperimentReport.failed(spec.to_dict(), asdict(config), f"{type(exc).__name__}: {exc}",
                                       {"seed": seed, "code_version": _code_version()})


def run_experiment(cfg: SuiteConfig | dict | str | Path, out_dir=None, threads: int = 1) -> list[ExperimentReport]:
    """Train one base model per seed, run every method on it, persist reports and a summary."""
    if not isinstance(cfg, SuiteConfig):
        cfg = SuiteConfig.from_dict(cfg) if isinstance(cfg, dict) else SuiteConfig.load(cfg)
    if not cfg.methods:
        return []
    data = cfg.dataset()
    eval_set = EvalSet.sample(data, cfg.eval.get("n_retain"), seed=cfg.data["seed"])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        eval_set.save(out / "eval_set.json")
        (out / "suite_config.yaml").write_text(yaml.safe_dump(asdict(cfg), sort_keys=True))

    jobs = []
    for seed in cfg.seeds:
        base = cfg.train_base(data, seed)
        tc = cfg.train_config(seed)
        amap = attribute(base, data, tc.n_examples, tc.ig_steps)
        jobs.extend((cfg, label, seed, base, data, eval_set, amap) for label in cfg.methods)

    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(_run_one, jobs))
    else:
        reports = [_run_one(j) for j in jobs]

    if out is not None:
        for (_, label, seed, *_), rep in zip(jobs, reports):
            emit_report(rep, out / "reports" / f"{label}_seed{seed}.json")
        (out / "summary.txt").write_text(summary_table(reports))
    return reports


def summary_table(reports: list[ExperimentReport]) -> str:
    head = f"{'method':<20} {'seed':>4} {'forget_fp':>9} {'forget_nf4':>10} {'ptq_gap':>8} {'retain_fp':>9} {'cad':>7} {'as_c':>7} {'as_nc':>7} {'below':>6}"
    lines = [head, "-" * len(head)]

    def f(x, w, p=3):
        return f"{x:>{w}.{p}f}" if isinstance(x, (int, float)) else f"{'-':>{w}}"

    for r in reports:
        below = r.floor_stats.get("pre_floor", {}).get("below_floor_fraction") if r.floor_stats else None
        lines.append(f"{r.label:<20} {r.provenance.get('seed', '-'):>4} {f(r.forget_acc_fp, 9)} "
                     f"{f(r.forget_acc_nf4, 10)} {f(r.ptq_gap, 8)} {f(r.retain_acc_fp, 9)} {f(r.cad, 7)} "
                     f"{f(r.as_c, 7)} {f(r.as_nc, 7)} {f(below, 6, 2)}"
                     + ("" if r.status == "ok" else f"  FAILED: {r.error}"))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- directional checks


def _by_label(reports: list[ExperimentReport]) -> dict[str, list[ExperimentReport]]:
    out: dict[str, list[ExperimentReport]] = {}
    for r in reports:
        if r.status == "ok":
            out.setdefault(r.label, []).append(r)
    return out


def _retain_drop(r: ExperimentReport) -> float:
    return r.extra["zero_shot"]["retain_acc"] - r.retain_acc_fp


def _forget_drop(r: ExperimentReport) -> float:
    return r.extra["zero_shot"]["forget_acc"] - r.forget_acc_fp


def directional_checks(reports: list[ExperimentReport], budget: float = 0.08) -> dict[str, dict]:
    """Evaluate the six suite-level comparisons (a)-(f) on a finished suite.

    Seeds are paired by position. Where a comparison is not tied to a seed
    count, seed values are averaged before comparing. Each entry holds
    ``passed`` and the numbers it was decided on.
    """
    g = _by_label(reports)
    need = {"mansu", "global-ga", "redirect-surrogate", "ablation-A", "ablation-C1"}
    missing = need - set(g)
    if missing:
        raise ValueError(f"suite lacks successful runs for {sorted(missing)}")
    m, ga, rd, a, c1 = (g[k] for k in ("mansu", "global-ga", "redirect-surrogate", "ablation-A", "ablation-C1"))
    gaps = [r.ptq_gap for r in m]
    ok_seeds = [r.ptq_gap <= 0 and _retain_drop(r) <= budget + 1e-12 for r in m]
    out = {}
    out["a"] = {"passed": sum(ok_seeds) >= -(-2 * len(m) // 3), "ptq_gap": gaps,
                "retain_drop": [_retain_drop(r) for r in m], "seed_ok": ok_seeds}
    below = [r.floor_stats["pre_floor"]["below_floor_fraction"] for r in ga]
    ga_gap, m_gap = float(np.mean([r.ptq_gap for r in ga])), float(np.mean(gaps))
    out["b"] = {"passed": min(below) > 0.9 and ga_gap >= m_gap - 1e-12, "below_floor": below,
                "ptq_gap_ga": ga_gap, "ptq_gap_mansu": m_gap,
                "forget_drop_ga": [_forget_drop(r) for r in ga], "forget_drop_mansu": [_forget_drop(r) for r in m]}
    drops, cads = [_forget_drop(r) for r in rd], [r.cad for r in rd]
    out["c"] = {"passed": float(np.mean(drops)) > 0 and max(cads) <= 0.1, "forget_drop": drops, "cad": cads}
    cad_c1, cad_m = float(np.mean([r.cad for r in c1])), float(np.mean([r.cad for r in m]))
    out["d"] = {"passed": cad_c1 < cad_m, "cad_c1": cad_c1, "cad_mansu": cad_m}
    abs_a, abs_m = float(np.mean([abs(r.ptq_gap) for r in a])), float(np.mean([abs(x) for x in gaps]))
    out["e"] = {"passed": abs_a < abs_m, "abs_gap_A": abs_a, "abs_gap_mansu": abs_m}
    pairs = [(r.as_c, r.as_nc) for r, ok in zip(m, ok_seeds) if ok]
    out["f"] = {"passed": bool(pairs) and all(c > nc for c, nc in pairs), "as_c_as_nc": pairs}
    return out
