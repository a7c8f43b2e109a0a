"""Circuit-restricted unlearning: training loop, checkpoint selection, floor pass.

Baselines (global and surgical gradient ascent, a one-block redirection
surrogate) and the ablation variants are all expressed as ``MethodSpec``
mutations of the same loop.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attribution import AttributionMap, Circuit, attribute, bottom_circuit, select_circuit
from .fisher import build_mask, estimate_fisher, project
from .floor import FloorSpec, apply_floor
from .net import (REFUSAL_TOKEN, Checkpoint, FactDataset, NumericError, TrainingError, accuracy, loss_and_grads,
                  vocab_layout)

log = logging.getLogger(__name__)

METHODS = ("mansu", "global-ga", "surgical-ga", "redirect-surrogate")
CIRCUIT_SOURCES = ("attributed-top-k", "fixed-layers", "random-same-size", "inverse-bottom-k", "all-layers")
ABLATIONS = ("A", "B", "C1", "C2", "D")


class SelectionError(RuntimeError):
    def __init__(self, message: str, closest: dict | None = None):
        super().__init__(message)
        self.closest = closest


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    kl_weight: float = 1.0
    max_steps: int = 30
    forget_batch: int = 8
    retain_batch: int = 8
    early_stop_retain_drop: float = 0.02
    select_retain_budget: float = 0.08
    seed: int = 0
    fisher_samples: int = 100
    mask_policy: str = "percentile"
    mask_value: float = 99.0
    n_examples: int = 10
    ig_steps: int = 5
    random_circuit_seed: int = 42

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")
        if self.max_steps < 1 or self.forget_batch < 1 or self.retain_batch < 1:
            raise ValueError("max_steps and batch sizes must be positive")
        if self.early_stop_retain_drop < 0 or self.select_retain_budget < 0:
            raise ValueError("retain thresholds must be non-negative")


@dataclass(frozen=True)
class MethodSpec:
    name: str = "mansu"
    circuit_source: str = "attributed-top-k"
    use_projection: bool = True
    use_floor: bool = True
    floor: FloorSpec = field(default_factory=FloorSpec)
    k: int = 1
    kl_weight: float | None = None
    lr: float | None = None
    ablation: str | None = None

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown method {self.name!r}")
        if self.circuit_source not in CIRCUIT_SOURCES:
            raise ValueError(f"unknown circuit source {self.circuit_source!r}")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.name == "global-ga" and (self.circuit_source != "all-layers" or self.use_projection or self.use_floor):
            raise ValueError("global-ga updates all layers with no projection and no floor")
        if self.name == "mansu" and self.ablation is None and not (
                self.circuit_source == "attributed-top-k" and self.use_projection and self.use_floor):
            raise ValueError("mansu needs the attributed circuit, projection and floor unless it is an ablation")

    @property
    def label(self) -> str:
        return f"ablation-{self.ablation}" if self.ablation else self.name

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label"] = self.label
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        d = {k: v for k, v in d.items() if k != "label"}
        if isinstance(d.get("floor"), dict):
            d["floor"] = FloorSpec(**d["floor"])
        return cls(**d)


def method(label: str, **overrides) -> MethodSpec:
    """Named presets: mansu, global-ga, surgical-ga, redirect-surrogate, ablation-{A,B,C1,C2,D}."""
    if label.startswith("ablation-"):
        return ablation_spec(label.split("-", 1)[1], MethodSpec(**overrides))
    presets = {
        "mansu": MethodSpec(),
        # global GA runs at the largest rate whose forgetting still fits the retain budget
        "global-ga": MethodSpec("global-ga", "all-layers", False, False, kl_weight=0.0, lr=1e-2),
        "surgical-ga": MethodSpec("surgical-ga", "fixed-layers", False, False, kl_weight=0.0),
        "redirect-surrogate": MethodSpec("redirect-surrogate", "attributed-top-k", False, False, lr=1.0),
    }
    if label not in presets:
        raise ValueError(f"unknown method {label!r}")
    return replace(presets[label], **overrides)


def ablation_spec(which: str, full: MethodSpec | None = None) -> MethodSpec:
    full = full or MethodSpec()
    if which == "A":
        return replace(full, use_floor=False, ablation="A")
    if which == "B":
        return replace(full, use_projection=False, ablation="B")
    if which == "C1":
        return replace(full, circuit_source="random-same-size", ablation="C1")
    if which == "C2":
        return replace(full, circuit_source="inverse-bottom-k", ablation="C2")
    if which == "D":
        return replace(full, circuit_source="all-layers", ablation="D")
    raise ValueError(f"unknown ablation {which!r}")


# --------------------------------------------------------------------------- circuits


def fixed_layers(depth: int) -> Circuit:
    """The middle third of the blocks."""
    lo, hi = round(depth / 3), round(2 * depth / 3)
    return Circuit(tuple(range(lo, max(hi, lo + 1))), depth)


def random_circuit(depth: int, k: int, seed: int, avoid: Circuit | None = None) -> Circuit:
    """Uniform random k-subset; redrawn while it equals ``avoid`` (when another choice exists)."""
    rng = np.random.default_rng(seed)
    while True:
        pick = Circuit(tuple(sorted(int(x) for x in rng.choice(depth, size=k, replace=False))), depth)
        if avoid is None or set(pick.sublayers) != set(avoid.sublayers) or k == depth:
            return pick


def resolve_circuit(spec: MethodSpec, amap: AttributionMap | None, depth: int, config: TrainConfig) -> Circuit:
    src = spec.circuit_source
    if src == "all-layers":
        return Circuit.all_layers(depth)
    if src == "fixed-layers":
        return fixed_layers(depth)
    if amap is None:
        raise ValueError(f"circuit source {src} needs an attribution map")
    top = select_circuit(amap, spec.k)
    if src == "attributed-top-k":
        return top
    if src == "inverse-bottom-k":
        return bottom_circuit(amap, spec.k)
    return random_circuit(depth, spec.k, config.random_circuit_seed, avoid=top)


# --------------------------------------------------------------------------- training loop


@dataclass
class UnlearnResult:
    checkpoint: Checkpoint
    pre_floor: Checkpoint
    circuit: Circuit
    step_log: list[dict]
    selected_step: int
    zero_shot: dict
    fisher: dict | None = None
    floor_report: dict | None = None


def _select(step_log: list[dict], zero_retain: float, budget: float) -> dict:
    ok = [r for r in step_log if zero_retain - r["retain_acc"] <= budget + 1e-12]
    if not ok:
        closest = min(step_log, key=lambda r: zero_retain - r["retain_acc"]) if step_log else None
        raise SelectionError(f"no step keeps the retain drop within {budget}", closest)
    # lowest forget accuracy; ties go to the latest step
    return min(ok, key=lambda r: (r["forget_acc"], -r["step"]))


def _descend(base: Checkpoint, data: FactDataset, config: TrainConfig, update_mask: np.ndarray,
             grad_fn, retain_eval, projector=None, lr: float | None = None):
    """Shared descent loop over ``update_mask`` coordinates; returns (log, per-step params)."""
    lr = config.lr if lr is None else lr
    rng = np.random.default_rng(config.seed)
    fidx, ridx = data.forget_indices, data.retain_indices
    dims = base.dims
    zero = {"forget_acc": accuracy(dims, base.params, data, fidx),
            "retain_acc": accuracy(dims, base.params, data, retain_eval)}
    theta = base.params.copy()
    history, snaps = [], {}
    for t in range(1, config.max_steps + 1):
        fb = rng.choice(fidx, size=min(config.forget_batch, len(fidx)), replace=False)
        rb = rng.choice(ridx, size=min(config.retain_batch, len(ridx)), replace=False)
        try:
            g, stats = grad_fn(theta, fb, rb)
        except NumericError as exc:
            raise TrainingError(str(exc), step=t) from exc
        step = g[update_mask]
        if projector is not None:
            step = projector(step)
        theta = theta.copy()
        theta[update_mask] -= lr * step
        if not np.all(np.isfinite(theta)):
            raise TrainingError("non-finite parameters", step=t)
        row = {"step": t, **stats,
               "forget_acc": accuracy(dims, theta, data, fidx),
               "retain_acc": accuracy(dims, theta, data, retain_eval)}
        history.append(row)
        snaps[t] = theta
        if zero["retain_acc"] - row["retain_acc"] > config.early_stop_retain_drop:
            row["early_stop"] = True
            break
    return zero, history, snaps


def unlearn(base: Checkpoint, data: FactDataset, spec: MethodSpec, config: TrainConfig,
            amap: AttributionMap | None = None, retain_eval=None) -> UnlearnResult:
    """Ascend the forget loss on the circuit, anchored by KL to the reference on retain facts."""
    if spec.name == "redirect-surrogate":
        raise ValueError("use redirect_surrogate() for the redirection baseline")
    retain_eval = data.retain_indices if retain_eval is None else np.asarray(retain_eval)
    if amap is None and spec.circuit_source in ("attributed-top-k", "random-same-size", "inverse-bottom-k"):
        amap = attribute(base, data, config.n_examples, config.ig_steps)
    circuit = resolve_circuit(spec, amap, base.dims.depth, config)
    update_mask = circuit.parameter_mask(base.dims)
    lam = config.kl_weight if spec.kl_weight is None else spec.kl_weight

    fisher = None
    projector = None
    if spec.use_projection:
        n = min(config.fisher_samples, len(data.retain_indices))
        fisher = build_mask(estimate_fisher(base, data.retain_indices, circuit, n, data=data),
                            config.mask_policy, config.mask_value)
        projector = lambda g: project(g, fisher)

    def grad_fn(theta, fb, rb):
        lf, gf = loss_and_grads(base, data, fb, "negated-cross-entropy", params=theta)
        stats = {"forget_loss": -lf}
        g = gf
        if lam > 0:
            kl, gk = loss_and_grads(base, data, rb, "kl-to-reference", params=theta)
            g = g + lam * gk
            stats["kl"] = kl
        return g, stats

    zero, history, snaps = _descend(base, data, config, update_mask, grad_fn, retain_eval, projector, spec.lr)
    best = _select(history, zero["retain_acc"], config.select_retain_budget)
    chosen = base.copy(params=snaps[best["step"]], step=best["step"])
    out, report = chosen, None
    if spec.use_floor:
        out, rep = apply_floor(chosen, circuit, spec.floor)
        report = rep.to_dict()
    return UnlearnResult(out, chosen, circuit, history, best["step"], zero,
                         fisher.to_dict() if fisher is not None else None, report)


def redirect_surrogate(base: Checkpoint, data: FactDataset, circuit: Circuit, config: TrainConfig,
                       retain_eval=None, block: int | None = None, lr: float | None = None) -> UnlearnResult:
    """Retrain the output projection of one non-circuit block to send forget inputs to a refusal token."""
    outside = [l for l in range(base.dims.depth) if l not in circuit.sublayers]
    if not outside:
        raise ValueError("circuit covers every block; nothing left to redirect with")
    block = outside[-1] if block is None else block
    if block not in outside:
        raise ValueError(f"block {block} is inside the circuit")
    retain_eval = data.retain_indices if retain_eval is None else np.asarray(retain_eval)
    update_mask = np.zeros(base.dims.n_params, dtype=bool)
    update_mask[base.dims.layout()[f"blocks.{block}.w_out"][0]] = True

    refuse = data.facts.copy()
    refuse[data.is_forget, 2] = REFUSAL_TOKEN
    redirected = replace(data, facts=refuse)
    lam = config.kl_weight

    # Confine the edit to residual directions along which every answer logit
    # moves by the same amount: answer-vs-answer margins stay untouched.
    sl, shape = base.dims.layout()[f"blocks.{block}.w_out"]
    answers = vocab_layout(base.dims.vocab)["answers"]
    cols = base.tensors("reference")["readout"][:, answers]
    basis = np.linalg.qr(cols[:, 1:] - cols[:, :1])[0]
    keep = np.eye(shape[0]) - basis @ basis.T

    def grad_fn(theta, fb, rb):
        lf, gf = loss_and_grads(base, redirected, fb, "cross-entropy", params=theta)
        kl, gk = loss_and_grads(base, data, rb, "kl-to-reference", params=theta)
        g = gf + lam * gk
        g[sl] = (keep @ g[sl].reshape(shape)).ravel()
        return g, {"refusal_loss": lf, "kl": kl}

    zero, history, snaps = _descend(base, data, config, update_mask, grad_fn, retain_eval, lr=lr)
    best = _select(history, zero["retain_acc"], config.select_retain_budget)
    chosen = base.copy(params=snaps[best["step"]], step=best["step"])
    res = UnlearnResult(chosen, chosen, Circuit((block,), base.dims.depth), history, best["step"], zero)
    res.checkpoint.info["redirect_block"] = block
    return res


def run_ablation(base: Checkpoint, data: FactDataset, which: str, config: TrainConfig, **kwargs):
    """Run one ablation of the full method and evaluate it (see ``harness.run_method``)."""
    from .harness import run_method

    return run_method(base, data, ablation_spec(which), config, **kwargs)
