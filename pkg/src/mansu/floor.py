"""Post-hoc magnitude floor on cumulative circuit updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attribution import Circuit, StructuralError
from .net import Checkpoint
from .nf4 import MIN_SPACING, channel_scales

MODES = ("per-tensor-range", "scale-minspacing")
SUB_FLOOR = ("raise", "zero")

# (ref + floor) - ref can land an ulp short of floor; such deltas count as floored
_REL_TOL = 1e-9


@dataclass(frozen=True)
class FloorSpec:
    mode: str = "per-tensor-range"
    alpha: float = 0.704
    clamp_min: float = 1e-6
    sub_floor: str = "raise"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown floor mode {self.mode!r}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.clamp_min > 0:
            raise ValueError("clamp_min must be positive")
        if self.sub_floor not in SUB_FLOOR:
            raise ValueError(f"sub_floor must be one of {SUB_FLOOR}")


@dataclass(frozen=True)
class FloorReport:
    floored_count: int
    zeroed_count: int
    unchanged_count: int
    effective_fraction: float
    sub_floor: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def floor_value(weights, spec: FloorSpec, scales=None):
    """Floor for one tensor.

    ``per-tensor-range``: ``max((max|W| - min|W|) / 16, clamp_min)``.
    ``scale-minspacing``: ``scales * 0.0796 * alpha``; ``scales`` may be a
    scalar or one value per row, and the result has the same shape.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot take the floor of an empty tensor")
    if spec.mode == "per-tensor-range":
        a = np.abs(w)
        return max(float(a.max() - a.min()) / 16.0, spec.clamp_min)
    if scales is None:
        raise ValueError("scale-minspacing mode needs channel scales")
    out = np.asarray(scales, dtype=np.float64) * MIN_SPACING * spec.alpha
    return float(out) if out.ndim == 0 else out


def _floor_map(ckpt: Checkpoint, circuit: Circuit, spec: FloorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-parameter floor (0 outside the circuit) and circuit mask, both flat.

    Floors come from the reference tensors so repeated application is stable.
    """
    dims = ckpt.dims
    if circuit.depth != dims.depth:
        raise StructuralError(f"circuit built for depth {circuit.depth}, checkpoint has {dims.depth}")
    lay = dims.layout()
    ref = ckpt.tensors("reference")
    delta_floor = np.zeros(dims.n_params)
    for name in circuit.tensor_names():
        if name not in lay:
            raise StructuralError(f"circuit tensor {name} absent from checkpoint")
        sl, shape = lay[name]
        w = ref[name]
        if spec.mode == "per-tensor-range":
            delta_floor[sl] = floor_value(w, spec)
        else:
            s = channel_scales(w, "absmax-per-channel")
            delta_floor[sl] = np.broadcast_to(floor_value(w, spec, s)[:, None], shape).ravel()
    return delta_floor, circuit.parameter_mask(dims)


def apply_floor(ckpt: Checkpoint, circuit: Circuit, spec: FloorSpec = FloorSpec()) -> tuple[Checkpoint, FloorReport]:
    """Push every nonzero sub-floor circuit delta to the floor (or back to zero)."""
    floors, mask = _floor_map(ckpt, circuit, spec)
    delta = ckpt.delta()
    mag = np.abs(delta)
    sub = mask & (mag > 0) & (mag < floors * (1 - _REL_TOL))
    new_params = ckpt.params.copy()
    if spec.sub_floor == "raise":
        new_params[sub] = ckpt.reference[sub] + np.sign(delta[sub]) * floors[sub]
        floored, zeroed = int(sub.sum()), 0
    else:
        new_params[sub] = ckpt.reference[sub]
        floored, zeroed = 0, int(sub.sum())
    out = ckpt.copy(params=new_params)
    changed = np.count_nonzero(out.params != out.reference)
    report = FloorReport(
        floored_count=floored,
        zeroed_count=zeroed,
        unchanged_count=int(mask.sum()) - floored - zeroed,
        effective_fraction=changed / ckpt.dims.n_params,
        sub_floor=spec.sub_floor,
    )
    out.info["floor"] = report.to_dict()
    return out, report


def floor_ratio_stats(ckpt: Checkpoint, circuit: Circuit, spec: FloorSpec = FloorSpec()) -> dict:
    """RMS of cumulative deltas over ``circuit``, its ratio to the floor, and the sub-floor share of nonzero deltas."""
    floors, mask = _floor_map(ckpt, circuit, spec)
    delta = ckpt.delta()[mask]
    f = floors[mask]
    rms = float(np.sqrt(np.mean(delta ** 2))) if delta.size else 0.0
    nz = delta != 0
    below = float(np.mean(np.abs(delta[nz]) < f[nz] * (1 - _REL_TOL))) if nz.any() else 0.0
    return {
        "rms": rms,
        "floor": float(np.mean(f)),
        "floor_ratio": rms / float(np.mean(f)),
        "below_floor_fraction": below,
        "nonzero_fraction": float(np.mean(nz)) if delta.size else 0.0,
    }
