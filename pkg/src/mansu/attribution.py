"""Sublayer attribution with integrated gradients, circuit selection, CAD and AS.

Edges of a transformer graph collapse to one node per MLP block here: the
score of block ``l`` is the integrated gradient of the clean-vs-corrupted
logit difference at that block's MLP input, dotted with the clean-minus-
corrupted input activation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .net import Checkpoint, FactDataset, NetDims, backward, embed_tokens, run


class StructuralError(ValueError):
    pass


class DegenerateCircuitError(ValueError):
    pass


class DegenerateActivationError(ValueError):
    def __init__(self, sublayers):
        self.sublayers = list(sublayers)
        super().__init__(f"zero-norm baseline activation on sublayer(s) {self.sublayers}")


@dataclass(frozen=True)
class AttributionMap:
    scores: np.ndarray
    signed: np.ndarray = field(repr=False)
    n_examples: int
    ig_steps: int
    model_fingerprint: str

    def to_dict(self) -> dict:
        return {
            "scores": [float(x) for x in self.scores],
            "n_examples": self.n_examples,
            "ig_steps": self.ig_steps,
            "model_fingerprint": self.model_fingerprint,
        }


@dataclass(frozen=True)
class Circuit:
    sublayers: tuple[int, ...]
    depth: int

    def __post_init__(self):
        subs = tuple(int(s) for s in self.sublayers)
        if len(set(subs)) != len(subs):
            raise ValueError(f"duplicate sublayers in circuit {subs}")
        if any(s < 0 or s >= self.depth for s in subs):
            raise StructuralError(f"circuit {subs} references a block outside 0..{self.depth - 1}")
        object.__setattr__(self, "sublayers", subs)

    @property
    def k(self) -> int:
        return len(self.sublayers)

    def complement(self) -> "Circuit":
        return Circuit(tuple(l for l in range(self.depth) if l not in self.sublayers), self.depth)

    def parameter_mask(self, dims: NetDims) -> np.ndarray:
        if dims.depth != self.depth:
            raise StructuralError(f"circuit built for depth {self.depth}, network has {dims.depth}")
        mask = np.zeros(dims.n_params, dtype=bool)
        for l in self.sublayers:
            mask[dims.block_slice(l)] = True
        return mask

    def tensor_names(self) -> list[str]:
        return [f"blocks.{l}.{w}" for l in sorted(self.sublayers) for w in ("w_in", "w_out")]

    @classmethod
    def all_layers(cls, depth: int) -> "Circuit":
        return cls(tuple(range(depth)), depth)


def _forget_pairs(data: FactDataset, n_examples: int):
    fidx = data.forget_indices
    if n_examples > len(fidx):
        raise ValueError(f"n_examples={n_examples} exceeds forget split size {len(fidx)}")
    if len(data.corrupted) < len(fidx):
        raise StructuralError("forget example without a corrupted pair")
    idx = fidx[:n_examples]
    clean = data.facts[idx]
    corr = data.corrupted[:n_examples]
    if np.any(corr[:, 1] != clean[:, 1]):
        raise StructuralError("corrupted pair does not share the clean relation token")
    return clean, corr


def signed_scores(ckpt: Checkpoint, data: FactDataset, n_examples: int, ig_steps: int,
                  params: np.ndarray | None = None) -> np.ndarray:
    """Per-example, per-block signed IG scores, shape (n_examples, depth)."""
    if ig_steps < 1:
        raise ValueError("ig_steps must be >= 1")
    dims = ckpt.dims
    theta = ckpt.params if params is None else params
    clean, corr = _forget_pairs(data, n_examples)
    h_clean = embed_tokens(dims, theta, clean[:, :2])
    h_corr = embed_tokens(dims, theta, corr[:, :2])
    _, c_clean = run(dims, theta, h_clean)
    _, c_corr = run(dims, theta, h_corr)
    diffs = [c_clean["hs"][l] - c_corr["hs"][l] for l in range(dims.depth)]

    n = len(clean)
    dlogits = np.zeros((n, dims.vocab))
    dlogits[np.arange(n), clean[:, 2]] += 1.0
    dlogits[np.arange(n), corr[:, 2]] -= 1.0

    total = np.zeros((n, dims.depth))
    for k in range(1, ig_steps + 1):
        alpha = k / ig_steps
        h = (1.0 - alpha) * h_corr + alpha * h_clean
        _, cache = run(dims, theta, h)
        _, _, node = backward(dims, theta, cache, dlogits, node_grads=True)
        for l in range(dims.depth):
            total[:, l] += np.einsum("bd,bd->b", node[l], diffs[l])
    return total / ig_steps


def attribute(ckpt: Checkpoint, data: FactDataset, n_examples: int = 10, ig_steps: int = 5,
              params: np.ndarray | None = None) -> AttributionMap:
    signed = signed_scores(ckpt, data, n_examples, ig_steps, params)
    fp = ckpt.fingerprint() if params is None else ckpt.copy(params=params).fingerprint()
    return AttributionMap(np.abs(signed).mean(axis=0), signed, n_examples, ig_steps, fp)


def select_circuit(amap: AttributionMap, k: int) -> Circuit:
    """Top-k blocks by score; equal scores resolve to the lower block index."""
    depth = len(amap.scores)
    if not 1 <= k <= depth:
        raise ValueError(f"k must be in 1..{depth}, got {k}")
    order = sorted(range(depth), key=lambda l: (-amap.scores[l], l))
    return Circuit(tuple(order[:k]), depth)


def bottom_circuit(amap: AttributionMap, k: int) -> Circuit:
    depth = len(amap.scores)
    if not 1 <= k <= depth:
        raise ValueError(f"k must be in 1..{depth}, got {k}")
    order = sorted(range(depth), key=lambda l: (amap.scores[l], l))
    return Circuit(tuple(order[:k]), depth)


def cad_scores(before, after) -> float:
    """sum |before - after| / sum |before| over already-scoped scores."""
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    denom = np.abs(before).sum()
    if denom == 0:
        raise DegenerateCircuitError("circuit has zero total attribution before the edit")
    return float(np.abs(before - after).sum() / denom)


def cad(map_before: AttributionMap, map_after: AttributionMap, circuit: Circuit) -> float:
    if (map_before.n_examples, map_before.ig_steps) != (map_after.n_examples, map_after.ig_steps):
        raise ValueError("attribution maps computed with different configs")
    idx = list(circuit.sublayers)
    return cad_scores(map_before.scores[idx], map_after.scores[idx])


def sublayer_activations(ckpt: Checkpoint, data: FactDataset, params: np.ndarray | None = None) -> list[np.ndarray]:
    """MLP output of every block on the forget inputs."""
    theta = ckpt.params if params is None else params
    tokens = data.inputs(data.forget_indices)
    _, cache = run(ckpt.dims, theta, embed_tokens(ckpt.dims, theta, tokens))
    return cache["outs"]


def activation_shift_per_sublayer(before: Checkpoint, after: Checkpoint, data: FactDataset):
    """``(baseline_norms, shift_norms)`` per block, forget inputs flattened."""
    if before.dims != after.dims:
        raise ValueError("checkpoints are not shape-compatible")
    a0 = sublayer_activations(before, data)
    a1 = sublayer_activations(after, data)
    norms = np.array([np.linalg.norm(x) for x in a0])
    return norms, np.array([np.linalg.norm(y - x) for x, y in zip(a0, a1)])


def activation_shift(before: Checkpoint, after: Checkpoint, data: FactDataset, scope: Circuit) -> float:
    """Mean relative change of scoped MLP outputs on forget inputs."""
    if scope.k == 0:
        raise ValueError("activation-shift scope is empty")
    norms, shifts = activation_shift_per_sublayer(before, after, data)
    idx = list(scope.sublayers)
    bad = [l for l in idx if norms[l] == 0]
    if bad:
        raise DegenerateActivationError(bad)
    return float(np.mean(shifts[idx] / norms[idx]))
