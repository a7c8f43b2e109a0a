"""Diagonal empirical Fisher on retain facts, the threshold mask, and theory checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .attribution import Circuit, StructuralError
from .net import Checkpoint, FactDataset, embed_tokens, log_softmax, run


@dataclass(frozen=True)
class FisherDiag:
    values: np.ndarray
    n_samples: int
    tau: float = math.inf
    policy: str = "none"

    @property
    def mask(self) -> np.ndarray:
        return self.values <= self.tau

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "tau": float(self.tau), "policy": self.policy,
                "masked_fraction": float(1.0 - self.mask.mean()) if self.values.size else 0.0,
                "mean": float(self.values.mean()) if self.values.size else 0.0}


def estimate_fisher(ckpt: Checkpoint, retain, circuit: Circuit, n_samples: int | None = None,
                    data: FactDataset | None = None) -> FisherDiag:
    """Mean squared per-example gradient of log p(answer) over circuit parameters.

    ``retain`` is a sequence of fact indices into ``data``. Evaluated at the
    reference weights. Per-example squared gradients come from the factored
    outer products, so no per-example gradient vector is ever materialized.
    """
    retain = np.asarray(retain)
    if retain.size == 0:
        raise ValueError("empty retain set")
    n = len(retain) if n_samples is None else n_samples
    if n > len(retain):
        raise ValueError(f"n_samples={n} exceeds retain size {len(retain)}")
    batch = retain[:n]
    dims = ckpt.dims
    if circuit.depth != dims.depth:
        raise StructuralError("circuit does not match checkpoint depth")
    theta = ckpt.reference
    p = dims.unpack(theta)
    tokens = data.inputs(batch)
    y = data.answers(batch)
    logits, cache = run(dims, theta, embed_tokens(dims, theta, tokens))
    prob = np.exp(log_softmax(logits))
    # d(-log p_y)/dlogits per example; the sign disappears once squared
    dl = prob
    dl[np.arange(n), y] -= 1.0
    dh = dl @ p["readout"].T
    per_block = {}
    for l in reversed(range(dims.depth)):
        a, dact = cache["acts"][l]
        dz = (dh @ p[f"blocks.{l}.w_out"]) * dact
        if l in circuit.sublayers:
            f_in = (dz ** 2).T @ (cache["hs"][l] ** 2) / n
            f_out = (dh ** 2).T @ (a ** 2) / n
            per_block[l] = np.concatenate([f_in.ravel(), f_out.ravel()])
        dh = dh + dz @ p[f"blocks.{l}.w_in"]
    # circuit coordinates are ordered like the flat vector
    values = np.concatenate([per_block[l] for l in sorted(circuit.sublayers)]) if per_block else np.zeros(0)
    return FisherDiag(values, n)


def build_mask(fisher: FisherDiag, policy: str = "percentile", value: float = 99.0) -> FisherDiag:
    """Set ``tau`` from ``percentile`` (nearest rank, ascending) or ``mean-fraction``."""
    v = fisher.values
    if policy == "percentile":
        if not 0 <= value <= 100:
            raise ValueError("percentile must lie in [0, 100]")
        s = np.sort(v)
        rank = max(1, math.ceil(value / 100.0 * len(s)))
        tau = float(s[rank - 1]) if len(s) else math.inf
        name = f"percentile({value:g})"
    elif policy == "mean-fraction":
        tau = float(value * v.mean()) if len(v) else math.inf
        name = f"mean-fraction({value:g})"
    else:
        raise ValueError(f"unknown mask policy {policy!r}")
    return replace(fisher, tau=tau, policy=name)


def project(grad, fisher: FisherDiag) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != fisher.values.shape:
        raise StructuralError(f"gradient shape {grad.shape} does not match Fisher shape {fisher.values.shape}")
    return np.where(fisher.mask, grad, 0.0)


# --------------------------------------------------------------------------- tradeoff


@dataclass(frozen=True)
class TradeoffInputs:
    epsilon_r: float
    circuit_size: float
    d: float
    mean_fisher: float


def per_param_bound(epsilon_r: float, circuit_size: float, mean_fisher: float) -> float:
    return math.sqrt(2.0 * epsilon_r / (circuit_size * mean_fisher))


def tradeoff_bound(inputs: TradeoffInputs, floor: float | None = None) -> dict:
    """Largest per-parameter update under the retain budget, and the circuit
    fraction |C|/d at which that bound equals ``floor``."""
    if inputs.circuit_size <= 0 or inputs.d <= 0 or inputs.mean_fisher <= 0 or inputs.epsilon_r < 0:
        raise ValueError("tradeoff inputs must be positive")
    bound = per_param_bound(inputs.epsilon_r, inputs.circuit_size, inputs.mean_fisher)
    out = {"per_param_bound": bound, "floor_crossing_fraction": None}
    if floor is not None:
        size = 2.0 * inputs.epsilon_r / (inputs.mean_fisher * floor ** 2)
        out["floor_crossing_fraction"] = size / inputs.d
    return out


# --------------------------------------------------------------------------- probes


def _sigma_max(m: np.ndarray) -> float:
    if m.size == 0:
        return 0.0
    return float(np.linalg.norm(m, 2))


def interlace_holds(H: np.ndarray, circuit_idx) -> bool:
    """sigma_max of the complement principal block never exceeds sigma_max(H)."""
    cbar = np.setdiff1d(np.arange(H.shape[0]), np.asarray(circuit_idx, dtype=int))
    return _sigma_max(H[np.ix_(cbar, cbar)]) <= _sigma_max(H) * (1 + 1e-12)


def mask_vs_exact(F: np.ndarray, g: np.ndarray, tau: float, eta: float) -> tuple[float, float]:
    """Loss gap between the diagonal-mask step and the exact low-curvature projection.

    Loss is ``0.5 s^T F s``. The exact projector keeps eigen-directions of F
    with eigenvalue <= tau; the mask keeps coordinates with F_ii <= tau.
    Returns ``(gap, sigma_max(F) * ||E||_op / tau * eta^2 * ||g||^2)``.
    """
    D = np.diag(np.diag(F))
    E = F - D
    masked = np.where(np.diag(F) <= tau, g, 0.0)
    if np.count_nonzero(E) == 0:
        exact = masked
    else:
        w, V = np.linalg.eigh(F)
        keep = V[:, w <= tau]
        exact = keep @ (keep.T @ g)
    loss = lambda s: 0.5 * s @ F @ s
    gap = abs(loss(eta * masked) - loss(eta * exact))
    return gap, _sigma_max(F) * _sigma_max(E) / tau * eta ** 2 * float(g @ g)


def theory_probes(seed: int = 7, trials: int = 100, dim: int = 16, tol: float = 1e-10) -> dict:
    """Numerical checks of the circuit-restricted retain bound on random PSD matrices.

    (a) interlace: sigma_max(H[cbar, cbar]) <= sigma_max(H)
    (b) sub-vector: ||g_C|| <= ||g||
    (c) null-space step: dtheta^T H dtheta == 0 for dtheta_C in ker(H_CC), dtheta_cbar = 0
    (d) diagonal-mask step vs exact null-space step on a quadratic loss, compared with
        sigma_max(H) * ||E_C||_op / tau * eta^2 * ||g||^2
    Violations are counted and returned, never raised.
    """
    if dim < 4 or trials < 1:
        raise ValueError("need dim >= 4 and trials >= 1")
    rng = np.random.default_rng(seed)
    out = {"trials": trials, "dim": dim, "seed": seed,
           "violations": {"interlace": 0, "subvector": 0, "null_quadratic": 0, "mask_approx": 0},
           "max_null_quadratic": 0.0, "max_mask_ratio": 0.0}
    eta = 1e-2
    for _ in range(trials):
        # rank-deficient on the circuit block so ker(H_CC) is non-trivial
        k = int(rng.integers(2, dim - 1))
        C = np.sort(rng.choice(dim, size=k, replace=False))
        B = rng.normal(size=(dim, dim))
        r = max(1, k // 2)
        B[C] = rng.normal(size=(k, r)) @ rng.normal(size=(r, dim))
        H = B @ B.T

        if not interlace_holds(H, C):
            out["violations"]["interlace"] += 1

        g = rng.normal(size=dim)
        if np.linalg.norm(g[C]) > np.linalg.norm(g) * (1 + 1e-15):
            out["violations"]["subvector"] += 1

        w, V = np.linalg.eigh(H[np.ix_(C, C)])
        null = V[:, w < 1e-9 * max(1.0, w.max())]
        if null.shape[1]:
            step = np.zeros(dim)
            step[C] = null @ rng.normal(size=null.shape[1])
            step /= np.linalg.norm(step)
            qf = abs(step @ H @ step)
            out["max_null_quadratic"] = max(out["max_null_quadratic"], qf)
            if qf > tol:
                out["violations"]["null_quadratic"] += 1

        # (d): Fisher block F = D + E with a spectral gap around tau (the
        # Davis-Kahan premise): low coordinates in [0.2, 0.5], high in [2, 5].
        tau = 1.0
        low = rng.random(k) < 0.5
        diag = np.where(low, rng.uniform(0.2, 0.5, k), rng.uniform(2.0, 5.0, k))
        E = rng.normal(scale=0.02 / np.sqrt(k), size=(k, k))
        E = np.triu(E, 1) + np.triu(E, 1).T
        F = np.diag(diag) + E
        diff, bound = mask_vs_exact(F, rng.normal(size=k), tau, eta)
        if bound > 0:
            out["max_mask_ratio"] = max(out["max_mask_ratio"], diff / bound)
        if diff > bound + 1e-15:
            out["violations"]["mask_approx"] += 1
    out["passed"] = not any(out["violations"][k] for k in ("interlace", "subvector", "null_quadratic"))
    return out
