"""Residual-MLP fact-recall network with hand-written backprop.

The input is a (subject, relation) token pair, summed into the residual
stream; each block adds ``W_out @ act(W_in @ h)``; a linear readout gives
logits over the vocabulary. Weights are stored output-channel-major
(``W_in`` is H x D, ``W_out`` is D x H), so rows are quantization channels.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

OBJECTIVES = ("cross-entropy", "negated-cross-entropy", "kl-to-reference")

REFUSAL_TOKEN = 0
MAGIC = b"MNSU"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class NumericError(ArithmeticError):
    pass


class CheckpointFormatError(ValueError):
    pass


# --------------------------------------------------------------------------- model


@dataclass(frozen=True)
class NetDims:
    vocab: int = 64
    width: int = 32
    hidden: int = 64
    depth: int = 8
    activation: str = "tanh"

    def __post_init__(self):
        if min(self.vocab, self.width, self.hidden, self.depth) < 1:
            raise ValueError("all network dimensions must be positive")
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        V, D, H, L = self.vocab, self.width, self.hidden, self.depth
        return 2 * V * D + 2 * L * D * H

    def layout(self) -> dict[str, tuple[slice, tuple[int, int]]]:
        """Flat-vector slices in sublayer-index order."""
        V, D, H, L = self.vocab, self.width, self.hidden, self.depth
        out = {}
        pos = 0

        def take(name, shape):
            nonlocal pos
            n = shape[0] * shape[1]
            out[name] = (slice(pos, pos + n), shape)
            pos += n

        take("embed", (V, D))
        for l in range(L):
            take(f"blocks.{l}.w_in", (H, D))
            take(f"blocks.{l}.w_out", (D, H))
        take("readout", (D, V))
        return out

    def block_slice(self, l: int) -> slice:
        lay = self.layout()
        return slice(lay[f"blocks.{l}.w_in"][0].start, lay[f"blocks.{l}.w_out"][0].stop)

    def unpack(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {k: flat[s].reshape(shape) for k, (s, shape) in self.layout().items()}


def _act(z, kind):
    if kind == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    return z, np.ones_like(z)


def init_params(dims: NetDims, rng: np.random.Generator) -> np.ndarray:
    V, D, H = dims.vocab, dims.width, dims.hidden
    flat = np.empty(dims.n_params)
    for name, (s, shape) in dims.layout().items():
        if name == "embed":
            std = 1.0
        elif name.endswith("w_in"):
            std = 1.0 / np.sqrt(D)
        elif name.endswith("w_out"):
            std = 1.0 / np.sqrt(H * dims.depth)
        else:
            std = 1.0 / np.sqrt(D)
        flat[s] = rng.normal(0.0, std, size=shape[0] * shape[1])
    return flat


def embed_tokens(dims: NetDims, flat: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    E = dims.unpack(flat)["embed"]
    tokens = np.asarray(tokens)
    return E[tokens[:, 0]] + E[tokens[:, 1]]


def run(dims: NetDims, flat: np.ndarray, h0: np.ndarray) -> tuple[np.ndarray, dict]:
    """Forward pass from residual-stream input ``h0`` (B x D)."""
    p = dims.unpack(flat)
    hs, zs, acts, outs = [h0], [], [], []
    h = h0
    for l in range(dims.depth):
        z = h @ p[f"blocks.{l}.w_in"].T
        a, da = _act(z, dims.activation)
        o = a @ p[f"blocks.{l}.w_out"].T
        zs.append(z)
        acts.append((a, da))
        outs.append(o)
        h = h + o
        hs.append(h)
    logits = h @ p["readout"]
    return logits, {"hs": hs, "zs": zs, "acts": acts, "outs": outs}


def backward(dims: NetDims, flat: np.ndarray, cache: dict, dlogits: np.ndarray,
             tokens: np.ndarray | None = None, node_grads: bool = False):
    """Backprop ``dlogits`` through a cached forward pass.

    Returns ``(grad_flat, dh0, mlp_input_grads)``. ``mlp_input_grads[l]`` is
    the gradient at block ``l``'s MLP input taken through the MLP path only
    (the residual skip excluded); it is collected when ``node_grads`` is set.
    Embedding gradients are filled only when ``tokens`` is given.
    """
    p = dims.unpack(flat)
    lay = dims.layout()
    grad = np.zeros(dims.n_params)
    hs = cache["hs"]

    def put(name, g):
        s, _ = lay[name]
        grad[s] += g.ravel()

    put("readout", hs[-1].T @ dlogits)
    dh = dlogits @ p["readout"].T
    node = [None] * dims.depth if node_grads else None
    for l in reversed(range(dims.depth)):
        a, dact = cache["acts"][l]
        w_in, w_out = p[f"blocks.{l}.w_in"], p[f"blocks.{l}.w_out"]
        put(f"blocks.{l}.w_out", dh.T @ a)
        dz = (dh @ w_out) * dact
        put(f"blocks.{l}.w_in", dz.T @ hs[l])
        d_in = dz @ w_in
        if node_grads:
            node[l] = d_in
        dh = dh + d_in
    if tokens is not None:
        tokens = np.asarray(tokens)
        gE = np.zeros((dims.vocab, dims.width))
        np.add.at(gE, tokens[:, 0], dh)
        np.add.at(gE, tokens[:, 1], dh)
        put("embed", gE)
    return grad, dh, node


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits_for(dims: NetDims, flat: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    return run(dims, flat, embed_tokens(dims, flat, tokens))[0]


def predict(dims: NetDims, flat: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index: ties go to the lowest token.
    return np.argmax(logits_for(dims, flat, tokens), axis=1)


# --------------------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    dims: NetDims
    params: np.ndarray
    reference: np.ndarray
    seed: int = 0
    step: int = 0
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        self.reference = np.asarray(self.reference, dtype=np.float64)
        if self.params.shape != (self.dims.n_params,) or self.reference.shape != self.params.shape:
            raise ValueError("params and reference must both have shape "
                             f"({self.dims.n_params},), got {self.params.shape} and {self.reference.shape}")

    def delta(self) -> np.ndarray:
        return self.params - self.reference

    def copy(self, **changes) -> "Checkpoint":
        base = dict(params=self.params.copy(), reference=self.reference.copy(), info=dict(self.info))
        base.update(changes)
        return replace(self, **base)

    def tensors(self, which: str = "params") -> dict[str, np.ndarray]:
        return self.dims.unpack(getattr(self, which))

    def fingerprint(self) -> str:
        import hashlib
        return hashlib.sha256(self.params.tobytes()).hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.dims == other.dims and self.seed == other.seed
                and np.array_equal(self.params, other.params)
                and np.array_equal(self.reference, other.reference))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Little-endian: header, params f64, reference f64, CRC-32 of everything before it."""
    d = ckpt.dims
    if d.activation != "tanh":
        raise ValueError("the checkpoint format only encodes tanh networks")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, d.vocab, d.width, d.hidden, d.depth, ckpt.seed)
    body = header + ckpt.params.astype("<f8").tobytes() + ckpt.reference.astype("<f8").tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise CheckpointFormatError(f"{path}: truncated checkpoint")
    magic, version, V, D, H, L, seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError(f"{path}: CRC mismatch")
    dims = NetDims(V, D, H, L)
    n = dims.n_params
    if len(body) != _HEADER.size + 16 * n:
        raise CheckpointFormatError(f"{path}: payload size does not match dims")
    arr = np.frombuffer(body, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return Checkpoint(dims, arr[:n].copy(), arr[n:].copy(), seed=seed)


# --------------------------------------------------------------------------- data


@dataclass(frozen=True)
class FactDataset:
    """(subject, relation, answer) triples with a forget/retain split.

    ``corrupted[j]`` is the clean/corrupted partner of forget fact
    ``forget_indices[j]``: same relation and length, different subject and answer.
    """

    facts: np.ndarray
    is_forget: np.ndarray
    corrupted: np.ndarray
    vocab: int
    seed: int

    @property
    def forget_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_forget)

    @property
    def retain_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.is_forget)

    def inputs(self, idx=None) -> np.ndarray:
        f = self.facts if idx is None else self.facts[np.asarray(idx)]
        return f[:, :2]

    def answers(self, idx=None) -> np.ndarray:
        f = self.facts if idx is None else self.facts[np.asarray(idx)]
        return f[:, 2]

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256(self.facts.tobytes() + self.is_forget.tobytes() + self.corrupted.tobytes())
        return h.hexdigest()[:16]


def vocab_layout(vocab: int) -> dict[str, np.ndarray]:
    if vocab < 16:
        raise ValueError("vocab must be at least 16")
    n_rel = max(2, vocab // 16)
    rest = vocab - 1 - n_rel
    n_subj = rest // 2
    relations = np.arange(1, 1 + n_rel)
    subjects = np.arange(1 + n_rel, 1 + n_rel + n_subj)
    answers = np.arange(1 + n_rel + n_subj, vocab)
    return {"relations": relations, "subjects": subjects, "answers": answers}


def generate_facts(seed: int, n_forget: int, n_retain: int, vocab: int) -> FactDataset:
    lay = vocab_layout(vocab)
    rel, subj, ans = lay["relations"], lay["subjects"], lay["answers"]
    available = len(rel) * len(subj)
    n = n_forget + n_retain
    if n_forget < 0 or n_retain < 0 or n > available:
        raise ValueError(f"cannot draw {n_forget}+{n_retain} distinct facts from {available}")
    rng = np.random.default_rng(seed)
    pairs = rng.choice(available, size=n, replace=False)
    facts = np.stack([subj[pairs // len(rel)], rel[pairs % len(rel)], rng.choice(ans, size=n)], axis=1)
    is_forget = np.zeros(n, dtype=bool)
    is_forget[:n_forget] = True

    corrupted = np.zeros((n_forget, 3), dtype=facts.dtype)
    for j in range(n_forget):
        s, r, a = facts[j]
        same_rel = [i for i in range(n) if i != j and facts[i, 1] == r and facts[i, 2] != a]
        pool = [i for i in same_rel if not is_forget[i]] or same_rel
        if pool:
            corrupted[j] = facts[pool[rng.integers(len(pool))]]
        else:
            # no partner in the dataset: invent an unseen subject with a different answer
            free = [t for t in subj if not np.any((facts[:, 0] == t) & (facts[:, 1] == r))]
            if not free:
                raise ValueError(f"no corrupted partner available for forget fact {j}")
            wrong = ans[ans != a]
            corrupted[j] = (free[rng.integers(len(free))], r, wrong[rng.integers(len(wrong))])
    return FactDataset(facts, is_forget, corrupted, vocab, seed)


# --------------------------------------------------------------------------- losses


def loss_and_grads(ckpt: Checkpoint, data: FactDataset, batch, objective: str,
                   params: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean loss over ``batch`` (fact indices) and its exact gradient.

    ``kl-to-reference`` is KL(p_reference || p_params) on the batch inputs.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("empty batch")
    theta = ckpt.params if params is None else params
    dims = ckpt.dims
    tokens = data.inputs(batch)
    B = len(batch)
    with np.errstate(over="raise", invalid="raise"):
        try:
            logits, cache = run(dims, theta, embed_tokens(dims, theta, tokens))
            logp = log_softmax(logits)
            prob = np.exp(logp)
            if objective == "kl-to-reference":
                ref_logp = log_softmax(logits_for(dims, ckpt.reference, tokens))
                ref_p = np.exp(ref_logp)
                loss = float(np.sum(ref_p * (ref_logp - logp)) / B)
                dlogits = (prob - ref_p) / B
            else:
                y = data.answers(batch)
                loss = float(-logp[np.arange(B), y].mean())
                dlogits = prob.copy()
                dlogits[np.arange(B), y] -= 1.0
                dlogits /= B
                if objective == "negated-cross-entropy":
                    loss, dlogits = -loss, -dlogits
            grad, _, _ = backward(dims, theta, cache, dlogits, tokens)
        except FloatingPointError as exc:
            raise NumericError(f"non-finite value in {objective} pass: {exc}") from exc
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite {objective} loss or gradient")
    return loss, grad


def accuracy(dims: NetDims, flat: np.ndarray, data: FactDataset, idx) -> float:
    idx = np.asarray(idx)
    if idx.size == 0:
        return float("nan")
    return float(np.mean(predict(dims, flat, data.inputs(idx)) == data.answers(idx)))


# --------------------------------------------------------------------------- training


def train_base(dims: NetDims, data: FactDataset, steps: int = 600, lr: float = 1e-2,
               seed: int = 0, target_loss: float | None = 0.05) -> Checkpoint:
    """Full-batch Adam on cross-entropy over every fact; returns theta^(0).

    Stops early once the mean loss is at most ``target_loss`` and every fact is
    answered correctly. A saturated base leaves gradient ascent with vanishing
    gradients, so the default stops well short of zero loss.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not lr > 0:
        raise ValueError("lr must be positive")
    rng = np.random.default_rng(seed)
    theta = init_params(dims, rng)
    ckpt = Checkpoint(dims, theta, theta.copy(), seed=seed)
    every = np.arange(len(data.facts))
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    done = 0
    for t in range(1, steps + 1):
        try:
            loss, g = loss_and_grads(ckpt, data, every, "cross-entropy", params=theta)
        except NumericError as exc:
            raise TrainingError("base training diverged", step=t) from exc
        if target_loss is not None and loss <= target_loss and accuracy(dims, theta, data, every) == 1.0:
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        if not np.all(np.isfinite(theta)):
            raise TrainingError("base training produced non-finite weights", step=t)
        done = t
    out = Checkpoint(dims, theta, theta.copy(), seed=seed, step=done)
    out.info.update(
        final_loss=loss,
        forget_acc=accuracy(dims, theta, data, data.forget_indices),
        retain_acc=accuracy(dims, theta, data, data.retain_indices),
    )
    return out
