"""Simulated NF4 quantization: codebook, nearest-level rounding, bin geometry.

Values are quantized, not packed: every function returns float64 arrays that
hold ``scale * level``. Double quantization and block-wise scale groups are
intentionally absent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Published 4-decimal NF4 levels, normalized to [-1, 1].
NF4_LEVELS = (
    -1.0000, -0.6962, -0.5251, -0.3949,
    -0.2844, -0.1848, -0.0911, 0.0000,
    0.0796, 0.1609, 0.2461, 0.3379,
    0.4407, 0.5626, 0.7230, 1.0000,
)

MIN_SPACING = 0.0796
SCALE_CLAMP = 1e-12

POLICIES = ("absmax-per-channel", "absmax-per-tensor")


@dataclass(frozen=True)
class Nf4Codebook:
    levels: np.ndarray
    spacings: np.ndarray = field(init=False)
    midpoints: np.ndarray = field(init=False)

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.float64)
        if levels.shape != (16,) or np.any(np.diff(levels) <= 0):
            raise ValueError("NF4 codebook needs 16 strictly increasing levels")
        levels.setflags(write=False)
        spacings = np.diff(levels)
        spacings.setflags(write=False)
        mids = (levels[:-1] + levels[1:]) / 2.0
        mids.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "spacings", spacings)
        object.__setattr__(self, "midpoints", mids)

    @property
    def min_spacing(self) -> float:
        return float(self.spacings.min())

    @property
    def max_spacing(self) -> float:
        return float(self.spacings.max())

    def nearest_index(self, u):
        """Index of the nearest level to normalized value(s) ``u``.

        Exact midpoints go to the level with the larger magnitude: for a
        positive midpoint that is the upper level, for a negative one the lower.
        """
        u = np.asarray(u, dtype=np.float64)
        up = np.searchsorted(self.midpoints, u, side="right")
        down = np.searchsorted(self.midpoints, u, side="left")
        return np.where(u >= 0, up, down)

    def bin_index(self, u):
        """Index k of the level interval [q_k, q_{k+1}) holding ``u`` (clipped to 0..14)."""
        u = np.asarray(u, dtype=np.float64)
        k = np.searchsorted(self.levels, u, side="right") - 1
        return np.clip(k, 0, 14)


def build_codebook() -> Nf4Codebook:
    return Nf4Codebook(np.array(NF4_LEVELS))


CODEBOOK = build_codebook()


def _check_scale(scale):
    s = np.asarray(scale, dtype=np.float64)
    if np.any(~(s > 0)):
        raise ValueError(f"scale must be positive, got {scale!r}")
    return s


def quantize(value, scale, codebook: Nf4Codebook = CODEBOOK):
    """Round ``value / scale`` to the nearest level and rescale.

    Works elementwise on arrays (``scale`` broadcasts). Scalars in, float out.
    """
    s = _check_scale(scale)
    v = np.asarray(value, dtype=np.float64)
    out = codebook.levels[codebook.nearest_index(v / s)] * s
    return float(out) if out.ndim == 0 else out


def channel_scales(weights: np.ndarray, policy: str = "absmax-per-channel", diagnostics: list | None = None):
    """Absmax scales, one per row (``absmax-per-channel``) or one for the tensor.

    Zero rows get ``SCALE_CLAMP``; their indices are appended to ``diagnostics``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if w.ndim == 1:
        w = w[None, :]
    if policy == "absmax-per-channel":
        s = np.abs(w).max(axis=1)
    elif policy == "absmax-per-tensor":
        s = np.full(w.shape[0], np.abs(w).max())
    else:
        raise ValueError(f"unknown scale policy {policy!r}")
    zero = np.flatnonzero(s == 0)
    if zero.size:
        if diagnostics is not None:
            diagnostics.extend(int(i) for i in zero)
        s = np.where(s == 0, SCALE_CLAMP, s)
    return s


def quantize_tensor(weights, policy: str = "absmax-per-channel", diagnostics: list | None = None,
                    codebook: Nf4Codebook = CODEBOOK):
    """Quantize a matrix row by row. Returns ``(quantized, scales)``."""
    w = np.asarray(weights, dtype=np.float64)
    scales = channel_scales(w, policy, diagnostics)
    w2 = w if w.ndim == 2 else w[None, :]
    q = quantize(w2, scales[:, None], codebook)
    return q.reshape(w.shape), scales


def bin_width(value, scale, codebook: Nf4Codebook = CODEBOOK):
    """Width (in weight units) of the level interval containing ``value / scale``."""
    s = _check_scale(scale)
    k = codebook.bin_index(np.asarray(value, dtype=np.float64) / s)
    out = codebook.spacings[k] * s
    return float(out) if np.ndim(out) == 0 else out


def rounding_cell(value, scale, codebook: Nf4Codebook = CODEBOOK):
    """Interval ``(lo, hi)`` of normalized values that round to the same level as ``value``.

    The two outermost cells are open-ended; their outer edge is reported as +-inf.
    """
    s = _check_scale(scale)
    i = codebook.nearest_index(np.asarray(value, dtype=np.float64) / s)
    mids = np.concatenate(([-np.inf], codebook.midpoints, [np.inf]))
    return mids[i], mids[i + 1]


def survives_quantization(theta, delta, scale, codebook: Nf4Codebook = CODEBOOK):
    """True where the update changes the quantized value of ``theta``."""
    before = quantize(theta, scale, codebook)
    after = quantize(np.asarray(theta, dtype=np.float64) + delta, scale, codebook)
    out = np.asarray(before) != np.asarray(after)
    return bool(out) if out.ndim == 0 else out


def crossing_count(theta, delta, scale, codebook: Nf4Codebook = CODEBOOK):
    """Number of codebook levels strictly between ``theta/scale`` and ``(theta+delta)/scale``."""
    s = _check_scale(scale)
    a = np.asarray(theta, dtype=np.float64) / s
    b = (np.asarray(theta, dtype=np.float64) + delta) / s
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    n = np.searchsorted(codebook.levels, hi, side="left") - np.searchsorted(codebook.levels, lo, side="right")
    n = np.maximum(n, 0)
    return int(n) if n.ndim == 0 else n


def amplifies(theta, delta, scale, codebook: Nf4Codebook = CODEBOOK):
    """|Q(theta + delta) - theta| >= |delta|: quantization did not shrink the displacement."""
    moved = quantize(np.asarray(theta, dtype=np.float64) + delta, scale, codebook)
    out = np.abs(np.asarray(moved) - theta) >= np.abs(delta)
    return bool(out) if out.ndim == 0 else out
