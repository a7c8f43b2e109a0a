"""Print NF4 rounding-cell geometry next to the level spacings.

Nearest-level rounding assigns each level a cell bounded by the midpoints to
its neighbours. Interior cells are wider than the narrowest level interval,
which is why an update of one minimum spacing does not always move the
quantized value.
"""

import numpy as np

from mansu.nf4 import CODEBOOK, MIN_SPACING, survives_quantization


def main():
    lv, mids = CODEBOOK.levels, CODEBOOK.midpoints
    print(f"{'level':>8} {'cell lo':>8} {'cell hi':>8} {'width':>7}")
    for i, q in enumerate(lv):
        lo = mids[i - 1] if i > 0 else -np.inf
        hi = mids[i] if i < 15 else np.inf
        print(f"{q:8.4f} {lo:8.4f} {hi:8.4f} {hi - lo:7.4f}")
    print(f"\nmin level spacing {CODEBOOK.min_spacing:.4f}")

    rng = np.random.default_rng(0)
    n = 1_000_000
    theta = rng.uniform(-MIN_SPACING, MIN_SPACING, n)
    for top in (1.0, 1.1, 2.0):
        d = rng.uniform(MIN_SPACING, top * MIN_SPACING, n) if top > 1 else np.full(n, MIN_SPACING)
        d *= rng.choice([-1.0, 1.0], n)
        miss = 1 - survives_quantization(theta, d, 1.0).mean()
        print(f"|delta| in [1, {top}] x min spacing: erased in {miss:.3%} of narrow-region samples")


if __name__ == "__main__":
    main()
