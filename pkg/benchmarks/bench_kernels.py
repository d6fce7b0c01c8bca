"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both backends are checked for agreement on every input before timing.
"""
import argparse
import timeit

import numpy as np

from perceptual_se import _kernels
from perceptual_se._kernels import fallback


def _ctc_inputs(rng, t=150, n=41, u=30):
    logits = rng.normal(size=(t, n))
    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return lp, list(rng.integers(1, n, size=u))


def _edit_inputs(rng, n=60):
    return list(rng.integers(1, 40, size=n)), list(rng.integers(1, 40, size=n + 5))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if _kernels.BACKEND != "cython":
        print("compiled backend unavailable; nothing to compare")
        return
    from perceptual_se._kernels import _core
    rng = np.random.default_rng(0)
    lp, target = _ctc_inputs(rng)
    hyp, ref = _edit_inputs(rng)

    ca, cb = _core.ctc_forward_backward(lp, target), fallback.ctc_forward_backward(lp, target)
    assert abs(ca[0] - cb[0]) < 1e-9 and np.allclose(ca[1], cb[1], atol=1e-9)
    ea, eb = _core.edit_alignment(hyp, ref), fallback.edit_alignment(hyp, ref)
    assert ea[0] == eb[0] and np.array_equal(ea[1], eb[1])

    cases = [("ctc T=150 N=41 U=30", lambda m: m.ctc_forward_backward(lp, target)),
             ("edit alignment 60x65", lambda m: m.edit_alignment(hyp, ref))]
    print(f"{'kernel':<24}{'cython ms':>12}{'python ms':>12}{'speedup':>10}")
    for name, fn in cases:
        fast = min(timeit.repeat(lambda: fn(_core), number=1, repeat=args.repeat)) * 1e3
        slow = min(timeit.repeat(lambda: fn(fallback), number=1, repeat=max(3, args.repeat // 4))) * 1e3
        print(f"{name:<24}{fast:>12.3f}{slow:>12.3f}{slow / fast:>9.1f}x")


if __name__ == "__main__":
    main()
