"""Time the numba and numpy kernel backends on desk-scale shapes.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times one full training step of the desk Case3 network under the
active backend (set PERCEPT_AGE_JIT=0 to time the numpy path).
"""
import argparse
import time

import numpy as np

from percept_age import _kernels as K
from percept_age import tensor as T
from percept_age.architecture import build, forward


def best_of(fn, repeat):
    fn()  # warm-up (triggers JIT compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng, batch):
    # first desk conv block: 32x32x1 padded to 34x34, 3x3 kernel
    xp = rng.standard_normal((batch, 34, 34, 8))
    dcols = rng.standard_normal((batch, 32, 32, 9 * 8))
    x = rng.standard_normal((batch, 32, 32, 8))
    _, idx = K.IMPLEMENTATIONS["numpy"][2](x)
    g = rng.standard_normal((batch, 16, 16, 8))
    return {
        "im2col": lambda impl: impl[0](xp, 3, 3, 1, 32, 32),
        "col2im": lambda impl: impl[1](dcols, 34, 34, 3, 3, 1),
        "maxpool2_fwd": lambda impl: impl[2](x),
        "maxpool2_bwd": lambda impl: impl[3](g, idx),
    }


def train_step(batch, rng):
    _, params = build("case3", "desk", seed=0)
    for t in params.tensors.values():
        t.requires_grad = True
    imgs = rng.uniform(0, 1, (batch, 32, 32, 1))
    attrs = np.zeros((batch, 13))
    attrs[:, [0, 2, 5, 9]] = 1
    y = rng.uniform(0, 1, (batch, 1))

    def step():
        T.reset_tape()
        out = forward(params, imgs, attrs)
        T.backward(T.add(T.mse(out.apparent, y), T.mse(out.real, y)))

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    backends = ["numpy"] + (["numba"] if K.HAS_NUMBA else [])
    print(f"batch {args.batch}, best of {args.repeat}")
    print(f"{'kernel':<14}" + "".join(f"{b:>12}" for b in backends) + "     speedup")
    for name, fn in kernel_cases(rng, args.batch).items():
        t = {b: best_of(lambda: fn(K.IMPLEMENTATIONS[b]), args.repeat) for b in backends}
        speed = f"{t['numpy'] / t['numba']:10.1f}x" if "numba" in t else ""
        print(f"{name:<14}" + "".join(f"{t[b] * 1e3:10.3f}ms" for b in backends) + speed)

    step = best_of(train_step(args.batch, rng), max(3, args.repeat // 4))
    print(f"case3 desk train step (backend={K.BACKEND}): {step * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
