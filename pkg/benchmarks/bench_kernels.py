"""Time every compiled kernel against its numpy twin, plus one router
training step end to end.

    python benchmarks/bench_kernels.py [--repeat 20]

The backend is switched through ROBUMTL_NUMBA, exactly as a user would.
"""

import argparse
import os
import timeit

import numpy as np

from robumtl import _kernels as K
from robumtl import tensor as T
from robumtl.router import DmlsNet
from robumtl.tensor import Tape


def cases(rng):
    x = rng.normal(size=(32, 16, 34, 34)).astype(np.float32)
    cols = K.im2col_numpy(x, 3, 1, 32, 32)
    dw = rng.normal(size=(16, 3, 3)).astype(np.float32)
    g = rng.normal(size=(32, 16, 32, 32)).astype(np.float32)
    pool_in = rng.normal(size=(32, 16, 64, 64)).astype(np.float32)
    _, arg = K.maxpool_forward_numpy(pool_in, 2)
    pool_g = rng.normal(size=(32, 16, 32, 32)).astype(np.float32)
    n = 400
    seg = (rng.uniform(0, 64, n), rng.uniform(0, 64, n), np.deg2rad(rng.uniform(60, 80, n)))
    disks = (rng.uniform(0, 64, n), rng.uniform(0, 64, n))
    return {
        "im2col 32x16x34x34 k3": lambda: K.im2col(x, 3, 1, 32, 32),
        "col2im 32x16x34x34 k3": lambda: K.col2im(cols, x.shape, 3, 1, 32, 32),
        "depthwise fwd": lambda: K.depthwise_forward(x, dw, 1, 32, 32),
        "depthwise bwd": lambda: K.depthwise_backward(x, dw, g, 1),
        "maxpool fwd 32x16x64x64": lambda: K.maxpool_forward(pool_in, 2),
        "maxpool bwd": lambda: K.maxpool_backward(pool_g, arg, pool_in.shape, 2),
        "raster 400 segments": lambda: K.raster_segments(64, 64, *seg, 8),
        "raster 400 disks": lambda: K.raster_disks(64, 64, *disks, 1.5),
    }


def router_step(rng):
    net = DmlsNet(seed=0)
    for p in net.params.values():
        p.requires_grad = True
    imgs = rng.uniform(size=(32, 3, 64, 64)).astype(np.float32)
    labels = rng.integers(0, 6, 32)

    def step():
        with Tape() as tape:
            tape.backward(T.cross_entropy(net.logits(imgs), labels))
        for p in net.params.values():
            p.grad = None

    return step


def best_of(fn, repeat):
    fn()  # warm-up, triggers compilation on the numba path
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K.numba_enabled() and os.environ.get("ROBUMTL_NUMBA") is None:
        print("numba is not importable; only the numpy path can run")
    rng = np.random.default_rng(0)
    work = cases(rng)
    work["router train step (batch 32)"] = router_step(rng)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in work.items():
        times = {}
        for flag in ("0", "1"):
            os.environ["ROBUMTL_NUMBA"] = flag
            times[flag] = best_of(fn, args.repeat) * 1e3
        print(f"{name:32s} {times['0']:10.2f} {times['1']:10.2f} {times['0'] / times['1']:7.2f}x")
    os.environ.pop("ROBUMTL_NUMBA", None)


if __name__ == "__main__":
    main()
