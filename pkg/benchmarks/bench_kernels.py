"""Time the numba and numpy kernel backends on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20] [--dim 16] [--clusters 1024]

Shapes follow one default training step: a (32, 96, H) batch through a k=3
conv, and 3072 latents against a K-entry codebook. Outputs of the two backends
are checked against each other before timing.
"""
import argparse
import timeit

import numpy as np

from repquant import kernels


def cases(dim, clusters, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((32, 96, dim)).astype(np.float32)
    w = (rng.standard_normal((dim, dim, 3)) * 0.1).astype(np.float32)
    b = np.zeros(dim, np.float32)
    gy = rng.standard_normal(x.shape).astype(np.float32)
    z = x.reshape(-1, dim)
    e = rng.standard_normal((clusters, dim)).astype(np.float32)
    idx = rng.integers(0, clusters, z.shape[0])
    return {
        "conv1d_forward": (x, w, b),
        "conv1d_backward": (gy, x, w),
        "nearest": (z, e),
        "cluster_stats": (z, idx, clusters),
    }


def _as_tuple(res):
    return res if isinstance(res, tuple) else (res,)


def check_agreement(backends, args):
    ref = backends["numpy"]
    for name, a in args.items():
        want = _as_tuple(getattr(ref, name)(*a))
        for label, mod in backends.items():
            for g, r in zip(_as_tuple(getattr(mod, name)(*a)), want):
                if g.dtype.kind in "iu":
                    assert np.array_equal(g, r), f"{label}.{name} disagrees"
                else:
                    np.testing.assert_allclose(g, r, rtol=1e-4, atol=1e-4, err_msg=f"{label}.{name}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--clusters", type=int, default=1024)
    opts = ap.parse_args()

    backends = {"numpy": kernels.numpy_backend}
    if kernels.numba_backend is not None:
        backends["numba"] = kernels.numba_backend
    else:
        print("numba not importable; timing the numpy path only")
    args = cases(opts.dim, opts.clusters)
    check_agreement(backends, args)  # also triggers jit compilation

    print(f"H={opts.dim} K={opts.clusters} best of {opts.repeat}, milliseconds")
    print(f"{'kernel':<18}" + "".join(f"{b:>10}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name, a in args.items():
        row = []
        for mod in backends.values():
            fn = getattr(mod, name)
            row.append(min(timeit.repeat(lambda: fn(*a), number=1, repeat=opts.repeat)) * 1e3)
        line = f"{name:<18}" + "".join(f"{t:>10.3f}" for t in row)
        if len(row) > 1:
            line += f"{row[0] / row[1]:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
