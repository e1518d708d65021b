"""Benchmark the compiled kernels against the numpy fallback.

Run with `python -m occnet.bench`. Shapes mirror the training hot path
(batch x 32 x 32 x 32 features). The results justify the `auto` backend
policy in backend.py: BLAS tap-GEMM convolution vs direct compiled
loops, and compiled vs numpy pooling/LRN.
"""

import time

import numpy as np

from . import kernels_numpy as knp

try:
    from . import _kernels as kc
except ImportError:
    kc = None


def _time(fn, *args, repeat=3):
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(batch=100, size=32, channels=32, dtype=np.float32):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, size, size, channels)).astype(dtype)
    k = rng.standard_normal((3, 3, channels, channels)).astype(dtype)
    bias = np.zeros(channels, dtype=dtype)
    gout = rng.standard_normal((batch, size, size, channels)).astype(dtype)
    mask = knp.maxpool2x2_fwd(x)[1]
    gpool = rng.standard_normal((batch, size // 2, size // 2, channels)).astype(dtype)
    denom = knp.lrn_fwd(x, 2, 2.0, 1e-4, 0.75)[1]

    cases = [
        ("conv2d fwd", knp.conv2d_fwd, (x, k, bias),
         kc.conv2d_fwd if kc else None, (np.ascontiguousarray(x), k, bias)),
        ("conv2d bwd", knp.conv2d_bwd, (x, k, gout),
         kc.conv2d_bwd if kc else None, (np.ascontiguousarray(x), k, np.ascontiguousarray(gout))),
        ("maxpool fwd", knp.maxpool2x2_fwd, (x,),
         kc.maxpool2x2_fwd if kc else None, (np.ascontiguousarray(x),)),
        ("maxpool bwd", knp.maxpool2x2_bwd, (gpool, mask),
         kc.maxpool2x2_bwd if kc else None,
         (np.ascontiguousarray(gpool), np.ascontiguousarray(mask))),
        ("lrn fwd", lambda a: knp.lrn_fwd(a, 2, 2.0, 1e-4, 0.75), (x,),
         (lambda a: kc.lrn_fwd(a, 2, 2.0, 1e-4, 0.75)) if kc else None,
         (np.ascontiguousarray(x),)),
        ("lrn bwd", lambda a, d, g: knp.lrn_bwd(a, d, g, 2, 2.0, 1e-4, 0.75), (x, denom, gout),
         (lambda a, d, g: kc.lrn_bwd(a, d, g, 2, 2.0, 1e-4, 0.75)) if kc else None,
         (np.ascontiguousarray(x), np.ascontiguousarray(denom), np.ascontiguousarray(gout))),
    ]
    print(f"shapes: input {x.shape}, kernel {k.shape}, dtype {np.dtype(dtype).name}")
    print(f"{'kernel':<12} {'numpy':>10} {'compiled':>10}  winner")
    for name, f_np, a_np, f_c, a_c in cases:
        t_np = _time(f_np, *a_np)
        if f_c is None:
            print(f"{name:<12} {t_np * 1e3:>8.2f}ms {'n/a':>10}  numpy (extension not built)")
            continue
        t_c = _time(f_c, *a_c)
        winner = "compiled" if t_c < t_np else "numpy"
        print(f"{name:<12} {t_np * 1e3:>8.2f}ms {t_c * 1e3:>8.2f}ms  {winner} "
              f"({max(t_np, t_c) / min(t_np, t_c):.1f}x)")


if __name__ == "__main__":
    main()
