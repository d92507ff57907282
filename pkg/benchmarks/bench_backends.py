"""Compare the numba kernels against the plain-numpy fallbacks.

Run:  python benchmarks/bench_backends.py

Both kernel flavors are imported side by side, so this does not depend on
the NESTED_EIG_BACKEND flag; it reports per-call times and a full
estimator run under each backend via subprocesses.
"""

import os
import subprocess
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from nested_eig import kernels  # noqa: E402
from nested_eig.backend import NUMBA_AVAILABLE  # noqa: E402


def bench(fn, *args, repeat=2000):
    fn(*args)  # warm any jit compilation
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat * 1e6  # microseconds


def kernel_table():
    rng = np.random.default_rng(0)
    xis = 0.94 * 1.25 ** np.arange(15)
    TH = np.abs(rng.normal(1.0, 0.2, size=(200, 2))) + 0.05
    PH = np.abs(rng.normal(20.0, 2.0, size=(200, 1)))
    WG = rng.normal(size=(200, 15))
    wsum = rng.normal(size=15)
    logw = rng.normal(size=200)
    L = np.linalg.cholesky(np.eye(15) * 0.01)

    pairs = [
        ("pk_forward_batch(200)", kernels.pk_forward_batch_np, kernels.pk_forward_batch_nb,
         (xis, TH, PH, 400.0)),
        ("pk_forward_one", kernels.pk_forward_one_np, kernels.pk_forward_one_nb,
         (xis, 1.0, 0.1, 20.0, 400.0)),
        ("pk_jacobian", kernels.pk_jacobian_np, kernels.pk_jacobian_nb,
         (xis, 1.0, 0.1, 20.0, 400.0)),
        ("ex1_forward_batch(200)", kernels.ex1_forward_batch_np, kernels.ex1_forward_batch_nb,
         (0.5, TH, PH)),
        ("residual_quads(200)", kernels.residual_quads_np, kernels.residual_quads_nb,
         (WG, wsum, 123.4, 1.0)),
        ("solve_lower_rows(200)", kernels.solve_lower_rows_np, kernels.solve_lower_rows_nb,
         (L, WG)),
        ("logmeanexp(200)", kernels.logmeanexp_np, kernels.logmeanexp_nb, (logw,)),
    ]
    print(f"{'kernel':28s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name, f_np, f_nb, args in pairs:
        t_np = bench(f_np, *args)
        if NUMBA_AVAILABLE:
            t_nb = bench(f_nb, *args)
            print(f"{name:28s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:7.1f}x")
        else:
            print(f"{name:28s} {t_np:10.2f} {'n/a':>10s} {'-':>8s}")


END_TO_END = r"""
import time
import numpy as np
import nested_eig as ne
m, p = ne.make_example1()
ne.dlmc(m, p, [0.5], 10, 8, 8, seed=0)  # warm
t0 = time.perf_counter()
r = ne.dlmc(m, p, [0.5], 2000, 64, 64, seed=1)
t1 = time.perf_counter()
r2 = ne.dlmc2is(m, p, [0.5], 1000, 2, 2, seed=1)
t2 = time.perf_counter()
print("  dlmc    2000x(64+64): %6.2f s  (estimate %.4f)" % (t1 - t0, r.estimate))
print("  dlmc2is 1000x(2+2):   %6.2f s  (estimate %.4f)" % (t2 - t1, r2.estimate))
"""


def end_to_end():
    for backend in ("numpy", "numba") if NUMBA_AVAILABLE else ("numpy",):
        env = dict(os.environ, NESTED_EIG_BACKEND=backend)
        env["PYTHONPATH"] = os.path.join(os.path.dirname(__file__), "..", "src")
        print(f"backend = {backend}")
        subprocess.run([sys.executable, "-c", END_TO_END], env=env, check=True)


if __name__ == "__main__":
    print("kernel micro-benchmarks")
    kernel_table()
    print()
    print("estimator end-to-end (per backend)")
    end_to_end()
