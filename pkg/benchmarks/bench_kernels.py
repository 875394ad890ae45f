"""Time the numba kernels against their numpy counterparts.

Usage: python benchmarks/bench_kernels.py [--n 128] [--repeat 5] [--end-to-end]

Kernel timings run in-process and also check that both paths agree. With
``--end-to-end`` a short integration is timed in two subprocesses, one with
``MAGNETOHOM_NUMBA=0``.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from magnetohom import _kernels as K
from magnetohom.fem import build_mesh

E2E_SNIPPET = """
import time, numpy as np
from magnetohom.fem import build_mesh, LameTensor
from magnetohom.fields import FieldSum, make_space_skew, make_spacetime_skew
from magnetohom.dynamics import DynamicProblem, integrate
m = build_mesh({n}); x = m.nodes
p = np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
fld = FieldSum((make_space_skew("sin_y1", 1 / 8), make_spacetime_skew(1.0, 1 / 8, "bump")))
prob = DynamicProblem(m, LameTensor(), fld, u0=np.column_stack([p, p]), u1=None, T=0.25)
t0 = time.perf_counter(); integrate(prob, store="none"); print(time.perf_counter() - t0)
"""


def cases(n):
    mesh = build_mesh(n)
    rng = np.random.default_rng(0)
    nodes, tris = mesh.nodes, mesh.triangles
    area, grads = K.p1_geometry_numpy(nodes, tris)
    u = rng.normal(size=(mesh.n_nodes, 2))
    v = rng.normal(size=(mesh.n_nodes, 2))
    blocks = rng.normal(size=(mesh.n_nodes, 2, 2))
    xs = rng.normal(size=(mesh.n_nodes, 2))
    return {
        "p1_geometry": ((nodes, tris), lambda r: r[1]),
        "elastic_element_matrices": ((area, grads, 1.0, 1.0), lambda r: r),
        "element_strains": ((grads, tris, u), lambda r: r),
        "energy_density": ((grads, tris, u, v, 1.0, 1.0), lambda r: r),
        "vertex_fraction_in_ball": ((nodes, tris, 0.5, 0.5, 0.3), lambda r: r),
        "block_apply": ((blocks, xs), lambda r: r),
    }


def bench_kernels(n, repeat):
    print(f"backend={K.BACKEND} mesh n={n}")
    if not K.NUMBA_AVAILABLE:
        print("numba unavailable or disabled: only numpy timings")
    print(f"{'kernel':28s} {'numpy [ms]':>12s} {'numba [ms]':>12s} {'speedup':>8s} {'max diff':>10s}")
    for name, (args, pick) in cases(n).items():
        f_np = getattr(K, f"{name}_numpy")
        t_np = min(timeit.repeat(lambda: f_np(*args), number=1, repeat=repeat)) * 1e3
        if K.NUMBA_AVAILABLE:
            f_nb = getattr(K, f"{name}_numba")
            f_nb(*args)  # compile
            t_nb = min(timeit.repeat(lambda: f_nb(*args), number=1, repeat=repeat)) * 1e3
            diff = float(np.max(np.abs(np.asarray(pick(f_nb(*args))) - np.asarray(pick(f_np(*args))))))
            print(f"{name:28s} {t_np:12.3f} {t_nb:12.3f} {t_np / t_nb:8.2f} {diff:10.2e}")
        else:
            print(f"{name:28s} {t_np:12.3f} {'-':>12s} {'-':>8s} {'-':>10s}")


def bench_end_to_end(n):
    for flag in ("1", "0"):
        env = dict(os.environ, MAGNETOHOM_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", E2E_SNIPPET.format(n=n)], env=env, capture_output=True,
                             text=True, check=True)
        print(f"integrate n={n} MAGNETOHOM_NUMBA={flag}: {float(out.stdout.strip()):.2f} s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.n, args.repeat)
    if args.end_to_end:
        bench_end_to_end(min(args.n, 64))


if __name__ == "__main__":
    main()
