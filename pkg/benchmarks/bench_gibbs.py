"""Benchmark the compiled spin-sweep kernel against the pure-Python fallback.

The site scan is the one sequential hot loop in the package (everything
else is BLAS/sparse-solver bound), and both implementations are bit
identical by construction, so this compares speed only.

Run:  python benchmarks/bench_gibbs.py
"""

import time

import numpy as np

from vbdesign import _ising_py, topo_prior
from vbdesign.mesh_fem import build_regular_mesh
from vbdesign.topo_prior import build_neighbor_graph

try:
    from vbdesign import _ising_kernel
except ImportError:
    _ising_kernel = None


def time_kernel(sweep_fn, phi, nb, drive, log_us, beta=-0.5):
    t0 = time.perf_counter()
    for lu in log_us:
        sweep_fn(phi, nb, drive, beta, lu)
    return time.perf_counter() - t0


def main():
    print(f"compiled kernel available: {_ising_kernel is not None}")
    rng = np.random.default_rng(0)
    for nx, ny, sweeps in ((12, 8, 500), (52, 34, 500)):
        mesh = build_regular_mesh(nx, ny, 1.6, 1.0)
        nb = build_neighbor_graph(mesh)
        d = mesh.n_elements
        drive = rng.standard_normal(d)
        log_us = [np.log(rng.random(d)) for _ in range(sweeps)]

        phi_py = rng.choice(np.array([-1, 1], dtype=np.int8), d)
        results = {}
        phi0 = phi_py.copy()
        results["pure-python"] = time_kernel(_ising_py.sweep_spins, phi_py, nb,
                                             drive, log_us)
        if _ising_kernel is not None:
            phi_c = phi0.copy()
            results["compiled"] = time_kernel(_ising_kernel.sweep_spins, phi_c, nb,
                                              drive, log_us)
            assert np.array_equal(phi_py, phi_c), "kernels diverged"

        rate = {k: sweeps * d / v / 1e6 for k, v in results.items()}
        line = f"{d:5d} sites x {sweeps} sweeps: "
        line += "  ".join(f"{k}: {v:.3f}s ({rate[k]:.1f}M site-updates/s)"
                          for k, v in results.items())
        if len(results) == 2:
            line += f"  speedup x{results['pure-python'] / results['compiled']:.0f}"
        print(line)

    # one full estimate at production settings
    mesh = build_regular_mesh(52, 34, 1.6, 1.0)
    nb = build_neighbor_graph(mesh)
    mu = rng.standard_normal(mesh.n_elements) * 3
    st = topo_prior.new_state(nb, mu)
    t0 = time.perf_counter()
    topo_prior.estimate_phi_mean(st, mu, 500, 100, np.random.default_rng(1))
    print(f"estimate_phi_mean(500 sweeps, 52x34 grid, selected kernel): "
          f"{time.perf_counter() - t0:.2f}s")


if __name__ == "__main__":
    main()
