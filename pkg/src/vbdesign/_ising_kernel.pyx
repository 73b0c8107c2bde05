# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled raster-scan site update for the bimodal spin prior.

Semantics match vbdesign._ising_py.sweep_spins exactly: same scan order,
same flip rule, same float arithmetic, so both kernels produce identical
spin trajectories from identical inputs.
"""


def sweep_spins(signed char[::1] phi, const int[:, ::1] neighbors,
                const double[::1] drive, double beta,
                const double[::1] log_u):
    cdef Py_ssize_t d = phi.shape[0]
    cdef Py_ssize_t j, k
    cdef int nb
    cdef double ssum, delta
    for j in range(d):
        ssum = 0.0
        for k in range(3):
            nb = neighbors[j, k]
            if nb >= 0:
                ssum = ssum + phi[nb]
        delta = -2.0 * phi[j] * (drive[j] - beta * ssum)
        if log_u[j] < delta:
            phi[j] = -phi[j]
