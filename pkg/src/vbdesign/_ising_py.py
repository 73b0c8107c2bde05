"""Pure-Python fallback for the spin-sweep kernel.

Kept bit-identical to the compiled version: same raster order, same flip
rule, same double-precision arithmetic.
"""


def sweep_spins(phi, neighbors, drive, beta, log_u):
    spins = phi.tolist()
    nbrs = neighbors.tolist()
    drv = drive.tolist()
    lu = log_u.tolist()
    for j in range(len(spins)):
        ssum = 0.0
        for nb in nbrs[j]:
            if nb >= 0:
                ssum += spins[nb]
        if lu[j] < -2.0 * spins[j] * (drv[j] - beta * ssum):
            spins[j] = -spins[j]
    phi[:] = spins
