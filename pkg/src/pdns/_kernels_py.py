"""Pure numpy versions of the compiled MCMC kernels (same inputs, same outputs)."""
import numpy as np


def mh_sweeps(x, nbr, site, prop, u, accept_table, offset, potts):
    S, C, P = site.shape
    rows = np.arange(C)
    valid = nbr >= 0
    accepted = 0
    for s in range(S):
        for p in range(P):
            i = site[s, :, p]
            a = x[rows, i].astype(np.int64)
            b = prop[s, :, p] if potts else 1 - a
            nb = nbr[i]
            ok = valid[i]
            xn = x[rows[:, None], np.where(ok, nb, 0)].astype(np.int64)
            if potts:
                contrib = (b[:, None] == xn).astype(np.int64) - (a[:, None] == xn)
            else:
                contrib = ((2 * b - 1) - (2 * a - 1))[:, None] * (2 * xn - 1)
            k = np.where(ok, contrib, 0).sum(1)
            acc = u[s, :, p] < accept_table[offset + k]
            x[rows[acc], i[acc]] = b[acc]
            accepted += int(acc.sum())
    return accepted


def sw_sweeps(x, edges, bond_u, newval, p_bond):
    S, C, _ = bond_u.shape
    n = x.shape[1]
    a, b = edges[:, 0], edges[:, 1]
    for s in range(S):
        open_ = (x[:, a] == x[:, b]) & (bond_u[s] < p_bond)
        labels = np.tile(np.arange(n, dtype=np.int64), (C, 1))
        ci, ei = np.nonzero(open_)
        ea, eb = a[ei], b[ei]
        # min-label propagation converges to the smallest site index per cluster
        while True:
            la, lb = labels[ci, ea], labels[ci, eb]
            m = np.minimum(la, lb)
            new = labels.copy()
            np.minimum.at(new, (ci, ea), m)
            np.minimum.at(new, (ci, eb), m)
            new = np.take_along_axis(new, new, axis=1)
            if np.array_equal(new, labels):
                break
            labels = new
        x[:] = np.take_along_axis(newval[s], labels, axis=1).astype(x.dtype)
