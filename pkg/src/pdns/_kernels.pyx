# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MCMC kernels. Semantics mirror ``_kernels_py`` exactly."""
import numpy as np
cimport numpy as cnp

ctypedef cnp.int8_t i8
ctypedef cnp.int64_t i64


def mh_sweeps(i8[:, ::1] x, i64[:, ::1] nbr, i64[:, :, ::1] site, i64[:, :, ::1] prop,
              double[:, :, ::1] u, double[::1] accept_table, int offset, int potts):
    """Single-site Metropolis updates, ``site/prop/u`` shaped (sweeps, chains, proposals).

    ``accept_table[offset + k]`` is ``min(1, exp(-beta J k'))`` for the integer
    energy change ``k`` measured in units of ``J`` (Ising: spin product units).
    """
    cdef Py_ssize_t S = site.shape[0], C = site.shape[1], P = site.shape[2]
    cdef Py_ssize_t D = nbr.shape[1]
    cdef Py_ssize_t s, c, p, j
    cdef i64 i, nb, k
    cdef int a, b, xn
    cdef long accepted = 0
    for s in range(S):
        for c in range(C):
            for p in range(P):
                i = site[s, c, p]
                a = x[c, i]
                if potts:
                    b = <int>prop[s, c, p]
                else:
                    b = 1 - a
                k = 0
                for j in range(D):
                    nb = nbr[i, j]
                    if nb < 0:
                        break
                    xn = x[c, nb]
                    if potts:
                        k += (b == xn) - (a == xn)
                    else:
                        k += ((2 * b - 1) - (2 * a - 1)) * (2 * xn - 1)
                # dV = -J k
                if u[s, c, p] < accept_table[offset + k]:
                    x[c, i] = b
                    accepted += 1
    return accepted


cdef inline i64 _find(i64* parent, i64 i) nogil:
    cdef i64 r = i
    while parent[r] != r:
        r = parent[r]
    cdef i64 nxt
    while parent[i] != r:
        nxt = parent[i]
        parent[i] = r
        i = nxt
    return r


def sw_sweeps(i8[:, ::1] x, i64[:, ::1] edges, double[:, :, ::1] bond_u,
              i64[:, :, ::1] newval, double p_bond):
    """Swendsen-Wang sweeps; each cluster takes ``newval`` at its smallest site index."""
    cdef Py_ssize_t S = bond_u.shape[0], C = bond_u.shape[1], E = edges.shape[0]
    cdef Py_ssize_t n = x.shape[1]
    cdef Py_ssize_t s, c, e, i
    cdef i64 a, b, ra, rb
    parent_arr = np.empty(n, dtype=np.int64)
    cdef i64[::1] parent = parent_arr
    for s in range(S):
        for c in range(C):
            for i in range(n):
                parent[i] = i
            for e in range(E):
                a = edges[e, 0]
                b = edges[e, 1]
                if x[c, a] == x[c, b] and bond_u[s, c, e] < p_bond:
                    ra = _find(&parent[0], a)
                    rb = _find(&parent[0], b)
                    if ra < rb:
                        parent[rb] = ra
                    elif rb < ra:
                        parent[ra] = rb
            for i in range(n):
                x[c, i] = <i8>newval[s, c, _find(&parent[0], i)]
