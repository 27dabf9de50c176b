"""Exact different-class nearest-neighbour search under l1.

Two arithmetic paths, chosen per call:

* codes: images that are exactly ``k/255`` are searched on their uint8
  codes with int32 accumulators. Integer sums are associative, so any
  blocking or thread count gives identical results.
* float: everything else accumulates ``|a_p - b_p|`` in float64, strictly
  left to right over pixels. Every kernel here uses that same order, so the
  numba and numpy paths agree bit for bit.

Ties go to the smallest reference index (references are scanned in
ascending order and only a strictly smaller sum replaces the incumbent).
"""
import numpy as np

from ._accel import USE_NUMBA, njit, prange

QUAD = 4
REF_BLOCK = 256
QUERY_BLOCK = 64
_INT_INF = np.iinfo(np.int64).max


def to_codes(x):
    """uint8 codes if every value of ``x`` is exactly ``k/255`` (float32), else None."""
    x = np.asarray(x)
    if x.dtype != np.float32:
        return None
    c = np.rint(x * np.float32(255.0))
    if c.size and (c.min() < 0 or c.max() > 255):
        return None
    codes = c.astype(np.uint8)
    if not np.array_equal(codes.astype(np.float32) / np.float32(255.0), x):
        return None
    return codes


# ---------------------------------------------------------------- pair kernels

@njit
def pair_sum_codes(a, b):
    s = 0
    for p in range(a.shape[0]):
        v = np.int32(a[p]) - np.int32(b[p])
        s += v if v >= 0 else -v
    return s


@njit
def pair_sum_float(a, b):
    s = 0.0
    for p in range(a.shape[0]):
        s += abs(np.float64(a[p]) - np.float64(b[p]))
    return s


def pair_sum_codes_np(a, b):
    return int(np.abs(a.astype(np.int32) - b.astype(np.int32)).sum())


def pair_sum_float_np(a, b):
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
    return float(np.cumsum(diff)[-1]) if diff.size else 0.0


# ---------------------------------------------------------------- naive (sequential)

@njit
def _naive_codes(Q, qlab, R, rlab, out_j, out_s):
    for i in range(Q.shape[0]):
        best = _INT_INF
        bj = -1
        for j in range(R.shape[0]):
            if rlab[j] == qlab[i]:
                continue
            s = pair_sum_codes(Q[i], R[j])
            if s < best:
                best = s
                bj = j
        out_j[i] = bj
        out_s[i] = best


@njit
def _naive_float(Q, qlab, R, rlab, out_j, out_s):
    for i in range(Q.shape[0]):
        best = np.inf
        bj = -1
        for j in range(R.shape[0]):
            if rlab[j] == qlab[i]:
                continue
            s = pair_sum_float(Q[i], R[j])
            if s < best:
                best = s
                bj = j
        out_j[i] = bj
        out_s[i] = best


def naive_search(Q, qlab, R, rlab, codes):
    """One query at a time, one reference at a time. Reference oracle."""
    nq = Q.shape[0]
    out_j = np.full(nq, -1, dtype=np.int64)
    if codes:
        out_s = np.full(nq, _INT_INF, dtype=np.int64)
        _naive_codes(Q, qlab, R, rlab, out_j, out_s)
    else:
        out_s = np.full(nq, np.inf, dtype=np.float64)
        _naive_float(Q, qlab, R, rlab, out_j, out_s)
    return out_j, out_s


# ---------------------------------------------------------------- blocked, numba

@njit(parallel=True)
def _blocked_codes_nb(Q, qlab, R, rlab, out_j, out_s):
    nq, d = Q.shape
    nr = R.shape[0]
    nblocks = (nq + QUERY_BLOCK - 1) // QUERY_BLOCK
    for blk in prange(nblocks):
        q0 = blk * QUERY_BLOCK
        q1 = min(q0 + QUERY_BLOCK, nq)
        best = np.full(q1 - q0, _INT_INF, dtype=np.int64)
        bj = np.full(q1 - q0, -1, dtype=np.int64)
        for r0 in range(0, nr, REF_BLOCK):
            r1 = min(r0 + REF_BLOCK, nr)
            for a in range(q0, q1, QUAD):
                if a + QUAD <= q1:
                    for j in range(r0, r1):
                        s0 = np.int32(0)
                        s1 = np.int32(0)
                        s2 = np.int32(0)
                        s3 = np.int32(0)
                        for p in range(d):
                            v = np.int32(R[j, p])
                            s0 += abs(np.int32(Q[a, p]) - v)
                            s1 += abs(np.int32(Q[a + 1, p]) - v)
                            s2 += abs(np.int32(Q[a + 2, p]) - v)
                            s3 += abs(np.int32(Q[a + 3, p]) - v)
                        lj = rlab[j]
                        k = a - q0
                        if lj != qlab[a] and s0 < best[k]:
                            best[k] = s0
                            bj[k] = j
                        if lj != qlab[a + 1] and s1 < best[k + 1]:
                            best[k + 1] = s1
                            bj[k + 1] = j
                        if lj != qlab[a + 2] and s2 < best[k + 2]:
                            best[k + 2] = s2
                            bj[k + 2] = j
                        if lj != qlab[a + 3] and s3 < best[k + 3]:
                            best[k + 3] = s3
                            bj[k + 3] = j
                else:
                    for i in range(a, q1):
                        for j in range(r0, r1):
                            if rlab[j] == qlab[i]:
                                continue
                            s = pair_sum_codes(Q[i], R[j])
                            if s < best[i - q0]:
                                best[i - q0] = s
                                bj[i - q0] = j
        for k in range(q1 - q0):
            out_s[q0 + k] = best[k]
            out_j[q0 + k] = bj[k]


@njit(parallel=True)
def _blocked_float_nb(Q, qlab, R, rlab, out_j, out_s):
    nq = Q.shape[0]
    nr = R.shape[0]
    nblocks = (nq + QUERY_BLOCK - 1) // QUERY_BLOCK
    for blk in prange(nblocks):
        q0 = blk * QUERY_BLOCK
        q1 = min(q0 + QUERY_BLOCK, nq)
        for r0 in range(0, nr, REF_BLOCK):
            r1 = min(r0 + REF_BLOCK, nr)
            for i in range(q0, q1):
                for j in range(r0, r1):
                    if rlab[j] == qlab[i]:
                        continue
                    s = pair_sum_float(Q[i], R[j])
                    if s < out_s[i]:
                        out_s[i] = s
                        out_j[i] = j


# ---------------------------------------------------------------- blocked, numpy

def _blocked_np(Q, qlab, R, rlab, out_j, out_s, codes):
    nq, d = Q.shape
    nr = R.shape[0]
    qb, rb = QUERY_BLOCK, 256
    if codes:
        Qw, Rw = Q.astype(np.int16), R.astype(np.int16)
    else:
        Qw, Rw = Q.astype(np.float64), R.astype(np.float64)
    for q0 in range(0, nq, qb):
        q1 = min(q0 + qb, nq)
        for r0 in range(0, nr, rb):
            r1 = min(r0 + rb, nr)
            if codes:
                S = np.abs(Qw[q0:q1, None, :] - Rw[None, r0:r1, :]).sum(axis=2, dtype=np.int64)
            else:
                # column by column keeps the left-to-right float64 order
                S = np.zeros((q1 - q0, r1 - r0))
                for p in range(d):
                    S += np.abs(Qw[q0:q1, p, None] - Rw[None, r0:r1, p])
            same = qlab[q0:q1, None] == rlab[None, r0:r1]
            S = np.where(same, np.inf if not codes else _INT_INF, S)
            k = S.argmin(axis=1)  # first minimum: smallest index among ties
            s = S[np.arange(q1 - q0), k]
            better = s < out_s[q0:q1]
            out_s[q0:q1] = np.where(better, s, out_s[q0:q1])
            out_j[q0:q1] = np.where(better, k + r0, out_j[q0:q1])


def blocked_search(Q, qlab, R, rlab, codes, use_numba=USE_NUMBA):
    nq = Q.shape[0]
    out_j = np.full(nq, -1, dtype=np.int64)
    if codes:
        out_s = np.full(nq, _INT_INF, dtype=np.int64)
    else:
        out_s = np.full(nq, np.inf, dtype=np.float64)
    if use_numba:
        kernel = _blocked_codes_nb if codes else _blocked_float_nb
        kernel(Q, qlab, R, rlab, out_j, out_s)
    else:
        _blocked_np(Q, qlab, R, rlab, out_j, out_s, codes)
    return out_j, out_s
