# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: score sweep, nearest-site scan, hit lumping.

The pure fallbacks in _pure.py implement the same contracts.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport asin, cos, sin, sqrt

cnp.import_array()

cdef double EARTH_RADIUS_M = 6371000.0
cdef double DEG = 0.017453292519943295  # pi / 180


def sweep_labels(cnp.float64_t[::1] scores, double caliper):
    cdef Py_ssize_t n = scores.shape[0]
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] labels = out
    if n == 0:
        return out
    cdef Py_ssize_t idx
    cdef cnp.int64_t label = 0
    cdef double anchor = scores[0]
    cdef double s
    if caliper < 0.0:
        for idx in range(n):
            s = scores[idx]
            if s != anchor:
                label += 1
                anchor = s
            labels[idx] = label
    else:
        for idx in range(n):
            s = scores[idx]
            if s > anchor + caliper:
                label += 1
                anchor = s
            labels[idx] = label
    return out


cdef inline double _haversine(double lat1, double lon1, double lat2, double lon2) nogil:
    cdef double p1 = lat1 * DEG
    cdef double p2 = lat2 * DEG
    cdef double sdp = sin((p2 - p1) / 2.0)
    cdef double sdl = sin((lon2 - lon1) * DEG / 2.0)
    cdef double a = sdp * sdp + cos(p1) * cos(p2) * sdl * sdl
    if a < 0.0:
        a = 0.0
    elif a > 1.0:
        a = 1.0
    return 2.0 * EARTH_RADIUS_M * asin(sqrt(a))


def nearest_site(
    cnp.float64_t[::1] q_lat,
    cnp.float64_t[::1] q_lon,
    cnp.int64_t[::1] group_start,
    cnp.int64_t[::1] cand_start,
    cnp.int64_t[::1] cand_sites,
    cnp.float64_t[::1] site_lat,
    cnp.float64_t[::1] site_lon,
):
    cdef Py_ssize_t nq = q_lat.shape[0]
    idx_out = np.full(nq, -1, dtype=np.int64)
    dist_out = np.full(nq, np.inf, dtype=np.float64)
    cdef cnp.int64_t[::1] oi = idx_out
    cdef cnp.float64_t[::1] od = dist_out
    cdef Py_ssize_t g, q, c
    cdef cnp.int64_t q0, q1, c0, c1, site, best
    cdef double d, bestd, qla, qlo
    with nogil:
        for g in range(group_start.shape[0] - 1):
            q0 = group_start[g]
            q1 = group_start[g + 1]
            c0 = cand_start[g]
            c1 = cand_start[g + 1]
            if q1 == q0 or c1 == c0:
                continue
            for q in range(q0, q1):
                qla = q_lat[q]
                qlo = q_lon[q]
                bestd = od[q]
                best = -1
                for c in range(c0, c1):
                    site = cand_sites[c]
                    d = _haversine(qla, qlo, site_lat[site], site_lon[site])
                    if d < bestd:
                        bestd = d
                        best = site
                oi[q] = best
                od[q] = bestd
    return idx_out, dist_out


def lump_windows(
    cnp.int64_t[::1] times,
    cnp.float64_t[::1] weights,
    cnp.int64_t[::1] dev_start,
    cnp.int64_t delta_t,
    double threshold,
):
    cdef Py_ssize_t cap = times.shape[0]
    dev_out = np.empty(cap, dtype=np.int64)
    t_out = np.empty(cap, dtype=np.int64)
    w_out = np.empty(cap, dtype=np.float64)
    cdef cnp.int64_t[::1] vd = dev_out
    cdef cnp.int64_t[::1] vt = t_out
    cdef cnp.float64_t[::1] vw = w_out
    cdef Py_ssize_t dev, i, j, end, n = 0
    cdef cnp.int64_t t0
    cdef double total, peak, w
    for dev in range(dev_start.shape[0] - 1):
        i = dev_start[dev]
        end = dev_start[dev + 1]
        while i < end:
            t0 = times[i]
            total = 0.0
            peak = 0.0
            j = i
            while j < end and times[j] - t0 < delta_t:
                w = weights[j]
                total += w
                if w > peak:
                    peak = w
                j += 1
            if total > threshold:
                vd[n] = dev
                vt[n] = t0
                vw[n] = peak if peak < 1.0 else 1.0
                n += 1
            i = j
    return dev_out[:n].copy(), t_out[:n].copy(), w_out[:n].copy()
