# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: integrate-and-fire encoding and voxel ray marching.

Mirrors ``_pykernels`` exactly in signature. Ray rendering runs in parallel
across rays (read-only on the grid); the backward scatter is serial in ray
order so accumulated gradients never depend on the thread schedule.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, log1p, fabs, floor, tanh
from libc.stdlib cimport malloc, free

cnp.import_array()

NAME = "cython"


def encode_frames(double[:, ::1] frames, double[::1] state, double fire_level,
                  double phi, double clamp_level):
    cdef Py_ssize_t n = frames.shape[0], p = frames.shape[1], k, j
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] out = np.zeros((n, p), dtype=np.uint8)
    cdef unsigned char[:, ::1] bits = out
    cdef long clamped = 0
    cdef double a
    with nogil:
        for k in range(n):
            for j in range(p):
                a = state[j] + frames[k, j]
                if a > clamp_level:
                    clamped += 1
                    a = clamp_level
                if a >= fire_level:
                    bits[k, j] = 1
                    a = a - phi
                    if a < 0.0:
                        a = 0.0
                state[j] = a
    return out, clamped


cdef inline double softplus(double x) nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double sigmoid(double x) nogil:
    return 0.5 * (1.0 + tanh(0.5 * x))


cdef struct Grid:
    double* density
    double* color
    int res
    int nc
    double bmin[3]
    double bmax[3]
    double h[3]


cdef inline bint locate(Grid* g, double px, double py, double pz,
                        Py_ssize_t* base, double* f) nogil:
    """Trilinear base voxel and fractional offsets; False when outside the bbox."""
    cdef double p[3]
    cdef double u
    cdef int a, i0
    p[0] = px; p[1] = py; p[2] = pz
    for a in range(3):
        if p[a] < g.bmin[a] or p[a] > g.bmax[a]:
            return False
    for a in range(3):
        u = (p[a] - g.bmin[a]) / g.h[a] - 0.5
        if u < 0.0:
            u = 0.0
        elif u > g.res - 1:
            u = g.res - 1
        i0 = <int>floor(u)
        if i0 > g.res - 2:
            i0 = g.res - 2
        base[a] = i0
        f[a] = u - i0
    return True


cdef inline void corner_weights(double* f, double* w) nogil:
    cdef int dx, dy, dz, k = 0
    cdef double wx, wy
    for dx in range(2):
        wx = f[0] if dx else 1.0 - f[0]
        for dy in range(2):
            wy = f[1] if dy else 1.0 - f[1]
            for dz in range(2):
                w[k] = wx * wy * (f[2] if dz else 1.0 - f[2])
                k += 1


cdef inline Py_ssize_t corner_index(Grid* g, Py_ssize_t* base, int k) nogil:
    cdef int dx = (k >> 2) & 1, dy = (k >> 1) & 1, dz = k & 1
    return ((base[0] + dx) * g.res + (base[1] + dy)) * g.res + (base[2] + dz)


cdef inline double sample_t(double tn, double dt, double u, Py_ssize_t k) nogil:
    return tn + (k + u) * dt


cdef void march(Grid* g, double ox, double oy, double oz, double dxr, double dyr, double dzr,
                double tn, double tf, double* offs, int n, double* rgb, double* t_final,
                double* w_out, double* t_out,
                double* s_sigma, double* s_rawsig, double* s_col, double* s_trans,
                double* s_delta, Py_ssize_t* s_base, double* s_f, unsigned char* s_in) nogil:
    """Forward pass for one ray; optional per-sample scratch is filled when non-NULL."""
    cdef int c, k, q, nc = g.nc
    cdef double dt, t, t_next, delta, T = 1.0, e, alpha, w, raw, sigma, u, u_next, acc
    cdef double f[3]
    cdef double cw[8]
    cdef double col[16]
    cdef Py_ssize_t base[3]
    cdef Py_ssize_t cidx[8]
    cdef bint inside
    for c in range(nc):
        rgb[c] = 0.0
    if not (tf > tn):
        t_final[0] = 1.0
        if w_out != NULL:
            for k in range(n):
                w_out[k] = 0.0
                t_out[k] = 0.0
        if s_sigma != NULL:
            for k in range(n):
                s_in[k] = 0
                s_sigma[k] = 0.0
                s_trans[k] = 1.0
                s_delta[k] = 0.0
        return
    dt = (tf - tn) / n
    for k in range(n):
        u = 0.5 if offs == NULL else offs[k]
        t = sample_t(tn, dt, u, k)
        if k < n - 1:
            u_next = 0.5 if offs == NULL else offs[k + 1]
            t_next = sample_t(tn, dt, u_next, k + 1)
            delta = t_next - t
        else:
            delta = tf - t
        inside = locate(g, ox + t * dxr, oy + t * dyr, oz + t * dzr, base, f)
        sigma = 0.0
        raw = 0.0
        for c in range(nc):
            col[c] = 0.0
        if inside:
            corner_weights(f, cw)
            for q in range(8):
                cidx[q] = corner_index(g, base, q)
                raw = raw + cw[q] * g.density[cidx[q]]
            sigma = softplus(raw)
            for c in range(nc):
                acc = 0.0
                for q in range(8):
                    acc = acc + cw[q] * g.color[cidx[q] * nc + c]
                col[c] = sigmoid(acc)
        e = exp(-sigma * delta)
        alpha = 1.0 - e
        w = T * alpha
        for c in range(nc):
            rgb[c] += w * col[c]
        if w_out != NULL:
            w_out[k] = w
            t_out[k] = t
        if s_sigma != NULL:
            s_in[k] = inside
            s_sigma[k] = sigma
            s_rawsig[k] = raw
            s_trans[k] = T
            s_delta[k] = delta
            for c in range(nc):
                s_col[k * nc + c] = col[c]
            for q in range(3):
                s_base[k * 3 + q] = base[q]
                s_f[k * 3 + q] = f[q]
        T = T * e
    t_final[0] = T


cdef void fill_grid(Grid* g, double[:, :, ::1] density, double[:, :, :, ::1] color,
                    double[::1] bmin, double[::1] bmax):
    cdef int a
    g.density = &density[0, 0, 0]
    g.color = &color[0, 0, 0, 0]
    g.res = density.shape[0]
    g.nc = color.shape[3]
    for a in range(3):
        g.bmin[a] = bmin[a]
        g.bmax[a] = bmax[a]
        g.h[a] = (bmax[a] - bmin[a]) / g.res


def render_forward(double[:, :, ::1] density, double[:, :, :, ::1] color,
                   double[::1] bmin, double[::1] bmax,
                   double[:, ::1] origins, double[:, ::1] dirs,
                   double[::1] tnear, double[::1] tfar, offsets, int n_samples,
                   bint want_weights=False, int n_threads=1):
    cdef Grid g
    fill_grid(&g, density, color, bmin, bmax)
    if g.nc > 16:
        raise ValueError("at most 16 color channels are supported")
    cdef Py_ssize_t m = origins.shape[0], i
    rgb_arr = np.zeros((m, g.nc), dtype=np.float64)
    tf_arr = np.ones(m, dtype=np.float64)
    cdef double[:, ::1] rgb = rgb_arr
    cdef double[::1] t_final = tf_arr
    cdef double[:, ::1] w_v
    cdef double[:, ::1] t_v
    cdef double[:, ::1] off_v
    cdef bint has_off = offsets is not None
    cdef double* w_ptr = NULL
    cdef double* t_ptr = NULL
    cdef double* off_ptr = NULL
    cdef int n = n_samples
    w_arr = t_arr = None
    if want_weights:
        w_arr = np.zeros((m, n), dtype=np.float64)
        t_arr = np.zeros((m, n), dtype=np.float64)
        w_v = w_arr
        t_v = t_arr
        if m:
            w_ptr = &w_v[0, 0]
            t_ptr = &t_v[0, 0]
    if has_off:
        off_v = np.ascontiguousarray(offsets, dtype=np.float64)
        if m:
            off_ptr = &off_v[0, 0]
    if m == 0:
        return rgb_arr, tf_arr, w_arr, t_arr
    for i in prange(m, nogil=True, num_threads=n_threads, schedule="static"):
        march(&g, origins[i, 0], origins[i, 1], origins[i, 2], dirs[i, 0], dirs[i, 1], dirs[i, 2],
              tnear[i], tfar[i], (off_ptr + i * n) if has_off else NULL, n,
              &rgb[i, 0], &t_final[i],
              (w_ptr + i * n) if want_weights else NULL,
              (t_ptr + i * n) if want_weights else NULL,
              NULL, NULL, NULL, NULL, NULL, NULL, NULL, NULL)
    return rgb_arr, tf_arr, w_arr, t_arr


def render_backward(double[:, :, ::1] density, double[:, :, :, ::1] color,
                    double[::1] bmin, double[::1] bmax,
                    double[:, ::1] origins, double[:, ::1] dirs,
                    double[::1] tnear, double[::1] tfar, offsets, int n_samples,
                    double[:, ::1] d_rgb, double[:, :, ::1] grad_density,
                    double[:, :, :, ::1] grad_color):
    cdef Grid g
    fill_grid(&g, density, color, bmin, bmax)
    if g.nc > 16:
        raise ValueError("at most 16 color channels are supported")
    cdef Py_ssize_t m = origins.shape[0], i, idx
    cdef int n = n_samples, nc = g.nc, k, c, q
    cdef double[:, ::1] off_v
    cdef bint has_off = offsets is not None
    if has_off:
        off_v = np.ascontiguousarray(offsets, dtype=np.float64)
    cdef double* gd = &grad_density[0, 0, 0]
    cdef double* gcol = &grad_color[0, 0, 0, 0]
    cdef double* s_sigma = <double*>malloc(n * sizeof(double))
    cdef double* s_rawsig = <double*>malloc(n * sizeof(double))
    cdef double* s_col = <double*>malloc(n * nc * sizeof(double))
    cdef double* s_trans = <double*>malloc(n * sizeof(double))
    cdef double* s_delta = <double*>malloc(n * sizeof(double))
    cdef Py_ssize_t* s_base = <Py_ssize_t*>malloc(3 * n * sizeof(Py_ssize_t))
    cdef double* s_f = <double*>malloc(3 * n * sizeof(double))
    cdef unsigned char* s_in = <unsigned char*>malloc(n * sizeof(unsigned char))
    cdef double rgb[16]
    cdef double cw[8]
    cdef Py_ssize_t cidx[8]
    cdef double t_final, suffix, gc, w, t_after, d_sigma, d_raw, dcol, cval, anyg
    try:
        with nogil:
            for i in range(m):
                anyg = 0.0
                for c in range(nc):
                    anyg += fabs(d_rgb[i, c])
                if anyg == 0.0:
                    continue
                march(&g, origins[i, 0], origins[i, 1], origins[i, 2], dirs[i, 0], dirs[i, 1], dirs[i, 2],
                      tnear[i], tfar[i], (&off_v[i, 0]) if has_off else NULL, n,
                      rgb, &t_final, NULL, NULL,
                      s_sigma, s_rawsig, s_col, s_trans, s_delta, s_base, s_f, s_in)
                suffix = 0.0
                for k in range(n - 1, -1, -1):
                    if not s_in[k]:
                        continue
                    t_after = s_trans[k] * exp(-s_sigma[k] * s_delta[k])
                    w = s_trans[k] * (1.0 - exp(-s_sigma[k] * s_delta[k]))
                    gc = 0.0
                    for c in range(nc):
                        gc = gc + s_col[k * nc + c] * d_rgb[i, c]
                    d_sigma = s_delta[k] * (t_after * gc - suffix)
                    suffix = suffix + w * gc
                    d_raw = d_sigma * sigmoid(s_rawsig[k])
                    corner_weights(&s_f[k * 3], cw)
                    for q in range(8):
                        cidx[q] = corner_index(&g, &s_base[k * 3], q)
                        gd[cidx[q]] += cw[q] * d_raw
                    for c in range(nc):
                        cval = s_col[k * nc + c]
                        dcol = w * d_rgb[i, c] * cval * (1.0 - cval)
                        for q in range(8):
                            gcol[cidx[q] * nc + c] += cw[q] * dcol
    finally:
        free(s_sigma); free(s_rawsig); free(s_col); free(s_trans)
        free(s_delta); free(s_base); free(s_f); free(s_in)
