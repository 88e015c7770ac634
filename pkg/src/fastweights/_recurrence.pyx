# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fast-weight recurrence.

Same contract as ``_recurrence_py``; loops run per sequence with the GIL
released. Fast-weight matrices are counted per sequence, as in the fallback.
"""
import numpy as np

BACKEND = "cython"

ctypedef fused real:
    float
    double


cdef inline double _dot(real* a, real* b, Py_ssize_t n) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t j
    for j in range(n):
        acc += a[j] * b[j]
    return acc


cdef inline void _matvec(real* W, real* x, real* out, Py_ssize_t E, Py_ssize_t D, double scale) noexcept nogil:
    # out = scale * W x, W is E x D row-major
    cdef Py_ssize_t e, d
    cdef double acc
    for e in range(E):
        acc = 0.0
        for d in range(D):
            acc += W[e * D + d] * x[d]
        out[e] = <real>(acc * scale)


cdef inline void _matTvec_add(real* W, real* x, real* out, Py_ssize_t E, Py_ssize_t D) noexcept nogil:
    # out += W^T x
    cdef Py_ssize_t e, d
    cdef real xe
    for e in range(E):
        xe = x[e]
        for d in range(D):
            out[d] += W[e * D + d] * xe


cdef inline void _rank1(real* W, real* a, real* b, Py_ssize_t E, Py_ssize_t D) noexcept nogil:
    # W += a (x) b
    cdef Py_ssize_t e, d
    cdef real ae
    for e in range(E):
        ae = a[e]
        for d in range(D):
            W[e * D + d] += ae * b[d]


def forward(real[:, :, ::1] phik, real[:, :, ::1] v, real[:, ::1] beta, real[:, :, ::1] phiq,
            bint delta, bint attn, bint final, double eps, Py_ssize_t segment, bint keep):
    cdef Py_ssize_t B = phik.shape[0], L = phik.shape[1], D = phik.shape[2]
    cdef Py_ssize_t E = v.shape[2], Q = phiq.shape[1]
    cdef Py_ssize_t nseg = (L + segment - 1) // segment if keep else 0
    dtype = np.float32 if real is float else np.float64

    W_arr = np.zeros((E, D), dtype)
    z_arr = np.zeros(D, dtype)
    u_arr = np.zeros(E, dtype)
    vbar_arr = np.zeros((B, L, E), dtype)
    kden_arr = np.ones((B, L), dtype)
    qden_arr = np.ones((B, Q), dtype)
    y_arr = np.zeros((B, Q, E), dtype)
    ckpt_arr = np.zeros((nseg, B, E, D), dtype)

    cdef real[:, ::1] W = W_arr
    cdef real[::1] z = z_arr
    cdef real[::1] u = u_arr
    cdef real[:, :, ::1] vbar = vbar_arr
    cdef real[:, ::1] kden = kden_arr
    cdef real[:, ::1] qden = qden_arr
    cdef real[:, :, ::1] y = y_arr
    cdef real[:, :, :, ::1] ckpt = ckpt_arr
    cdef Py_ssize_t b, i, e, d, qi
    cdef double a, c, bi

    with nogil:
        for b in range(B):
            W[:, :] = 0
            z[:] = 0
            for i in range(L):
                if keep and i % segment == 0:
                    ckpt[i // segment, b, :, :] = W
                if delta:
                    a = 1.0
                    if attn:
                        a = _dot(&z[0], &phik[b, i, 0], D) + eps
                        kden[b, i] = <real>a
                    _matvec(&W[0, 0], &phik[b, i, 0], &vbar[b, i, 0], E, D, 1.0 / a)
                    bi = beta[b, i]
                    for e in range(E):
                        u[e] = <real>(bi * (v[b, i, e] - vbar[b, i, e]))
                    _rank1(&W[0, 0], &u[0], &phik[b, i, 0], E, D)
                else:
                    _rank1(&W[0, 0], &v[b, i, 0], &phik[b, i, 0], E, D)
                if attn:
                    for d in range(D):
                        z[d] += phik[b, i, d]
                if not final:
                    c = 1.0
                    if attn:
                        c = _dot(&z[0], &phiq[b, i, 0], D) + eps
                        qden[b, i] = <real>c
                    _matvec(&W[0, 0], &phiq[b, i, 0], &y[b, i, 0], E, D, 1.0 / c)
            if final:
                for qi in range(Q):
                    c = 1.0
                    if attn:
                        c = _dot(&z[0], &phiq[b, qi, 0], D) + eps
                        qden[b, qi] = <real>c
                    _matvec(&W[0, 0], &phiq[b, qi, 0], &y[b, qi, 0], E, D, 1.0 / c)

    # per sequence: the running W plus its checkpoints
    peak = 1 + nseg
    return y_arr, vbar_arr, kden_arr, qden_arr, ckpt_arr, peak


def backward(real[:, :, ::1] gy, real[:, :, ::1] phik, real[:, :, ::1] v, real[:, ::1] beta,
             real[:, :, ::1] phiq, real[:, :, ::1] vbar, real[:, ::1] kden, real[:, ::1] qden,
             real[:, :, :, ::1] ckpt, bint delta, bint attn, bint final, double eps, Py_ssize_t segment):
    cdef Py_ssize_t B = phik.shape[0], L = phik.shape[1], D = phik.shape[2]
    cdef Py_ssize_t E = v.shape[2], Q = phiq.shape[1]
    cdef Py_ssize_t nseg = ckpt.shape[0]
    dtype = np.float32 if real is float else np.float64

    buf_arr = np.zeros((segment + 1, E, D), dtype)
    cdef real[:, :, ::1] buf = buf_arr
    gW_arr = np.zeros((E, D), dtype)
    cdef real[:, ::1] gW = gW_arr

    gphik_arr = np.zeros_like(np.asarray(phik))
    gv_arr = np.zeros_like(np.asarray(v))
    gbeta_arr = np.zeros_like(np.asarray(beta))
    gphiq_arr = np.zeros_like(np.asarray(phiq))
    cdef real[:, :, ::1] gphik = gphik_arr
    cdef real[:, :, ::1] gv = gv_arr
    cdef real[:, ::1] gbeta = gbeta_arr
    cdef real[:, :, ::1] gphiq = gphiq_arr

    zs_arr = np.zeros((L + 1, D), dtype)
    cdef real[:, ::1] zs = zs_arr
    u_arr = np.zeros((L, E), dtype)
    cdef real[:, ::1] u = u_arr
    gz_arr = np.zeros(D, dtype)
    cdef real[::1] gz = gz_arr
    gr_arr = np.zeros(E, dtype)
    cdef real[::1] gr = gr_arr
    gu_arr = np.zeros(E, dtype)
    cdef real[::1] gu = gu_arr
    yv_arr = np.zeros(E, dtype)
    cdef real[::1] yv = yv_arr

    cdef Py_ssize_t b, s, i, j, e, d, qi, start, end, n
    cdef double c, gc, a, ga, bi, acc

    with nogil:
        for b in range(B):
            gW[:, :] = 0
            gz[:] = 0
            # zs[i] holds z after i writes
            zs[0, :] = 0
            for i in range(L):
                for d in range(D):
                    zs[i + 1, d] = zs[i, d] + phik[b, i, d]
                for e in range(E):
                    if delta:
                        u[i, e] = <real>(<double>beta[b, i] * (v[b, i, e] - vbar[b, i, e]))
                    else:
                        u[i, e] = v[b, i, e]

            for s in range(nseg - 1, -1, -1):
                start = s * segment
                end = start + segment
                if end > L:
                    end = L
                buf[0, :, :] = ckpt[s, b, :, :]
                for j in range(start, end):
                    buf[j - start + 1, :, :] = buf[j - start, :, :]
                    _rank1(&buf[j - start + 1, 0, 0], &u[j, 0], &phik[b, j, 0], E, D)

                if final and s == nseg - 1:
                    n = end - start
                    for qi in range(Q):
                        c = qden[b, qi] if attn else 1.0
                        for e in range(E):
                            gr[e] = <real>(gy[b, qi, e] / c)
                        _rank1(&gW[0, 0], &gr[0], &phiq[b, qi, 0], E, D)
                        _matTvec_add(&buf[n, 0, 0], &gr[0], &gphiq[b, qi, 0], E, D)
                        if attn:
                            _matvec(&buf[n, 0, 0], &phiq[b, qi, 0], &yv[0], E, D, 1.0 / c)
                            gc = -_dot(&gy[b, qi, 0], &yv[0], E) / c
                            for d in range(D):
                                gphiq[b, qi, d] += <real>(gc * zs[L, d])
                                gz[d] += <real>(gc * phiq[b, qi, d])

                for i in range(end - 1, start - 1, -1):
                    if not final:
                        c = qden[b, i] if attn else 1.0
                        for e in range(E):
                            gr[e] = <real>(gy[b, i, e] / c)
                        _rank1(&gW[0, 0], &gr[0], &phiq[b, i, 0], E, D)
                        _matTvec_add(&buf[i - start + 1, 0, 0], &gr[0], &gphiq[b, i, 0], E, D)
                        if attn:
                            _matvec(&buf[i - start + 1, 0, 0], &phiq[b, i, 0], &yv[0], E, D, 1.0 / c)
                            gc = -_dot(&gy[b, i, 0], &yv[0], E) / c
                            for d in range(D):
                                gphiq[b, i, d] += <real>(gc * zs[i + 1, d])
                                gz[d] += <real>(gc * phiq[b, i, d])

                    _matvec(&gW[0, 0], &phik[b, i, 0], &gu[0], E, D, 1.0)
                    _matTvec_add(&gW[0, 0], &u[i, 0], &gphik[b, i, 0], E, D)
                    if delta:
                        bi = beta[b, i]
                        acc = 0.0
                        for e in range(E):
                            acc += gu[e] * (v[b, i, e] - vbar[b, i, e])
                            gv[b, i, e] = <real>(bi * gu[e])
                        gbeta[b, i] = <real>acc
                        a = kden[b, i] if attn else 1.0
                        ga = 0.0
                        for e in range(E):
                            # gu now holds the adjoint of the matvec W_prev phik
                            ga += -bi * gu[e] * vbar[b, i, e]
                            gu[e] = <real>(-bi * gu[e] / a)
                        ga = -ga / a
                        _rank1(&gW[0, 0], &gu[0], &phik[b, i, 0], E, D)
                        _matTvec_add(&buf[i - start, 0, 0], &gu[0], &gphik[b, i, 0], E, D)
                        if attn:
                            for d in range(D):
                                gphik[b, i, d] += gz[d] + <real>(ga * zs[i, d])
                                gz[d] += <real>(ga * phik[b, i, d])
                    else:
                        for e in range(E):
                            gv[b, i, e] = gu[e]
                        if attn:
                            for d in range(D):
                                gphik[b, i, d] += gz[d]

    # per sequence: all checkpoints, the segment buffer, and the weight adjoint
    peak = nseg + (segment + 1) + 1
    return gphik_arr, gv_arr, gbeta_arr, gphiq_arr, peak
