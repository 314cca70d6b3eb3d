# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, nonecheck=False
"""Compiled hot loops.

Three kernels live here, each mirrored line for line by ``_fallback.py``:

* ``philox_normals``: counter-based standard normals (Philox4x32-10 words
  fed to a 256-layer ziggurat), keyed by (seed, sample id, step).
* ``advance_quadratic``: fused Euler-Maruyama stepping of a quadratic
  conditional Gaussian model together with the forward-Euler filter update,
  one independent task per sample.
* ``mixture_logpdf``: streaming log-sum-exp evaluation of a Gaussian mixture.
"""
from cython.parallel cimport prange
from libc.math cimport sqrt, log, log1p, exp, fabs, isfinite
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy
from libc.stdint cimport uint32_t, uint64_t, int64_t, int32_t

import numpy as np

cdef uint64_t PHILOX_M0 = 3528531795ULL   # 0xD2511F53
cdef uint64_t PHILOX_M1 = 3449720151ULL   # 0xCD9E8D57
cdef uint32_t PHILOX_W0 = 2654435769U     # 0x9E3779B9
cdef uint32_t PHILOX_W1 = 3144134277U     # 0xBB67AE85

# failure codes reported per sample
cdef int32_t FAIL_STATE = 1
cdef int32_t FAIL_FILTER = 2


cdef inline void _philox(uint32_t c0, uint32_t c1, uint32_t c2, uint32_t c3,
                         uint32_t k0, uint32_t k1, uint32_t* out) noexcept nogil:
    cdef uint64_t p0, p1
    cdef uint32_t t0, t2
    cdef int r
    for r in range(10):
        p0 = PHILOX_M0 * <uint64_t>c0
        p1 = PHILOX_M1 * <uint64_t>c2
        t0 = (<uint32_t>(p1 >> 32)) ^ c1 ^ k0
        t2 = (<uint32_t>(p0 >> 32)) ^ c3 ^ k1
        c1 = <uint32_t>p1
        c3 = <uint32_t>p0
        c0 = t0
        c2 = t2
        k0 = k0 + PHILOX_W0
        k1 = k1 + PHILOX_W1
    out[0] = c0
    out[1] = c1
    out[2] = c2
    out[3] = c3


cdef uint64_t ZIG_KI[256]
cdef double ZIG_WI[256]
cdef double ZIG_FI[256]
cdef double ZIG_R = 3.6541528853610088
cdef double TWO_M53 = 1.1102230246251565e-16


def _load_tables():
    from hybridpdf._fallback import ziggurat_tables
    ki, wi, fi = ziggurat_tables()
    cdef int i
    for i in range(256):
        ZIG_KI[i] = <uint64_t>int(ki[i])
        ZIG_WI[i] = float(wi[i])
        ZIG_FI[i] = float(fi[i])


_load_tables()


cdef struct Stream:
    uint32_t c0
    uint32_t c1
    uint32_t c2
    uint32_t c3base
    uint32_t k0
    uint32_t k1
    uint32_t block
    int pos
    uint32_t buf[4]


cdef inline void _stream_init(Stream* st, uint64_t seed, uint64_t sid, uint64_t step) noexcept nogil:
    st.c0 = <uint32_t>step
    st.c1 = <uint32_t>(step >> 32)
    st.c2 = <uint32_t>sid
    st.c3base = <uint32_t>((sid >> 32) & 0xFFFFFF)
    st.k0 = <uint32_t>seed
    st.k1 = <uint32_t>(seed >> 32)
    st.block = 0
    st.pos = 2


cdef inline uint64_t _next_u64(Stream* st) noexcept nogil:
    cdef uint64_t v
    if st.pos >= 2:
        _philox(st.c0, st.c1, st.c2, st.c3base | (st.block << 24), st.k0, st.k1, st.buf)
        st.block = st.block + 1
        st.pos = 0
    v = (<uint64_t>st.buf[2 * st.pos]) | ((<uint64_t>st.buf[2 * st.pos + 1]) << 32)
    st.pos = st.pos + 1
    return v


cdef inline double _next_double(Stream* st) noexcept nogil:
    return <double>(_next_u64(st) >> 11) * TWO_M53


cdef inline double _zig_normal(Stream* st) noexcept nogil:
    cdef uint64_t r, rabs
    cdef int idx
    cdef double x, xx, yy
    while True:
        r = _next_u64(st)
        idx = <int>(r & 0xFF)
        r = r >> 8
        rabs = (r >> 1) & 0x000FFFFFFFFFFFFFULL
        # branchless sign; rabs < 2**52 so the signed conversion is exact
        x = <double>(<int64_t>rabs) * ZIG_WI[idx] * (1.0 - 2.0 * <double>(<int>(r & 1)))
        if rabs < ZIG_KI[idx]:
            return x
        if idx == 0:
            while True:
                xx = -log1p(-_next_double(st)) / ZIG_R
                yy = -log1p(-_next_double(st))
                if yy + yy > xx * xx:
                    if ((rabs >> 8) & 1) != 0:
                        return -(ZIG_R + xx)
                    return ZIG_R + xx
        else:
            if (ZIG_FI[idx - 1] - ZIG_FI[idx]) * _next_double(st) + ZIG_FI[idx] < exp(-0.5 * x * x):
                return x


cdef inline void _normals(uint64_t seed, uint64_t sid, uint64_t step, int n,
                          double* z) noexcept nogil:
    """Fill z[0:n] with standard normals for one (sample, step) stream."""
    cdef Stream st
    cdef int k
    _stream_init(&st, seed, sid, step)
    for k in range(n):
        z[k] = _zig_normal(&st)


def philox_raw(uint64_t seed, uint32_t c0, uint32_t c1, uint32_t c2, uint32_t c3):
    """Raw Philox4x32-10 block for counter (c0..c3) and key (seed lo, seed hi)."""
    cdef uint32_t out[4]
    _philox(c0, c1, c2, c3, <uint32_t>seed, <uint32_t>(seed >> 32), out)
    return (out[0], out[1], out[2], out[3])


def philox_normals(uint64_t seed, const int64_t[::1] ids, int64_t step, int n):
    """Standard normals of shape (len(ids), n) for one step counter."""
    cdef Py_ssize_t L = ids.shape[0]
    res = np.empty((L, n), dtype=np.float64)
    cdef double[:, ::1] r = res
    cdef double* z = <double*>malloc((n + 1) * sizeof(double))
    cdef Py_ssize_t i
    cdef int k
    try:
        for i in range(L):
            _normals(seed, <uint64_t>ids[i], <uint64_t>step, n, z)
            for k in range(n):
                r[i, k] = z[k]
    finally:
        free(z)
    return res


cdef inline double _min_eig_sym(double* A, double* V, double* w, int n) noexcept nogil:
    """Cyclic Jacobi eigen-decomposition of symmetric A (destroyed).

    Eigenvectors are written column-wise into V, eigenvalues into w.
    Returns the smallest eigenvalue.
    """
    cdef int p, q, k, sweep
    cdef double off, tot, theta, t, c, s, akp, akq, apq
    for p in range(n):
        for q in range(n):
            V[p * n + q] = 1.0 if p == q else 0.0
    for sweep in range(64):
        off = 0.0
        tot = 0.0
        for p in range(n):
            for q in range(n):
                tot = tot + A[p * n + q] * A[p * n + q]
                if p != q:
                    off = off + A[p * n + q] * A[p * n + q]
        if off <= 1e-30 * tot or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p * n + q]
                if apq == 0.0:
                    continue
                theta = (A[q * n + q] - A[p * n + p]) / (2.0 * apq)
                t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = A[k * n + p]
                    akq = A[k * n + q]
                    A[k * n + p] = c * akp - s * akq
                    A[k * n + q] = s * akp + c * akq
                for k in range(n):
                    akp = A[p * n + k]
                    akq = A[q * n + k]
                    A[p * n + k] = c * akp - s * akq
                    A[q * n + k] = s * akp + c * akq
                for k in range(n):
                    akp = V[k * n + p]
                    akq = V[k * n + q]
                    V[k * n + p] = c * akp - s * akq
                    V[k * n + q] = s * akp + c * akq
    c = A[0]
    for p in range(n):
        w[p] = A[p * n + p]
        if w[p] < c:
            c = w[p]
    return c


cdef inline double _floor_and_min_eig(double* R, int n, bint floor, double* work) noexcept nogil:
    """Clip negative eigenvalues of symmetric R in place; return min eigenvalue before clipping."""
    cdef double* A = work
    cdef double* V = work + n * n
    cdef double* w = work + 2 * n * n
    cdef double mn, acc
    cdef int p, q, k
    if n == 1:
        mn = R[0]
        if floor and mn < 0.0:
            R[0] = 0.0
        return mn
    memcpy(A, R, n * n * sizeof(double))
    mn = _min_eig_sym(A, V, w, n)
    if floor and mn < 0.0:
        for k in range(n):
            if w[k] < 0.0:
                w[k] = 0.0
        for p in range(n):
            for q in range(p, n):
                acc = 0.0
                for k in range(n):
                    acc = acc + V[p * n + k] * w[k] * V[q * n + k]
                R[p * n + q] = acc
                R[q * n + p] = acc
    return mn


cdef struct Sparse:
    int nlin
    const int32_t* lin_idx
    const double* lin_val
    int nquad
    const int32_t* quad_idx
    const double* quad_val
    int nmix
    const int32_t* mix_idx
    const double* mix_val
    int nnoise
    const int32_t* noise_idx
    const double* noise_val
    const double* base1
    const double* force


cdef void _run_sample(
        Py_ssize_t i, Py_ssize_t L, int N, int n1, double* u, uint64_t sid, Sparse* sp,
        uint64_t seed, int64_t step0, int64_t n_steps, double dt, int64_t stride, double cap,
        bint filt, double* m, double* R, const double* Sinv, const double* Q, bint psd_floor,
        double* rec_u, double* rec_m, double* rec_R, double* rec_e,
        int64_t* fail_step, int32_t* fail_kind, double* work) noexcept nogil:
    cdef int n2 = N - n1
    cdef double* z = work
    cdef double* un = z + N + 1
    cdef double* coef0 = un + N
    cdef double* coef1 = coef0 + N
    cdef double* kick = coef1 + N * n2
    cdef double* innov = kick + N
    cdef double* W = innov + n1
    cdef double* G = W + n2 * n1
    cdef double* K = G + n2 * n1
    cdef double* mn = K + n2 * n2
    cdef double* Rn = mn + n2
    cdef double* eig = Rn + n2 * n2
    cdef double* A1 = coef1
    cdef double* a1 = coef1 + n1 * n2
    cdef double sqdt = sqrt(dt)
    cdef double acc, acc2, emin = 0.0
    cdef int64_t k, j
    cdef int a, b, c, p, q, e
    cdef bint bad
    for k in range(n_steps):
        # conditional Gaussian coefficients at the current u_I
        for c in range(N):
            coef0[c] = sp.force[c]
            kick[c] = 0.0
        for e in range(sp.nlin):
            c = sp.lin_idx[2 * e]
            coef0[c] = coef0[c] + sp.lin_val[e] * u[sp.lin_idx[2 * e + 1]]
        for e in range(sp.nquad):
            c = sp.quad_idx[3 * e]
            coef0[c] = coef0[c] + sp.quad_val[e] * u[sp.quad_idx[3 * e + 1]] * u[sp.quad_idx[3 * e + 2]]
        for c in range(N * n2):
            coef1[c] = sp.base1[c]
        for e in range(sp.nmix):
            c = sp.mix_idx[3 * e] * n2 + sp.mix_idx[3 * e + 1]
            coef1[c] = coef1[c] + sp.mix_val[e] * u[sp.mix_idx[3 * e + 2]]
        _normals(seed, sid, <uint64_t>(step0 + k), N, z)
        for e in range(sp.nnoise):
            c = sp.noise_idx[2 * e]
            kick[c] = kick[c] + sp.noise_val[e] * z[sp.noise_idx[2 * e + 1]]
        bad = False
        for c in range(N):
            acc = coef0[c]
            for p in range(n2):
                acc = acc + coef1[c * n2 + p] * u[n1 + p]
            un[c] = u[c] + acc * dt + kick[c] * sqdt
            if not isfinite(un[c]) or fabs(un[c]) > cap:
                bad = True
        if bad:
            fail_step[0] = step0 + k
            fail_kind[0] = FAIL_STATE
            return
        if filt:
            # innovation dU_I - (A0 + A1 m) dt
            for c in range(n1):
                acc = coef0[c]
                for p in range(n2):
                    acc = acc + A1[c * n2 + p] * m[p]
                innov[c] = (un[c] - u[c]) - acc * dt
            # W = A1^T Sinv, G = R W
            for p in range(n2):
                for q in range(n1):
                    acc = 0.0
                    for c in range(n1):
                        acc = acc + A1[c * n2 + p] * Sinv[c * n1 + q]
                    W[p * n1 + q] = acc
            for p in range(n2):
                for q in range(n1):
                    acc = 0.0
                    for c in range(n2):
                        acc = acc + R[p * n2 + c] * W[c * n1 + q]
                    G[p * n1 + q] = acc
            for p in range(n2):
                acc = coef0[n1 + p]
                for q in range(n2):
                    acc = acc + a1[p * n2 + q] * m[q]
                acc2 = 0.0
                for q in range(n1):
                    acc2 = acc2 + G[p * n1 + q] * innov[q]
                mn[p] = m[p] + acc * dt + acc2
            # K = G A1
            for p in range(n2):
                for q in range(n2):
                    acc = 0.0
                    for c in range(n1):
                        acc = acc + G[p * n1 + c] * A1[c * n2 + q]
                    K[p * n2 + q] = acc
            # Rn = R + (a1 R + R a1^T + Q - K R) dt
            for p in range(n2):
                for q in range(n2):
                    acc = 0.0
                    for c in range(n2):
                        acc = acc + a1[p * n2 + c] * R[c * n2 + q]
                        acc = acc + R[p * n2 + c] * a1[q * n2 + c]
                        acc = acc - K[p * n2 + c] * R[c * n2 + q]
                    Rn[p * n2 + q] = R[p * n2 + q] + (acc + Q[p * n2 + q]) * dt
            for p in range(n2):
                for q in range(p + 1, n2):
                    acc = 0.5 * (Rn[p * n2 + q] + Rn[q * n2 + p])
                    Rn[p * n2 + q] = acc
                    Rn[q * n2 + p] = acc
            emin = _floor_and_min_eig(Rn, n2, psd_floor, eig)
            for p in range(n2):
                if not isfinite(mn[p]):
                    bad = True
            for p in range(n2 * n2):
                if not isfinite(Rn[p]):
                    bad = True
            if bad:
                fail_step[0] = step0 + k
                fail_kind[0] = FAIL_FILTER
                return
            memcpy(m, mn, n2 * sizeof(double))
            memcpy(R, Rn, n2 * n2 * sizeof(double))
        memcpy(u, un, N * sizeof(double))
        if rec_u != NULL or rec_m != NULL:
            if (k + 1) % stride == 0:
                j = (k + 1) // stride
                if rec_u != NULL:
                    memcpy(rec_u + (j * L + i) * N, u, N * sizeof(double))
                if rec_m != NULL:
                    memcpy(rec_m + (j * L + i) * n2, m, n2 * sizeof(double))
                    memcpy(rec_R + (j * L + i) * n2 * n2, R, n2 * n2 * sizeof(double))
                    if psd_floor and emin < 0.0:
                        emin = 0.0
                    if n2 > 1:
                        memcpy(eig, R, n2 * n2 * sizeof(double))
                        emin = _min_eig_sym(eig, eig + n2 * n2, eig + 2 * n2 * n2, n2)
                    rec_e[j * L + i] = emin


def advance_quadratic(
        double[:, ::1] state, const int64_t[::1] ids,
        const double[:, ::1] lam, const double[:, :, ::1] tens,
        const double[::1] force, const double[:, ::1] noise,
        int n_obs, uint64_t seed, int64_t step0, int64_t n_steps,
        double dt, int64_t stride, double cap,
        double[:, :, ::1] rec_state,
        double[:, ::1] fmean, double[:, :, ::1] fcov,
        const double[:, ::1] sinv, const double[:, ::1] qmat,
        double[:, :, ::1] rec_mean, double[:, :, :, ::1] rec_cov, double[:, ::1] rec_mineig,
        bint psd_floor, int64_t[::1] fail_step, int32_t[::1] fail_kind,
        int num_threads=1):
    """Advance every sample ``n_steps`` steps in place.

    ``state`` rows hold (u_I, u_II).  When ``fmean`` has rows, the filter
    (mean ``fmean``, covariance ``fcov``) is advanced alongside.  Record slot
    ``j >= 1`` receives the state after ``j * stride`` steps; slot 0 is left to
    the caller.  Failures are reported per sample through ``fail_step`` and
    ``fail_kind`` (1 = state blow-up, 2 = filter blow-up) and stop that sample.
    """
    from hybridpdf._fallback import sparse_structure

    cdef Py_ssize_t L = state.shape[0]
    cdef int N = state.shape[1]
    cdef int n1 = n_obs
    cdef int n2 = N - n1
    cdef bint filt = fmean.shape[0] > 0
    cdef bint rec_s = rec_state.shape[0] > 0
    cdef bint rec_f = filt and rec_mean.shape[0] > 0
    cdef Py_ssize_t i
    cdef int nwork = 8 * N * N + 8 * N + 16
    cdef double* work
    cdef double* ru = NULL
    cdef double* rm = NULL
    cdef double* rR = NULL
    cdef double* re = NULL
    cdef double* mp = NULL
    cdef double* Rp = NULL
    cdef const double* sinv_p = NULL
    cdef const double* q_p = NULL
    cdef Sparse sp
    if L == 0 or n_steps == 0:
        return
    d = sparse_structure(np.asarray(lam), np.asarray(tens), np.asarray(force), np.asarray(noise), n1)
    cdef const int32_t[:, ::1] lin_idx = d["lin_idx"]
    cdef const double[::1] lin_val = d["lin_val"]
    cdef const int32_t[:, ::1] quad_idx = d["quad_idx"]
    cdef const double[::1] quad_val = d["quad_val"]
    cdef const int32_t[:, ::1] mix_idx = d["mix_idx"]
    cdef const double[::1] mix_val = d["mix_val"]
    cdef const int32_t[:, ::1] noise_idx = d["noise_idx"]
    cdef const double[::1] noise_val = d["noise_val"]
    cdef const double[:, ::1] base1 = d["base1"]
    cdef const double[::1] fvec = d["force"]
    # keep a dummy element so that pointers to empty lists stay valid
    cdef int32_t idx_dummy[3]
    cdef double val_dummy[1]
    sp.nlin = lin_val.shape[0]
    sp.lin_idx = &lin_idx[0, 0] if sp.nlin else idx_dummy
    sp.lin_val = &lin_val[0] if sp.nlin else val_dummy
    sp.nquad = quad_val.shape[0]
    sp.quad_idx = &quad_idx[0, 0] if sp.nquad else idx_dummy
    sp.quad_val = &quad_val[0] if sp.nquad else val_dummy
    sp.nmix = mix_val.shape[0]
    sp.mix_idx = &mix_idx[0, 0] if sp.nmix else idx_dummy
    sp.mix_val = &mix_val[0] if sp.nmix else val_dummy
    sp.nnoise = noise_val.shape[0]
    sp.noise_idx = &noise_idx[0, 0] if sp.nnoise else idx_dummy
    sp.noise_val = &noise_val[0] if sp.nnoise else val_dummy
    sp.base1 = &base1[0, 0]
    sp.force = &fvec[0]
    if rec_s:
        ru = &rec_state[0, 0, 0]
    if rec_f:
        rm = &rec_mean[0, 0, 0]
        rR = &rec_cov[0, 0, 0, 0]
        re = &rec_mineig[0, 0]
    if filt:
        sinv_p = &sinv[0, 0]
        q_p = &qmat[0, 0]
    for i in prange(L, nogil=True, num_threads=num_threads, schedule="static"):
        work = <double*>malloc(nwork * sizeof(double))
        if filt:
            mp = &fmean[i, 0]
            Rp = &fcov[i, 0, 0]
        else:
            mp = NULL
            Rp = NULL
        _run_sample(i, L, N, n1, &state[i, 0], <uint64_t>ids[i], &sp,
                    seed, step0, n_steps, dt, stride, cap,
                    filt, mp, Rp, sinv_p, q_p, psd_floor,
                    ru, rm, rR, re, &fail_step[i], &fail_kind[i], work)
        free(work)


def mixture_logpdf(const double[:, ::1] points, const double[:, ::1] means,
                   const double[:, :, ::1] whiten, const double[::1] log_norm,
                   int num_threads=1):
    """log sum_i exp(log_norm_i - |W_i (x - mu_i)|^2 / 2) for every point.

    ``whiten[i]`` is lower triangular with W_i^T W_i = cov_i^{-1}.
    """
    cdef Py_ssize_t P = points.shape[0]
    cdef Py_ssize_t M = means.shape[0]
    cdef int d = points.shape[1]
    res = np.empty(P, dtype=np.float64)
    cdef double[::1] out = res
    cdef Py_ssize_t p, i
    cdef int a, b
    cdef double mx, s, v, q, acc
    for p in prange(P, nogil=True, num_threads=num_threads, schedule="static"):
        mx = -1e308
        s = 0.0
        for i in range(M):
            q = 0.0
            for a in range(d):
                acc = 0.0
                for b in range(a + 1):
                    acc = acc + whiten[i, a, b] * (points[p, b] - means[i, b])
                q = q + acc * acc
            v = log_norm[i] - 0.5 * q
            if v > mx:
                s = s * exp(mx - v) + 1.0
                mx = v
            else:
                s = s + exp(v - mx)
        out[p] = mx + log(s)
    return res
