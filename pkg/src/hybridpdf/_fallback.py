"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and semantics match the extension module so that ``_backend`` can
swap one for the other.  Loops run over time steps and small dimensions while
samples are vectorized, which keeps the arithmetic order of the compiled code.
Random draws are identical between backends (integer arithmetic and exact
table lookups); floating point results agree to rounding, not bitwise.
"""
from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

FAIL_STATE = 1
FAIL_FILTER = 2


def _philox_arrays(c0, c1, c2, c3, seed: int):
    """Vectorized Philox4x32-10 on uint64 arrays holding 32-bit counters."""
    k0 = int(seed) & 0xFFFFFFFF
    k1 = (int(seed) >> 32) & 0xFFFFFFFF
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        t0 = (p1 >> _SHIFT32) ^ c1 ^ np.uint64(k0)
        t2 = (p0 >> _SHIFT32) ^ c3 ^ np.uint64(k1)
        c1 = p1 & _MASK32
        c3 = p0 & _MASK32
        c0 = t0
        c2 = t2
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    return c0, c1, c2, c3


def philox_raw(seed: int, c0: int, c1: int, c2: int, c3: int):
    """Raw Philox4x32-10 block for counter (c0..c3) and key (seed lo, seed hi)."""
    out = _philox_arrays(*(np.array([c], dtype=np.uint64) for c in (c0, c1, c2, c3)), seed)
    return tuple(int(o[0]) for o in out)


def ziggurat_tables():
    """Tables of the 256-layer ziggurat for the standard normal (52-bit variant).

    Layer ``i`` has right edge ``wi[i] * 2**52``; a candidate ``rabs * wi[i]``
    is accepted outright when ``rabs < ki[i]``.  ``fi`` holds the density at
    the layer edges.  Both backends use these exact arrays.
    """
    import math

    m1 = 2.0**52
    dn = 3.6541528853610088
    vn = 0.00492867323399
    tn = dn
    ki = np.zeros(256, dtype=np.uint64)
    wi = np.zeros(256)
    fi = np.zeros(256)
    q = vn / math.exp(-0.5 * dn * dn)
    ki[0] = np.uint64(int((dn / q) * m1))
    ki[1] = np.uint64(0)
    wi[0] = q / m1
    wi[255] = dn / m1
    fi[0] = 1.0
    fi[255] = math.exp(-0.5 * dn * dn)
    for i in range(254, 0, -1):
        dn = math.sqrt(-2.0 * math.log(vn / dn + math.exp(-0.5 * dn * dn)))
        ki[i + 1] = np.uint64(int((dn / tn) * m1))
        tn = dn
        fi[i] = math.exp(-0.5 * dn * dn)
        wi[i] = dn / m1
    return ki, wi, fi


ZIG_R = 3.6541528853610088
_KI, _WI, _FI = ziggurat_tables()
_MASK52 = np.uint64(0x000FFFFFFFFFFFFF)
_TWO_M53 = 2.0**-53


class _Streams:
    """Per-sample word streams: 64-bit words drawn from consecutive Philox blocks.

    Word ``q`` of the stream for (seed, id, step) is half ``q % 2`` of block
    ``q // 2``, where block ``b`` uses counter (step_lo, step_hi, id_lo,
    id_hi24 | b << 24).
    """

    def __init__(self, seed: int, ids: np.ndarray, step: int):
        self.seed = int(seed)
        ids = ids.astype(np.uint64)
        step = int(step) & 0xFFFFFFFFFFFFFFFF
        L = ids.shape[0]
        self.s_lo = np.uint64(step & 0xFFFFFFFF)
        self.s_hi = np.uint64(step >> 32)
        self.id_lo = ids & _MASK32
        self.id_hi = (ids >> _SHIFT32) & np.uint64(0xFFFFFF)
        self.block = np.zeros(L, dtype=np.uint64)
        self.pos = np.full(L, 2, dtype=np.int64)
        self.buf = np.zeros((L, 4), dtype=np.uint64)

    def next_u64(self, idx: np.ndarray) -> np.ndarray:
        need = idx[self.pos[idx] >= 2]
        if need.size:
            n = need.size
            o = _philox_arrays(np.full(n, self.s_lo), np.full(n, self.s_hi), self.id_lo[need],
                               self.id_hi[need] | (self.block[need] << np.uint64(24)), self.seed)
            self.buf[need] = np.stack(o, axis=1)
            self.block[need] += np.uint64(1)
            self.pos[need] = 0
        p = self.pos[idx]
        lo = self.buf[idx, 2 * p]
        hi = self.buf[idx, 2 * p + 1]
        self.pos[idx] += 1
        return lo | (hi << _SHIFT32)

    def next_double(self, idx: np.ndarray) -> np.ndarray:
        return (self.next_u64(idx) >> np.uint64(11)).astype(np.float64) * _TWO_M53


def _zig_normals(st: _Streams, L: int, n: int) -> np.ndarray:
    out = np.empty((L, n))
    for j in range(n):
        todo = np.arange(L)
        while todo.size:
            r = st.next_u64(todo)
            idx = (r & np.uint64(0xFF)).astype(np.int64)
            r = r >> np.uint64(8)
            sign = (r & np.uint64(1)).astype(np.float64)
            rabs = (r >> np.uint64(1)) & _MASK52
            x = rabs.astype(np.float64) * _WI[idx] * (1.0 - 2.0 * sign)
            acc = rabs < _KI[idx]
            out[todo[acc], j] = x[acc]
            retry = []
            tail = np.flatnonzero(~acc & (idx == 0))
            if tail.size:
                who = todo[tail]
                neg = ((rabs[tail] >> np.uint64(8)) & np.uint64(1)).astype(bool)
                while who.size:
                    xx = -np.log1p(-st.next_double(who)) / ZIG_R
                    yy = -np.log1p(-st.next_double(who))
                    ok = yy + yy > xx * xx
                    out[who[ok], j] = np.where(neg[ok], -(ZIG_R + xx[ok]), ZIG_R + xx[ok])
                    who, neg = who[~ok], neg[~ok]
            wedge = np.flatnonzero(~acc & (idx != 0))
            if wedge.size:
                who = todo[wedge]
                iw = idx[wedge]
                xw = x[wedge]
                u = st.next_double(who)
                ok = (_FI[iw - 1] - _FI[iw]) * u + _FI[iw] < np.exp(-0.5 * xw * xw)
                out[who[ok], j] = xw[ok]
                retry.append(who[~ok])
            todo = np.concatenate(retry) if retry else np.empty(0, dtype=np.int64)
    return out


def philox_normals(seed: int, ids, step: int, n: int) -> np.ndarray:
    """Standard normals of shape (len(ids), n) for one step counter."""
    ids = np.asarray(ids, dtype=np.int64)
    return _zig_normals(_Streams(seed, ids, step), ids.shape[0], int(n))


def sparse_structure(lam, T, F, S, n1: int) -> dict:
    """Nonzero terms of a quadratic conditional Gaussian model.

    With ``u_I = u[:n1]`` the coefficients are
    ``coef0[c] = F[c] + sum lin_val * u[a] + sum quad_val * u[a] * u[b]``
    (rows ``c < n1`` give A0, the rest a0) and
    ``coef1[c, p] = base1[c, p] + sum mix_val * u[a]`` (A1 then a1).
    """
    lam = np.asarray(lam, dtype=float)
    T = np.asarray(T, dtype=float)
    S = np.asarray(S, dtype=float)
    N = lam.shape[0]
    n2 = N - n1
    lin = [(c, a, -lam[c, a]) for c in range(N) for a in range(n1) if lam[c, a] != 0.0]
    quad = [(c, a, b, T[c, a, b]) for c in range(N) for a in range(n1) for b in range(n1)
            if T[c, a, b] != 0.0]
    mix = [(c, p, a, T[c, a, n1 + p] + T[c, n1 + p, a]) for c in range(N) for p in range(n2)
           for a in range(n1) if T[c, a, n1 + p] + T[c, n1 + p, a] != 0.0]
    noise = [(c, b, S[c, b]) for c in range(N) for b in range(N) if S[c, b] != 0.0]

    def pack(rows, width):
        idx = np.array([r[:width] for r in rows], dtype=np.int32).reshape(-1, width)
        val = np.array([r[width] for r in rows], dtype=float)
        return np.ascontiguousarray(idx), np.ascontiguousarray(val)

    out = {}
    out["lin_idx"], out["lin_val"] = pack(lin, 2)
    out["quad_idx"], out["quad_val"] = pack(quad, 3)
    out["mix_idx"], out["mix_val"] = pack(mix, 3)
    out["noise_idx"], out["noise_val"] = pack(noise, 2)
    out["base1"] = np.ascontiguousarray(-lam[:, n1:])
    out["force"] = np.ascontiguousarray(np.asarray(F, dtype=float))
    return out


def _cg_coefficients(u, sp, n1):
    """Batched (A0, A1, a0, a1) of a quadratic model at u_I = u[:, :n1]."""
    L, N = u.shape
    coef0 = np.empty((L, N))
    coef0[:] = sp["force"]
    for (c, a), v in zip(sp["lin_idx"], sp["lin_val"]):
        coef0[:, c] = coef0[:, c] + v * u[:, a]
    for (c, a, b), v in zip(sp["quad_idx"], sp["quad_val"]):
        coef0[:, c] = coef0[:, c] + v * u[:, a] * u[:, b]
    coef1 = np.empty((L,) + sp["base1"].shape)
    coef1[:] = sp["base1"]
    for (c, p, a), v in zip(sp["mix_idx"], sp["mix_val"]):
        coef1[:, c, p] = coef1[:, c, p] + v * u[:, a]
    return coef0[:, :n1], coef1[:, :n1], coef0[:, n1:], coef1[:, n1:]


def _floor_psd(R, floor: bool):
    """Clip negative eigenvalues of a batch of symmetric matrices; return min eigenvalues."""
    n2 = R.shape[-1]
    if n2 == 1:
        mn = R[:, 0, 0].copy()
        if floor:
            R[:, 0, 0] = np.maximum(R[:, 0, 0], 0.0)
        return mn
    w, V = np.linalg.eigh(R)
    mn = w[:, 0].copy()
    if floor:
        neg = mn < 0.0
        if np.any(neg):
            wc = np.maximum(w[neg], 0.0)
            Rc = np.einsum("lpk,lk,lqk->lpq", V[neg], wc, V[neg])
            R[neg] = 0.5 * (Rc + np.swapaxes(Rc, 1, 2))
    return mn


def advance_quadratic(state, ids, lam, tens, force, noise, n_obs, seed, step0, n_steps,
                      dt, stride, cap, rec_state, fmean, fcov, sinv, qmat,
                      rec_mean, rec_cov, rec_mineig, psd_floor, fail_step, fail_kind,
                      num_threads=1):
    """Numpy twin of ``_kernels.advance_quadratic`` (see there)."""
    L, N = state.shape
    n1 = int(n_obs)
    n2 = N - n1
    filt = fmean.shape[0] > 0
    rec_s = rec_state.shape[0] > 0
    rec_f = filt and rec_mean.shape[0] > 0
    if L == 0 or n_steps == 0:
        return
    sqdt = np.sqrt(dt)
    sp = sparse_structure(lam, tens, force, noise, n1)
    alive = np.flatnonzero(fail_kind == 0)
    u = state[alive].copy()
    m = fmean[alive].copy() if filt else None
    R = fcov[alive].copy() if filt else None
    sid = ids[alive]

    def _retire(mask, k, kind):
        nonlocal alive, u, m, R, sid
        idx = alive[mask]
        fail_step[idx] = step0 + k
        fail_kind[idx] = kind
        keep = ~mask
        alive, u, sid = alive[keep], u[keep], sid[keep]
        if filt:
            m, R = m[keep], R[keep]

    for k in range(int(n_steps)):
        if alive.size == 0:
            break
        A0, A1, a0, a1 = _cg_coefficients(u, sp, n1)
        z = philox_normals(seed, sid, step0 + k, N)
        kick = np.zeros_like(u)
        for (c, b), v in zip(sp["noise_idx"], sp["noise_val"]):
            kick[:, c] = kick[:, c] + v * z[:, b]
        un = np.empty_like(u)
        for c in range(N):
            if c < n1:
                acc = A0[:, c].copy()
                for p in range(n2):
                    acc = acc + A1[:, c, p] * u[:, n1 + p]
            else:
                acc = a0[:, c - n1].copy()
                for p in range(n2):
                    acc = acc + a1[:, c - n1, p] * u[:, n1 + p]
            un[:, c] = u[:, c] + acc * dt + kick[:, c] * sqdt
        bad = ~np.all(np.isfinite(un) & (np.abs(un) <= cap), axis=1)
        if np.any(bad):
            # failed samples keep their last valid state
            state[alive[bad]] = u[bad]
            if filt:
                fmean[alive[bad]] = m[bad]
                fcov[alive[bad]] = R[bad]
            _retire(bad, k, FAIL_STATE)
            A0, A1, a0, a1 = A0[~bad], A1[~bad], a0[~bad], a1[~bad]
            un = un[~bad]
        if filt and alive.size:
            innov = np.empty((u.shape[0], n1))
            for c in range(n1):
                acc = A0[:, c].copy()
                for p in range(n2):
                    acc = acc + A1[:, c, p] * m[:, p]
                innov[:, c] = (un[:, c] - u[:, c]) - acc * dt
            W = np.einsum("lcp,cq->lpq", A1, sinv)
            G = np.einsum("lpc,lcq->lpq", R, W)
            mn = m + (a0 + np.einsum("lpq,lq->lp", a1, m)) * dt + np.einsum("lpq,lq->lp", G, innov)
            K = np.einsum("lpc,lcq->lpq", G, A1)
            drift = (np.einsum("lpc,lcq->lpq", a1, R) + np.einsum("lpc,lqc->lpq", R, a1)
                     - np.einsum("lpc,lcq->lpq", K, R))
            Rn = R + (drift + qmat) * dt
            Rn = 0.5 * (Rn + np.swapaxes(Rn, 1, 2))
            emin = _floor_psd(Rn, psd_floor)
            fbad = ~(np.all(np.isfinite(mn), axis=1) & np.all(np.isfinite(Rn), axis=(1, 2)))
            if np.any(fbad):
                state[alive[fbad]] = u[fbad]
                fmean[alive[fbad]] = m[fbad]
                fcov[alive[fbad]] = R[fbad]
                keep = ~fbad
                un, mn, Rn, emin = un[keep], mn[keep], Rn[keep], emin[keep]
                _retire(fbad, k, FAIL_FILTER)
            m, R = mn, Rn
        u = un
        if (rec_s or rec_f) and (k + 1) % stride == 0:
            j = (k + 1) // stride
            if rec_s:
                rec_state[j, alive] = u
            if rec_f:
                rec_mean[j, alive] = m
                rec_cov[j, alive] = R
                if n2 == 1:
                    e = np.maximum(emin, 0.0) if psd_floor else emin
                else:
                    e = np.linalg.eigvalsh(R)[:, 0]
                rec_mineig[j, alive] = e
    state[alive] = u
    if filt:
        fmean[alive] = m
        fcov[alive] = R


def mixture_logpdf(points, means, whiten, log_norm, num_threads=1, chunk: int = 2_000_000):
    """Numpy twin of ``_kernels.mixture_logpdf``."""
    from scipy.special import logsumexp

    P, d = points.shape
    M = means.shape[0]
    out = np.empty(P)
    step = max(1, chunk // max(1, M * d))
    for s in range(0, P, step):
        x = points[s:s + step]
        diff = x[:, None, :] - means[None, :, :]
        y = np.einsum("iab,pib->pia", whiten, diff)
        v = log_norm[None, :] - 0.5 * np.sum(y * y, axis=-1)
        out[s:s + step] = logsumexp(v, axis=1)
    return out
