"""Compiled inner loops.

Everything here is allocation-free per step: the caller-facing drivers
allocate a workspace once per chunk and the per-step helpers write into
it.  Model data arrive as the tuple produced by
``DiffusiveModel.kernel_arrays``.

Workspace layout (``mats``, shape ``(NSLOT, n, n)``)::

    H L A M0 E R R2 M0R LR G1 G2 G0 U  + scratch

``dmats`` has shape ``(2, p, n, n)``: per-parameter derivatives of
``M0 R`` and ``L R``.
"""

import numpy as np
from numba import njit

DEGENERATE_TRACE = 1e-12
STRICT_PSD_TOL = 1e-8
_SERIES_RADIUS = 0.25

(H, L, A, M0, E, R, R2, M0R, LR, G1, G2, G0, U,
 T0, T1, T2, T3, T4, T5, T6, T7, MT) = range(22)
NSLOT = 22

# status codes returned by the drivers
OK = 0
DEGENERATE = 1
NOT_PSD = 2


@njit(cache=True)
def _mm(nt, a, b, out):
    n = len(nt)
    for i in range(n):
        for j in range(n):
            s = 0j
            for k in range(n):
                s += a[i, k] * b[k, j]
            out[i, j] = s


@njit(cache=True)
def _mm_nh(nt, a, b, out):
    # a @ b^+
    n = len(nt)
    for i in range(n):
        for j in range(n):
            s = 0j
            for k in range(n):
                s += a[i, k] * np.conj(b[j, k])
            out[i, j] = s


@njit(cache=True)
def _mm_hn(nt, a, b, out):
    # a^+ @ b
    n = len(nt)
    for i in range(n):
        for j in range(n):
            s = 0j
            for k in range(n):
                s += np.conj(a[k, i]) * b[k, j]
            out[i, j] = s


@njit(cache=True)
def _re_tr(nt, a):
    s = 0.0
    for i in range(len(nt)):
        s += a[i, i].real
    return s


@njit(cache=True)
def _re_tr_prod(nt, a, b):
    # Re Tr(a b)
    n = len(nt)
    s = 0.0
    for i in range(n):
        for k in range(n):
            s += (a[i, k] * b[k, i]).real
    return s


@njit(cache=True)
def _maxabs(nt, a):
    m = 0.0
    n = len(nt)
    for i in range(n):
        for j in range(n):
            v = abs(a[i, j].real) + abs(a[i, j].imag)
            if v > m:
                m = v
    return m


@njit(cache=True)
def min_eig(a):
    n = a.shape[0]
    if n == 1:
        return a[0, 0].real
    if n == 2:
        m = 0.5 * (a[0, 0].real + a[1, 1].real)
        d = 0.5 * (a[0, 0].real - a[1, 1].real)
        off = 0.5 * abs(a[0, 1] + np.conj(a[1, 0]))
        return m - np.sqrt(d * d + off * off)
    h = 0.5 * (a + a.conj().T)
    return np.linalg.eigvalsh(h)[0]


def alloc(n, p):
    mats = np.zeros((NSLOT, n, n), dtype=np.complex128)
    dmats = np.zeros((2, p, n, n), dtype=np.complex128)
    scal = np.zeros(4)
    dse = np.zeros(p)
    w = np.zeros(n)
    return mats, dmats, scal, dse, w


@njit(cache=True)
def prepare(nt, theta, h0, hc, l0, lc, se0, sec, dt, tp, want_grad, mats, dmats, scal, dse, w):
    """Evaluate all dy-independent operators at ``theta``.

    ``scal`` receives ``[sqrt(eta), use_eig]``.
    """
    n = len(nt)
    p = theta.shape[0]
    h = mats[H]
    l = mats[L]
    se = se0
    for a in range(n):
        for b in range(n):
            hv = h0[a, b]
            lv = l0[a, b]
            for j in range(p):
                hv += theta[j] * hc[j, a, b]
                lv += theta[j] * lc[j, a, b]
            h[a, b] = hv
            l[a, b] = lv
    for j in range(p):
        se += theta[j] * sec[j]
        dse[j] = sec[j]
    scal[0] = se

    lhl = mats[T0]
    _mm_hn(nt, l, l, lhl)
    am = mats[A]
    m0 = mats[M0]
    for a in range(n):
        for b in range(n):
            am[a, b] = 1j * h[a, b] + 0.5 * lhl[a, b]
            m0[a, b] = -dt * am[a, b]
        m0[a, a] += 1.0
    e = mats[E]
    _mm_hn(nt, am, am, e)
    dt2 = dt * dt
    for a in range(n):
        for b in range(n):
            e[a, b] *= dt2

    r = mats[R]
    use_eig = False
    if tp:
        enorm = 0.0
        for a in range(n):
            for b in range(n):
                enorm += abs(e[a, b]) ** 2
        enorm = np.sqrt(enorm)
        if enorm < _SERIES_RADIUS:
            # binomial series of (I + E)^(-1/2)
            term = mats[T1]
            tmp = mats[T2]
            for a in range(n):
                for b in range(n):
                    term[a, b] = 0.0
                    r[a, b] = 0.0
                term[a, a] = 1.0
                r[a, a] = 1.0
            for k in range(1, 200):
                _mm(nt, term, e, tmp)
                coef = -(2.0 * k - 1.0) / (2.0 * k)
                for a in range(n):
                    for b in range(n):
                        term[a, b] = coef * tmp[a, b]
                        r[a, b] += term[a, b]
                if _maxabs(nt, term) < 1e-18:
                    break
        else:
            use_eig = True
            s = np.empty((n, n), dtype=np.complex128)
            for a in range(n):
                for b in range(n):
                    s[a, b] = 0.5 * (e[a, b] + np.conj(e[b, a]))
                s[a, a] += 1.0
            ww, uu = np.linalg.eigh(s)
            u = mats[U]
            for a in range(n):
                w[a] = np.sqrt(ww[a])
                for b in range(n):
                    u[a, b] = uu[a, b]
            for a in range(n):
                for b in range(n):
                    v = 0j
                    for k in range(n):
                        v += u[a, k] * np.conj(u[b, k]) / w[k]
                    r[a, b] = v
    else:
        for a in range(n):
            for b in range(n):
                r[a, b] = 0.0
            r[a, a] = 1.0
    scal[1] = 1.0 if use_eig else 0.0
    _mm(nt, r, r, mats[R2])
    _mm(nt, m0, r, mats[M0R])
    _mm(nt, l, r, mats[LR])
    g1 = mats[G1]
    _mm_hn(nt, mats[M0R], mats[LR], mats[T1])
    for a in range(n):
        for b in range(n):
            g1[a, b] = mats[T1][a, b] + np.conj(mats[T1][b, a])
    _mm_hn(nt, mats[LR], mats[LR], mats[G2])
    g0 = mats[G0]
    for a in range(n):
        for b in range(n):
            g0[a, b] = 0.0 if tp else e[a, b]

    if not want_grad:
        return
    t1 = mats[T1]
    t2 = mats[T2]
    t3 = mats[T3]
    da = mats[T4]
    de = mats[T5]
    x = mats[T6]
    xn = mats[T7]
    for j in range(p):
        dl = lc[j]
        dh = hc[j]
        _mm_hn(nt, dl, l, t1)
        _mm_hn(nt, l, dl, t2)
        for a in range(n):
            for b in range(n):
                da[a, b] = 1j * dh[a, b] + 0.5 * (t1[a, b] + t2[a, b])
        _mm_hn(nt, da, am, t1)
        _mm_hn(nt, am, da, t2)
        for a in range(n):
            for b in range(n):
                de[a, b] = dt2 * (t1[a, b] + t2[a, b])
        # dR solves R X + X R = -R^2 dE R^2
        for a in range(n):
            for b in range(n):
                x[a, b] = 0.0
        if tp:
            if use_eig:
                u = mats[U]
                _mm(nt, de, u, t1)
                _mm_hn(nt, u, t1, t2)
                for a in range(n):
                    for b in range(n):
                        t2[a, b] *= -1.0 / (w[a] * w[b] * (w[a] + w[b]))
                _mm_nh(nt, t2, u, t1)
                _mm(nt, u, t1, x)
            else:
                _mm(nt, mats[R2], de, t1)
                _mm(nt, t1, mats[R2], t3)
                for a in range(n):
                    for b in range(n):
                        t3[a, b] = -t3[a, b]
                        x[a, b] = 0.5 * t3[a, b]
                for _ in range(100):
                    _mm(nt, r, x, t1)
                    _mm(nt, x, r, t2)
                    delta = 0.0
                    for a in range(n):
                        for b in range(n):
                            # (R - I) X + X (R - I) = R X + X R - 2X
                            v = 0.5 * (t3[a, b] - (t1[a, b] + t2[a, b] - 2.0 * x[a, b]))
                            dv = abs(v.real - x[a, b].real) + abs(v.imag - x[a, b].imag)
                            if dv > delta:
                                delta = dv
                            xn[a, b] = v
                    for a in range(n):
                        for b in range(n):
                            x[a, b] = xn[a, b]
                    if delta <= 1e-15 * _maxabs(nt, x):
                        break
        dm0r = dmats[0, j]
        dlr = dmats[1, j]
        # d(M0 R) = -dt dA R + M0 X
        _mm(nt, da, r, t1)
        _mm(nt, m0, x, t2)
        for a in range(n):
            for b in range(n):
                dm0r[a, b] = -dt * t1[a, b] + t2[a, b]
        _mm(nt, dl, r, t1)
        _mm(nt, l, x, t2)
        for a in range(n):
            for b in range(n):
                dlr[a, b] = t1[a, b] + t2[a, b]


@njit(cache=True)
def signal(nt, mats, scal, rho, dt):
    """Predicted signal ``sqrt(eta) Tr((L + L^+) rho) dt``."""
    return scal[0] * 2.0 * _re_tr_prod(nt, mats[L], rho) * dt


@njit(cache=True)
def apply_step(nt, dy, rho, xi, want_grad, mats, dmats, scal, dse, dt, out_rho, out_xi, grad, out):
    """One filter (+ sensitivity) update; in-place safe.

    ``out`` receives ``[Tr K(rho), delta]`` where ``delta`` is
    ``Tr K(rho) - Tr(rho)`` evaluated without cancellation.
    Returns False on a degenerate trace (outputs then untouched).
    """
    n = len(nt)
    se = scal[0]
    c = (1.0 - se * se) * dt
    m0r = mats[M0R]
    lr = mats[LR]
    mt = mats[MT]
    for a in range(n):
        for b in range(n):
            mt[a, b] = m0r[a, b] + se * dy * lr[a, b]
    t_rm = mats[T0]   # rho Mt^+
    t_rl = mats[T1]   # rho LR^+
    lrl = mats[T2]    # LR rho LR^+
    k = mats[T3]
    _mm_nh(nt, rho, mt, t_rm)
    _mm(nt, mt, t_rm, k)
    _mm_nh(nt, rho, lr, t_rl)
    _mm(nt, lr, t_rl, lrl)
    for a in range(n):
        for b in range(n):
            k[a, b] += c * lrl[a, b]
    tr = _re_tr(nt, k)
    delta = (se * dy * _re_tr_prod(nt, rho, mats[G1])
             + se * se * (dy * dy - dt) * _re_tr_prod(nt, rho, mats[G2])
             + _re_tr_prod(nt, rho, mats[G0]))
    out[0] = tr
    out[1] = delta
    if not tr > DEGENERATE_TRACE:
        return False
    if want_grad:
        p = xi.shape[0]
        dmt = mats[T4]
        nn = mats[T5]
        t6 = mats[T6]
        t7 = mats[T7]
        for j in range(p):
            dm0r = dmats[0, j]
            dlr = dmats[1, j]
            dc = -2.0 * se * dse[j] * dt
            for a in range(n):
                for b in range(n):
                    dmt[a, b] = dm0r[a, b] + dy * (dse[j] * lr[a, b] + se * dlr[a, b])
            _mm(nt, dmt, t_rm, t6)          # dMt rho Mt^+
            _mm(nt, dlr, t_rl, t7)          # dLR rho LR^+
            for a in range(n):
                for b in range(n):
                    nn[a, b] = (t6[a, b] + np.conj(t6[b, a]) + dc * lrl[a, b]
                                + c * (t7[a, b] + np.conj(t7[b, a])))
            xj = xi[j]
            _mm_nh(nt, xj, mt, t6)
            _mm(nt, mt, t6, t7)
            for a in range(n):
                for b in range(n):
                    nn[a, b] += t7[a, b]
            _mm_nh(nt, xj, lr, t6)
            _mm(nt, lr, t6, t7)
            for a in range(n):
                for b in range(n):
                    nn[a, b] += c * t7[a, b]
            trn = _re_tr(nt, nn)
            grad[j] = trn / tr
            f = trn / (tr * tr)
            oj = out_xi[j]
            for a in range(n):
                for b in range(n):
                    oj[a, b] = nn[a, b] / tr - f * k[a, b]
    for a in range(n):
        for b in range(n):
            out_rho[a, b] = 0.5 * (k[a, b] + np.conj(k[b, a])) / tr
    return True


@njit(cache=True)
def learning_rate(kind, params, times, values, t):
    if kind == 0:
        return params[0]
    if kind == 1:
        return params[0] * (1.0 + t / params[1]) ** (-params[2])
    g = values[0]
    for i in range(times.shape[0]):
        if t >= times[i]:
            g = values[i]
    return g


@njit(cache=True)
def online_chunk(nt, dys, k0, theta, rho, xi, state, free, lo, hi,
                 lr_kind, lr_params, lr_times, lr_values,
                 h0, hc, l0, lc, se0, sec, dt, tp,
                 decim, strict, log_theta, log_rho, log_state):
    """Coupled filter / sensitivity / gradient-ascent recursion.

    ``state`` holds ``[loglik, last_tr]`` and is updated in place, as are
    ``theta``, ``rho`` and ``xi``.  Rows are logged (pre-step values) at
    every step index divisible by ``decim``; ``log_state`` rows are
    ``[step, loglik, dy, innovation, gamma]``.

    Returns ``(status, step, rows_logged)``.
    """
    n = len(nt)
    p = theta.shape[0]
    mats = np.zeros((NSLOT, n, n), dtype=np.complex128)
    dmats = np.zeros((2, p, n, n), dtype=np.complex128)
    scal = np.zeros(4)
    dse = np.zeros(p)
    w = np.zeros(n)
    grad = np.zeros(p)
    out = np.zeros(2)
    nlog = 0
    for i in range(dys.shape[0]):
        k = k0 + i
        dy = dys[i]
        prepare(nt, theta, h0, hc, l0, lc, se0, sec, dt, tp, True, mats, dmats, scal, dse, w)
        innov = dy - signal(nt, mats, scal, rho, dt)
        gamma = learning_rate(lr_kind, lr_params, lr_times, lr_values, k * dt)
        if k % decim == 0:
            for j in range(p):
                log_theta[nlog, j] = theta[j]
            for a in range(n):
                for b in range(n):
                    log_rho[nlog, a, b] = rho[a, b]
            log_state[nlog, 0] = k
            log_state[nlog, 1] = state[0]
            log_state[nlog, 2] = dy
            log_state[nlog, 3] = innov
            log_state[nlog, 4] = gamma
            nlog += 1
        if not apply_step(nt, dy, rho, xi, True, mats, dmats, scal, dse, dt, rho, xi, grad, out):
            state[1] = out[0]
            return DEGENERATE, k, nlog
        state[0] += np.log1p(out[1])
        state[1] = out[0]
        if strict:
            lam = min_eig(rho)
            if lam < -STRICT_PSD_TOL:
                state[1] = lam
                return NOT_PSD, k, nlog
        for j in range(p):
            if free[j]:
                v = theta[j] + gamma * grad[j]
                if v < lo[j]:
                    v = lo[j]
                elif v > hi[j]:
                    v = hi[j]
                theta[j] = v
    return OK, k0 + dys.shape[0], nlog


@njit(cache=True)
def fixed_chunk(nt, dys, k0, theta, rho, xi, state, want_grad, gsum,
                h0, hc, l0, lc, se0, sec, dt, tp, strict):
    """Filter (and sensitivities) at a fixed parameter over a record.

    Accumulates the log-likelihood into ``state[0]`` and the gradient into
    ``gsum``.  Returns ``(status, step)``.
    """
    n = len(nt)
    p = theta.shape[0]
    mats = np.zeros((NSLOT, n, n), dtype=np.complex128)
    dmats = np.zeros((2, p, n, n), dtype=np.complex128)
    scal = np.zeros(4)
    dse = np.zeros(p)
    w = np.zeros(n)
    grad = np.zeros(p)
    out = np.zeros(2)
    prepare(nt, theta, h0, hc, l0, lc, se0, sec, dt, tp, want_grad, mats, dmats, scal, dse, w)
    for i in range(dys.shape[0]):
        if not apply_step(nt, dys[i], rho, xi, want_grad, mats, dmats, scal, dse, dt, rho, xi, grad, out):
            state[1] = out[0]
            return DEGENERATE, k0 + i
        state[0] += np.log1p(out[1])
        if want_grad:
            for j in range(p):
                gsum[j] += grad[j]
        if strict:
            lam = min_eig(rho)
            if lam < -STRICT_PSD_TOL:
                state[1] = lam
                return NOT_PSD, k0 + i
    return OK, k0 + dys.shape[0]


@njit(cache=True)
def audit_chunk(nt, dys, k0, theta, rho, xi, worst, h0, hc, l0, lc, se0, sec, dt, tp):
    """Filter and sensitivities at fixed ``theta`` with per-step invariant checks.

    ``worst`` holds running extremes over every post-step state:
    ``[max |Tr rho - 1|, max |rho - rho^+|, min eigenvalue,
    max |Tr xi_j|, max |xi_j - xi_j^+|]``.  Returns ``(status, step)``.
    """
    n = len(nt)
    p = theta.shape[0]
    mats = np.zeros((NSLOT, n, n), dtype=np.complex128)
    dmats = np.zeros((2, p, n, n), dtype=np.complex128)
    scal = np.zeros(4)
    dse = np.zeros(p)
    w = np.zeros(n)
    grad = np.zeros(p)
    out = np.zeros(2)
    prepare(nt, theta, h0, hc, l0, lc, se0, sec, dt, tp, True, mats, dmats, scal, dse, w)
    for i in range(dys.shape[0]):
        if not apply_step(nt, dys[i], rho, xi, True, mats, dmats, scal, dse, dt, rho, xi, grad, out):
            return DEGENERATE, k0 + i
        tr = 0.0
        herm = 0.0
        for a in range(n):
            tr += rho[a, a].real
            for b in range(n):
                herm = max(herm, abs(rho[a, b] - np.conj(rho[b, a])))
        worst[0] = max(worst[0], abs(tr - 1.0))
        worst[1] = max(worst[1], herm)
        worst[2] = min(worst[2], min_eig(rho))
        for j in range(p):
            trx = 0j
            for a in range(n):
                trx += xi[j, a, a]
                for b in range(n):
                    worst[4] = max(worst[4], abs(xi[j, a, b] - np.conj(xi[j, b, a])))
            worst[3] = max(worst[3], abs(trx))
    return OK, k0 + dys.shape[0]


@njit(cache=True)
def _truth_theta(base, amp, freq, tscale, sqrt_mask, t, out):
    for j in range(base.shape[0]):
        v = base[j] + amp[j] * np.sin(freq[j] * tscale * t)
        if sqrt_mask[j]:
            v = np.sqrt(v) if v > 0.0 else 0.0
        out[j] = v


@njit(cache=True)
def simulate_chunk(nt, dws, k0, rho, base, amp, freq, tscale, sqrt_mask, static,
                   h0, hc, l0, lc, se0, sec, dt, tp,
                   decim, strict, dy_out, log_theta, log_rho, log_k):
    """Ground-truth trajectory driven by Wiener increments ``dws``.

    ``base`` and ``amp`` are in natural coordinates.  Logged rows hold the
    pre-step true parameters (working coordinates) and state.
    Returns ``(status, step, rows_logged)``.
    """
    n = len(nt)
    p = base.shape[0]
    mats = np.zeros((NSLOT, n, n), dtype=np.complex128)
    dmats = np.zeros((2, p, n, n), dtype=np.complex128)
    scal = np.zeros(4)
    dse = np.zeros(p)
    w = np.zeros(n)
    out = np.zeros(2)
    theta = np.zeros(p)
    xi = np.zeros((0, n, n), dtype=np.complex128)
    grad = np.zeros(0)
    if static:
        _truth_theta(base, amp, freq, tscale, sqrt_mask, 0.0, theta)
        prepare(nt, theta, h0, hc, l0, lc, se0, sec, dt, tp, False, mats, dmats, scal, dse, w)
    nlog = 0
    for i in range(dws.shape[0]):
        k = k0 + i
        if not static:
            _truth_theta(base, amp, freq, tscale, sqrt_mask, k * dt, theta)
            prepare(nt, theta, h0, hc, l0, lc, se0, sec, dt, tp, False, mats, dmats, scal, dse, w)
        dy = signal(nt, mats, scal, rho, dt) + dws[i]
        dy_out[i] = dy
        if k % decim == 0:
            for j in range(p):
                log_theta[nlog, j] = theta[j]
            for a in range(n):
                for b in range(n):
                    log_rho[nlog, a, b] = rho[a, b]
            log_k[nlog] = k
            nlog += 1
        if not apply_step(nt, dy, rho, xi, False, mats, dmats, scal, dse, dt, rho, xi, grad, out):
            return DEGENERATE, k, nlog
        if strict:
            if min_eig(rho) < -STRICT_PSD_TOL:
                return NOT_PSD, k, nlog
    return OK, k0 + dws.shape[0], nlog
