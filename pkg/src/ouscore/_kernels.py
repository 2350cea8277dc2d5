"""Blocked moment accumulation for mixture density ratios over a point cloud.

For row m and cloud point n the argument is ``u = a_m + s_m z_n`` with
``a_m = shift[m] * x[m]`` and ``s_m = noise[m]``, and
``log f(u) = logsumexp_k(-u.A_k.u / 2 + b_k.u + c_k)``. Expanding the
quadratic in ``z_n`` leaves the cloud-only pieces ``z_n.A_k.z_n`` and
``A_k z_n``, computed once per cloud. Exponents are formed by a compiled
loop, exponentiated by numpy (vectorised), and reduced to means,
variances and the f/grad-f covariance by a second compiled loop. Inner
loops run over the cloud index on contiguous arrays so they vectorise.
"""

import math

import numba
import numpy as np

LOG_OVERFLOW = 700.0


class CloudQuadratics:
    """Cloud-only pieces of the expanded quadratic, laid out cloud-index last."""

    def __init__(self, z, quad):
        az = np.einsum("kij,nj->kin", quad, z)
        self.zt = np.ascontiguousarray(z.T)
        self.az = np.ascontiguousarray(az)
        self.zaz = np.ascontiguousarray(np.einsum("kin,in->kn", az, self.zt))


@numba.njit(cache=True, fastmath=True)
def _exponents(alpha, beta, s, zt, zaz, shifted, top):
    """shifted[k, n] = term_k(n) - max_k term_k(n); top[n] = max_k term_k(n)."""
    k_total, d = beta.shape
    n_pts = zt.shape[1]
    hs2 = 0.5 * s * s
    for k in range(k_total):
        row = shifted[k]
        a0 = alpha[k]
        q = zaz[k]
        for n in range(n_pts):
            row[n] = a0 - hs2 * q[n]
        for i in range(d):
            c = s * beta[k, i]
            zi = zt[i]
            for n in range(n_pts):
                row[n] += c * zi[n]
    if k_total == 1:
        for n in range(n_pts):
            top[n] = shifted[0, n]
            shifted[0, n] = 0.0
        return
    for n in range(n_pts):
        top[n] = shifted[0, n]
    for k in range(1, k_total):
        row = shifted[k]
        for n in range(n_pts):
            top[n] = max(top[n], row[n])
    for k in range(k_total):
        row = shifted[k]
        for n in range(n_pts):
            row[n] -= top[n]


@numba.njit(cache=True, fastmath=True)
def _reduce(weights, fscale, beta, s, gscale, az, fbuf, gbuf):
    """Moments over n of f = fscale * sum_k w_k and
    g_i = gscale * f * sum_k w_k (beta_ki - s az_kin) / sum_k w_k."""
    k_total, d = beta.shape
    n_pts = fscale.shape[0]
    mean_g = np.empty(d)
    var_g = np.empty(d)
    cov_fg = np.empty(d)
    if k_total == 1:
        for n in range(n_pts):
            fbuf[n] = fscale[n]
        for i in range(d):
            gi = gbuf[i]
            b = beta[0, i]
            a = az[0, i]
            for n in range(n_pts):
                gi[n] = gscale * fbuf[n] * (b - s * a[n])
    else:
        # fbuf temporarily holds 1 / sum_k w_k
        for n in range(n_pts):
            fbuf[n] = weights[0, n]
        for k in range(1, k_total):
            w = weights[k]
            for n in range(n_pts):
                fbuf[n] += w[n]
        for i in range(d):
            gi = gbuf[i]
            for n in range(n_pts):
                gi[n] = 0.0
            for k in range(k_total):
                w = weights[k]
                b = beta[k, i]
                a = az[k, i]
                for n in range(n_pts):
                    gi[n] += w[n] * (b - s * a[n])
            for n in range(n_pts):
                gi[n] = gscale * fscale[n] * gi[n]
        for n in range(n_pts):
            fbuf[n] = fscale[n] * fbuf[n]
    f0 = fbuf[0]
    s_f = 0.0
    s_ff = 0.0
    for n in range(n_pts):
        df = fbuf[n] - f0
        s_f += df
        s_ff += df * df
    mf = s_f / n_pts
    mean_f = f0 + mf
    var_f = max(s_ff / n_pts - mf * mf, 0.0)
    for i in range(d):
        gi = gbuf[i]
        g0 = gi[0]
        s_g = 0.0
        s_gg = 0.0
        s_fg = 0.0
        for n in range(n_pts):
            dg = gi[n] - g0
            s_g += dg
            s_gg += dg * dg
            s_fg += (fbuf[n] - f0) * dg
        mg = s_g / n_pts
        mean_g[i] = g0 + mg
        var_g[i] = max(s_gg / n_pts - mg * mg, 0.0)
        cov_fg[i] = s_fg / n_pts - mf * mg
    return mean_f, var_f, mean_g, var_g, cov_fg


def ratio_cloud_moments(x, shift, noise, gscale, quadratics, quad, lin, const):
    """Per-row mean/variance of ``f`` and ``grad f`` and their covariance.

    Returns ``(mean_f, mean_g, var_f, var_g, cov_fg, overflowed)``.
    """
    m_total, d = x.shape
    k_total = const.shape[0]
    zt, az, zaz = quadratics.zt, quadratics.az, quadratics.zaz
    n_pts = zt.shape[1]
    out_f = np.empty(m_total)
    out_g = np.empty((m_total, d))
    out_vf = np.empty(m_total)
    out_vg = np.empty((m_total, d))
    out_cfg = np.empty((m_total, d))
    a = shift[:, None] * x
    qa = np.einsum("kij,mj->mki", quad, a)
    beta_all = np.ascontiguousarray(lin[None, :, :] - qa)
    alpha_all = const[None, :] + np.einsum("mi,mki->mk", a, lin[None, :, :] - 0.5 * qa)
    shifted = np.empty((k_total, n_pts))
    top = np.empty(n_pts)
    fbuf = np.empty(n_pts)
    gbuf = np.empty((d, n_pts))
    log_k = math.log(k_total)
    overflow = False
    for m in range(m_total):
        _exponents(alpha_all[m], beta_all[m], noise[m], zt, zaz, shifted, top)
        if top.max() + log_k > LOG_OVERFLOW:
            overflow = True
        np.exp(top, out=top)
        if k_total > 1:
            np.exp(shifted, out=shifted)
        mf, vf, mg, vg, cfg = _reduce(shifted, top, beta_all[m], noise[m], gscale[m], az, fbuf, gbuf)
        out_f[m] = mf
        out_vf[m] = vf
        out_g[m] = mg
        out_vg[m] = vg
        out_cfg[m] = cfg
    return out_f, out_g, out_vf, out_vg, out_cfg, overflow


@numba.njit(cache=True)
def _rho_sq_ok(t, ex, i, j, eps):
    dt = abs(t[i] - t[j])
    room = eps - math.sqrt(dt)
    if room < 0.0:
        return False
    acc = 0.0
    for q in range(ex.shape[1]):
        diff = ex[i, q] - ex[j, q]
        acc += diff * diff
    return acc <= room * room


@numba.njit(cache=True)
def ou_greedy_cover(t, ex, eps, n_candidates, count_budget):
    """Greedy cover of time-sorted points under rho_OU with closed eps-balls.

    ``ex[i] = exp(-t[i]) x[i]``. Each round takes the first uncovered point
    p and, among up to ``n_candidates`` points of its eps-ball, centres the
    new ball where a strided count of newly covered points is largest. The
    ball always contains p, so the result is a valid cover.
    """
    n = t.shape[0]
    covered = np.zeros(n, dtype=np.bool_)
    tol = 1e-12
    e = eps + tol
    w = e * e
    count = 0
    i = 0
    cand = np.empty(n, dtype=np.int64)
    while True:
        while i < n and covered[i]:
            i += 1
        if i == n:
            return count
        lo = np.searchsorted(t, t[i] - w)
        hi = np.searchsorted(t, t[i] + w, side="right")
        m = 0
        for j in range(lo, hi):
            if _rho_sq_ok(t, ex, i, j, e):
                cand[m] = j
                m += 1
        best = i
        if m > 1:
            best_count = -1
            picks = min(m, n_candidates)
            for a in range(picks):
                c = cand[(a * (m - 1)) // max(picks - 1, 1)]
                clo = np.searchsorted(t, t[c] - w)
                chi = np.searchsorted(t, t[c] + w, side="right")
                stride = max(1, (chi - clo) // count_budget)
                hits = 0
                for j in range(clo, chi, stride):
                    if not covered[j] and _rho_sq_ok(t, ex, c, j, e):
                        hits += 1
                if hits > best_count:
                    best_count = hits
                    best = c
        clo = np.searchsorted(t, t[best] - w)
        chi = np.searchsorted(t, t[best] + w, side="right")
        for j in range(clo, chi):
            if not covered[j] and _rho_sq_ok(t, ex, best, j, e):
                covered[j] = True
        count += 1
