"""numba kernels for the contouring OCP.

Decision vector z has 5 entries per stage k = 0..N-1::

    z[5k:5k+4] = rotor thrusts f_k
    z[5k+4]    = progress rate v_{k+1}  (so Delta v_k = v_{k+1} - v_k)

The progress rate is a decision variable instead of its increment, which turns
its bounds into simple boxes.  States are always obtained by simulating z from
x0, so the predicted trajectory satisfies the discrete dynamics exactly.

cfg layout::

    [N, dt, q_l, Qw_x, Qw_y, Qw_z, f_min, f_max, v_max,
     wmax_x, wmax_y, wmax_z, rho, max_iter, tol, damping]

phi_tail layout: [q_nom, r_dv, r_df, mu]
"""

import math

import numpy as np
from numba import njit

from .dynamics import NX, rk4, rk4_jac
from .track import path_frame

NR_STAGE = 10  # lag 1, contour 3, rates 3, rate-bound slack 3

STATUS_CONVERGED = 0
STATUS_MAX_ITER = 1
STATUS_FAILED = 2


@njit(cache=True)
def contour_weight(theta, gate_theta, heights, widths, q_nom, length, closed):
    """Gaussian-shaped contour weight and its derivative w.r.t. theta."""
    q = q_nom
    dq = 0.0
    for j in range(gate_theta.shape[0]):
        d = theta - gate_theta[j]
        if closed:
            d = (d + 0.5 * length) % length - 0.5 * length
        w2 = widths[j] * widths[j]
        e = heights[j] * math.exp(-0.5 * d * d / w2)
        q += e
        dq -= e * d / w2
    return q, dq


@njit(cache=True)
def stage_residual(x, theta, breaks, coefs, length, closed, gate_theta, heights, widths, q_nom, cfg, r, jac, drdth):
    """Residuals of one state stage; optionally their Jacobians.

    jac is (NR_STAGE, NX) w.r.t. the 13-state, drdth the theta derivative.
    """
    pos = np.empty(3)
    tan = np.empty(3)
    dtan = np.empty(3)
    dpos = np.empty(3)
    path_frame(breaks, coefs, length, closed, theta, pos, tan, dtan, dpos)
    d0 = x[0] - pos[0]
    d1 = x[1] - pos[1]
    d2 = x[2] - pos[2]
    el = tan[0] * d0 + tan[1] * d1 + tan[2] * d2
    ec0 = d0 - el * tan[0]
    ec1 = d1 - el * tan[1]
    ec2 = d2 - el * tan[2]
    qc, dqc = contour_weight(theta, gate_theta, heights, widths, q_nom, length, closed)
    sql = math.sqrt(cfg[2])
    sqc = math.sqrt(qc)
    r[0] = sql * el
    r[1] = sqc * ec0
    r[2] = sqc * ec1
    r[3] = sqc * ec2
    srho = math.sqrt(cfg[12])
    for i in range(3):
        w = x[10 + i]
        r[4 + i] = math.sqrt(cfg[3 + i]) * w
        excess = abs(w) - cfg[9 + i]
        r[7 + i] = srho * excess if excess > 0.0 else 0.0
    if jac.shape[0] == 0:
        return
    jac[:, :] = 0.0
    # lag
    for k in range(3):
        jac[0, k] = sql * tan[k]
    # contour: (I - t t^T)
    for i in range(3):
        for k in range(3):
            val = -tan[i] * tan[k]
            if i == k:
                val += 1.0
            jac[1 + i, k] = sqc * val
    for i in range(3):
        w = x[10 + i]
        jac[4 + i, 10 + i] = math.sqrt(cfg[3 + i])
        if abs(w) - cfg[9 + i] > 0.0:
            jac[7 + i, 10 + i] = srho * (1.0 if w > 0 else -1.0)
    # theta derivatives
    del_ = dtan[0] * d0 + dtan[1] * d1 + dtan[2] * d2 - (tan[0] * dpos[0] + tan[1] * dpos[1] + tan[2] * dpos[2])
    drdth[0] = sql * del_
    ec = (ec0, ec1, ec2)
    qfac = 0.5 * dqc / sqc
    for i in range(3):
        dec = -dpos[i] - del_ * tan[i] - el * dtan[i]
        drdth[1 + i] = qfac * ec[i] + sqc * dec
    for i in range(6):
        drdth[4 + i] = 0.0


@njit(cache=True)
def simulate(z, x0, theta0, v0, model, cfg, xs, thetas, vs):
    """Roll the decision vector forward; returns False on non-finite states."""
    N = int(cfg[0])
    dt = cfg[1]
    xs[0, :] = x0
    thetas[0] = theta0
    vs[0] = v0
    f = np.empty(4)
    out = np.empty(NX)
    for k in range(N):
        for i in range(4):
            f[i] = z[5 * k + i]
        rk4(xs[k], f, model, 1.0, dt, out)
        for i in range(NX):
            if not math.isfinite(out[i]):
                return False
        xs[k + 1, :] = out
        thetas[k + 1] = thetas[k] + vs[k] * dt
        vs[k + 1] = z[5 * k + 4]
    return True


@njit(cache=True)
def total_cost(z, xs, thetas, vs, f_prev, breaks, coefs, length, closed, gate_theta, heights, widths, phi_tail, cfg):
    N = int(cfg[0])
    r = np.empty(NR_STAGE)
    empty = np.empty((0, NX))
    dth = np.empty(NR_STAGE)
    q_nom, r_dv, r_df, mu = phi_tail[0], phi_tail[1], phi_tail[2], phi_tail[3]
    c = 0.0
    for k in range(N + 1):
        stage_residual(xs[k], thetas[k], breaks, coefs, length, closed, gate_theta, heights, widths, q_nom, cfg, r, empty, dth)
        for i in range(NR_STAGE):
            c += r[i] * r[i]
        c -= mu * vs[k]
    for k in range(N):
        dv = vs[k + 1] - vs[k]
        c += r_dv * dv * dv
        for i in range(4):
            fp = f_prev[i] if k == 0 else z[5 * (k - 1) + i]
            df = z[5 * k + i] - fp
            c += r_df * df * df
    return c


@njit(cache=True)
def linearize(z, x0, theta0, v0, f_prev, model, breaks, coefs, length, closed, gate_theta, heights, widths, phi_tail, cfg, xs, thetas, vs):
    """Residual vector and transposed Jacobian (nz x nr) at z.

    Returns (ok, r, Jt, const) where const collects the stage-0 terms.
    """
    N = int(cfg[0])
    dt = cfg[1]
    nz = 5 * N
    nr = NR_STAGE * N + 5 * N
    q_nom, r_dv, r_df = phi_tail[0], phi_tail[1], phi_tail[2]
    r = np.zeros(nr)
    Jt = np.zeros((nz, nr))
    ST = np.zeros((N + 1, nz, NX))
    Ad = np.empty((NX, NX))
    Bd = np.empty((NX, 4))
    f = np.empty(4)
    out = np.empty(NX)
    xs[0, :] = x0
    thetas[0] = theta0
    vs[0] = v0
    for k in range(N):
        for i in range(4):
            f[i] = z[5 * k + i]
        rk4_jac(xs[k], f, model, dt, out, Ad, Bd)
        for i in range(NX):
            if not math.isfinite(out[i]):
                return False, r, Jt, 0.0
        xs[k + 1, :] = out
        thetas[k + 1] = thetas[k] + vs[k] * dt
        vs[k + 1] = z[5 * k + 4]
        m = 5 * k
        # ST[k+1, :m] = ST[k, :m] @ Ad^T
        for a in range(m):
            for i in range(NX):
                acc = 0.0
                for j in range(NX):
                    acc += ST[k, a, j] * Ad[i, j]
                ST[k + 1, a, i] = acc
        for i in range(4):
            for j in range(NX):
                ST[k + 1, m + i, j] = Bd[j, i]

    rs = np.empty(NR_STAGE)
    jac = np.empty((NR_STAGE, NX))
    dth = np.empty(NR_STAGE)
    empty = np.empty((0, NX))
    stage_residual(xs[0], thetas[0], breaks, coefs, length, closed, gate_theta, heights, widths, q_nom, cfg, rs, empty, dth)
    const = 0.0
    for i in range(NR_STAGE):
        const += rs[i] * rs[i]
    for k in range(1, N + 1):
        stage_residual(xs[k], thetas[k], breaks, coefs, length, closed, gate_theta, heights, widths, q_nom, cfg, rs, jac, dth)
        row = NR_STAGE * (k - 1)
        r[row:row + NR_STAGE] = rs
        m = 5 * k
        # jac only touches position (0:3) and body-rate (10:13) columns
        for a in range(m):
            for i in range(NR_STAGE):
                acc = 0.0
                for j in range(3):
                    acc += ST[k, a, j] * jac[i, j] + ST[k, a, 10 + j] * jac[i, 10 + j]
                Jt[a, row + i] = acc
        # theta_k = theta_0 + dt (v_0 + v_1 + ... + v_{k-1}); v_j sits at column 5j-1
        for j in range(1, k):
            col = 5 * j - 1
            for i in range(NR_STAGE):
                Jt[col, row + i] += dt * dth[i]
    srdv = math.sqrt(r_dv)
    srdf = math.sqrt(r_df)
    base = NR_STAGE * N
    for k in range(N):
        vprev = v0 if k == 0 else z[5 * k - 1]
        r[base + k] = srdv * (z[5 * k + 4] - vprev)
        Jt[5 * k + 4, base + k] = srdv
        if k > 0:
            Jt[5 * k - 1, base + k] = -srdv
    base = NR_STAGE * N + N
    for k in range(N):
        for i in range(4):
            fp = f_prev[i] if k == 0 else z[5 * (k - 1) + i]
            row = base + 4 * k + i
            r[row] = srdf * (z[5 * k + i] - fp)
            Jt[5 * k + i, row] = srdf
            if k > 0:
                Jt[5 * (k - 1) + i, row] = -srdf
    return True, r, Jt, const


@njit(cache=True)
def gradient(z, x0, theta0, v0, f_prev, model, breaks, coefs, length, closed, gate_theta, heights, widths, phi_tail, cfg):
    """Exact cost gradient assembled from the Gauss-Newton residual Jacobian."""
    N = int(cfg[0])
    xs = np.empty((N + 1, NX))
    thetas = np.empty(N + 1)
    vs = np.empty(N + 1)
    ok, r, Jt, const = linearize(z, x0, theta0, v0, f_prev, model, breaks, coefs, length, closed, gate_theta, heights, widths, phi_tail, cfg, xs, thetas, vs)
    g = 2.0 * (Jt @ r)
    for k in range(N):
        g[5 * k + 4] -= phi_tail[3]
    return g


@njit(cache=True)
def _spd_solve(A, b):
    """Solve A x = b for symmetric positive definite A (Cholesky)."""
    n = b.shape[0]
    L = np.linalg.cholesky(A)
    y = np.empty(n)
    for i in range(n):
        acc = b[i]
        for j in range(i):
            acc -= L[i, j] * y[j]
        y[i] = acc / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for j in range(i + 1, n):
            acc -= L[j, i] * x[j]
        x[i] = acc / L[i, i]
    return x


@njit(cache=True)
def _projected_newton(H, g, lo, hi, tol, d):
    """min 0.5 d'Hd + g'd  s.t. lo <= d <= hi  (H positive definite).

    Projected Newton with an Armijo search along the projection arc, started
    from the feasible point d (modified in place).  tol is relative to max|g|.
    """
    n = g.shape[0]
    G = H @ d + g
    free = np.empty(n, dtype=np.int64)
    step = np.zeros(n)
    dn = np.empty(n)
    gscale = 0.0
    for i in range(n):
        gscale = max(gscale, abs(g[i]))
    atol = tol * gscale + 1e-300
    for it in range(50):
        pg = 0.0
        for i in range(n):
            t = d[i] - G[i]
            if t < lo[i]:
                t = lo[i]
            elif t > hi[i]:
                t = hi[i]
            pg = max(pg, abs(t - d[i]))
        if pg <= atol:
            break
        eps = min(pg, 1e-3)
        nf = 0
        for i in range(n):
            if (d[i] - lo[i] <= eps and G[i] > 0.0) or (hi[i] - d[i] <= eps and G[i] < 0.0):
                continue
            free[nf] = i
            nf += 1
        step[:] = 0.0
        if nf > 0:
            Hf = np.empty((nf, nf))
            gf = np.empty(nf)
            for a in range(nf):
                ia = free[a]
                gf[a] = -G[ia]
                for b in range(nf):
                    Hf[a, b] = H[ia, free[b]]
            sf = _spd_solve(Hf, gf)
            for a in range(nf):
                step[free[a]] = sf[a]
        q0 = 0.5 * (d @ (H @ d)) + g @ d
        alpha = 1.0
        accepted = False
        clipped = False
        for _ in range(40):
            clipped = False
            for i in range(n):
                t = d[i] + alpha * step[i]
                if t < lo[i]:
                    t = lo[i]
                    clipped = True
                elif t > hi[i]:
                    t = hi[i]
                    clipped = True
                dn[i] = t
            q1 = 0.5 * (dn @ (H @ dn)) + g @ dn
            if q1 <= q0 + 1e-4 * (G @ (dn - d)):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        d[:] = dn
        G = H @ d + g
        if alpha == 1.0 and not clipped:
            # exact minimiser on the current face; optimal if the fixed
            # variables still push against their bounds
            ok = True
            for i in range(n):
                if d[i] - lo[i] <= eps and G[i] < -atol:
                    ok = False
                elif hi[i] - d[i] <= eps and G[i] > atol:
                    ok = False
            if ok:
                break
    return d, it


@njit(cache=True)
def box_qp(H, g, lo, hi, tol):
    """min 0.5 d'Hd + g'd  s.t. lo <= d <= hi  (H positive definite).

    Primal-dual active set iteration (a semismooth Newton method), which
    usually settles the active set in a handful of solves.  Falls back to
    projected Newton if the sets cycle.  Requires lo <= hi.
    Returns (d, iterations).
    """
    n = g.shape[0]
    d = np.zeros(n)
    lam = np.empty(n)
    state = np.zeros(n, dtype=np.int64)  # -1 lower, +1 upper, 0 free
    prev = np.full(n, 2, dtype=np.int64)
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        d[i] = min(max(0.0, lo[i]), hi[i])
    G = H @ d + g
    for i in range(n):
        lam[i] = -G[i]
    for it in range(25):
        same = True
        for i in range(n):
            t = d[i] + lam[i] / H[i, i]
            st = -1 if t < lo[i] else (1 if t > hi[i] else 0)
            state[i] = st
            if st != prev[i]:
                same = False
        if same:
            return d, it
        nf = 0
        for i in range(n):
            if state[i] == -1:
                d[i] = lo[i]
            elif state[i] == 1:
                d[i] = hi[i]
            else:
                idx[nf] = i
                nf += 1
        if nf > 0:
            Hf = np.empty((nf, nf))
            rhs = np.empty(nf)
            for a in range(nf):
                ia = idx[a]
                acc = -g[ia]
                for j in range(n):
                    if state[j] != 0:
                        acc -= H[ia, j] * d[j]
                rhs[a] = acc
                for b in range(nf):
                    Hf[a, b] = H[ia, idx[b]]
            sf = _spd_solve(Hf, rhs)
            for a in range(nf):
                d[idx[a]] = sf[a]
        G = H @ d + g
        for i in range(n):
            lam[i] = 0.0 if state[i] == 0 else -G[i]
            prev[i] = state[i]
    for i in range(n):
        d[i] = min(max(d[i], lo[i]), hi[i])
    d, k = _projected_newton(H, g, lo, hi, tol, d)
    return d, 25 + k


@njit(cache=True)
def projected_gradient_norm(z, g, lb, ub):
    m = 0.0
    for i in range(z.shape[0]):
        t = z[i] - g[i]
        if t < lb[i]:
            t = lb[i]
        elif t > ub[i]:
            t = ub[i]
        a = abs(t - z[i])
        if a > m:
            m = a
    return m


@njit(cache=True)
def solve(z0, x0, theta0, v0, f_prev, model, breaks, coefs, length, closed, gate_theta, heights, widths, phi_tail, cfg):
    """Gauss-Newton SQP with merit (= cost) backtracking.

    Returns (z, xs, thetas, vs, cost, status, iterations, kkt, merit_trace).
    """
    N = int(cfg[0])
    nz = 5 * N
    max_iter = int(cfg[13])
    tol = cfg[14]
    mu = phi_tail[3]
    lb = np.empty(nz)
    ub = np.empty(nz)
    for k in range(N):
        for i in range(4):
            lb[5 * k + i] = cfg[6]
            ub[5 * k + i] = cfg[7]
        lb[5 * k + 4] = 0.0
        ub[5 * k + 4] = cfg[8]
    z = np.minimum(np.maximum(z0, lb), ub)
    xs = np.empty((N + 1, NX))
    thetas = np.empty(N + 1)
    vs = np.empty(N + 1)
    xt = np.empty((N + 1, NX))
    tt = np.empty(N + 1)
    vt = np.empty(N + 1)
    trace = np.full(max_iter + 1, np.nan)

    if not simulate(z, x0, theta0, v0, model, cfg, xs, thetas, vs):
        return z, xs, thetas, vs, np.inf, STATUS_FAILED, 0, np.inf, trace
    cost = total_cost(z, xs, thetas, vs, f_prev, breaks, coefs, length, closed, gate_theta, heights, widths, phi_tail, cfg)
    if not math.isfinite(cost):
        return z, xs, thetas, vs, cost, STATUS_FAILED, 0, np.inf, trace
    trace[0] = cost
    status = STATUS_MAX_ITER
    kkt = np.inf
    it = 0
    while True:
        ok, r, Jt, const = linearize(z, x0, theta0, v0, f_prev, model, breaks, coefs, length, closed, gate_theta, heights, widths, phi_tail, cfg, xs, thetas, vs)
        if not ok:
            status = STATUS_FAILED
            break
        g = 2.0 * (Jt @ r)
        for k in range(N):
            g[5 * k + 4] -= mu
        kkt = projected_gradient_norm(z, g, lb, ub)
        if not math.isfinite(kkt):
            status = STATUS_FAILED
            break
        if kkt <= tol:
            status = STATUS_CONVERGED
            break
        if it >= max_iter:
            break
        H = 2.0 * (Jt @ Jt.T)
        scale = 0.0
        for i in range(nz):
            if H[i, i] > scale:
                scale = H[i, i]
        lam = (cfg[15] + 1e-12) * scale + 1e-14
        for i in range(nz):
            H[i, i] += lam
        d, _ = box_qp(H, g, lb - z, ub - z, 1e-8)
        slope = g @ d
        if slope >= 0.0:
            status = STATUS_CONVERGED
            break
        alpha = 1.0
        accepted = False
        for _ in range(30):
            zt = z + alpha * d
            if simulate(zt, x0, theta0, v0, model, cfg, xt, tt, vt):
                ct = total_cost(zt, xt, tt, vt, f_prev, breaks, coefs, length, closed, gate_theta, heights, widths, phi_tail, cfg)
                if math.isfinite(ct) and ct <= cost + 1e-4 * alpha * slope:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            # no descent along the GN direction: stationary to working precision
            status = STATUS_CONVERGED
            break
        it += 1
        z = np.minimum(np.maximum(zt, lb), ub)
        cost = ct
        trace[it] = cost
        if it >= max_iter:
            # kkt refers to the last linearisation point; skip a fresh one
            break
    if status != STATUS_FAILED:
        simulate(z, x0, theta0, v0, model, cfg, xs, thetas, vs)
    return z, xs, thetas, vs, cost, status, it, kkt, trace
