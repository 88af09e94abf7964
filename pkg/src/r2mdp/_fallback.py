"""Pure-Python reference versions of the compiled kernels.

Every routine here performs the same floating-point operations in the same
order as its counterpart in ``_kernels.pyx`` so that both backends produce
bitwise-identical results.
"""
from __future__ import annotations

import math

import numpy as np

VANILLA, R2, ROBUST_CLOSED, ROBUST_ITERATIVE = 0, 1, 2, 3
P_INF = 0  # norm code for l_inf; 1 and 2 stand for themselves


def simplex_projection(x):
    n = len(x)
    u = sorted((float(t) for t in x), reverse=True)
    css = 0.0
    theta = 0.0
    for j in range(n):
        css += u[j]
        t = (css - 1.0) / (j + 1)
        if u[j] - t > 0.0:
            theta = t
    return np.array([max(float(t) - theta, 0.0) for t in x])


def _l2(x):
    acc = 0.0
    for t in x:
        acc += t * t
    return math.sqrt(acc)


def _norm(x, p):
    if p == 2:
        return _l2(x)
    acc = 0.0
    if p == 1:
        for t in x:
            acc += abs(t)
    else:
        for t in x:
            a = abs(t)
            if a > acc:
                acc = a
    return acc


def dual_code(p):
    return {1: P_INF, 2: 2, P_INF: 1}[p]


def pga_l2_argmax(q, w, tol, max_iter):
    """Projected-gradient ascent on ``<pi, q> - w ||pi||_2``."""
    n = len(q)
    q = [float(t) for t in q]
    step = 1.0 / (1.0 + w * math.sqrt(n))
    pi = [1.0 / n] * n
    f = sum(a * b for a, b in zip(pi, q)) - w * _l2(pi)
    for k in range(1, max_iter + 1):
        npi = _l2(pi)
        z = [pi[i] + step * (q[i] - w * pi[i] / npi) for i in range(n)]
        pi = list(simplex_projection(z))
        f_new = sum(a * b for a, b in zip(pi, q)) - w * _l2(pi)
        if f_new - f < tol:
            return np.array(pi), k, True
        f = f_new
    return np.array(pi), max_iter, False


def _project_ball(z, radius, p):
    n = len(z)
    if p == 2:
        nz = _l2(z)
        if nz <= radius:
            return z
        return [t * (radius / nz) for t in z]
    if p == P_INF:
        return [min(max(t, -radius), radius) for t in z]
    total = 0.0
    for t in z:
        total += abs(t)
    if total <= radius:
        return z
    u = sorted((abs(t) for t in z), reverse=True)
    css = 0.0
    theta = 0.0
    for j in range(n):
        css += u[j]
        t = (css - radius) / (j + 1)
        if u[j] - t > 0.0:
            theta = t
    out = []
    for t in z:
        m = abs(t) - theta
        out.append(math.copysign(m, t) if m > 0.0 else 0.0)
    return out


def ball_min_pgd(y, radius, p, step_frac, tol, max_iter):
    """Minimise ``<x, y>`` over ``||x||_p <= radius`` by projected descent.

    Steps have length ``step_frac * radius`` along ``-y / ||y||_2`` and the
    loop stops once the objective moves by less than ``tol``.
    Returns ``(value, x, n_iter, converged)``.
    """
    y = [float(t) for t in y]
    n = len(y)
    ny = _l2(y)
    if radius == 0.0 or ny == 0.0:
        return 0.0, np.zeros(n), 0, True
    h = step_frac * radius / ny
    x = [0.0] * n
    f = 0.0
    for k in range(1, max_iter + 1):
        x = _project_ball([x[i] - h * y[i] for i in range(n)], radius, p)
        f_new = 0.0
        for i in range(n):
            f_new += x[i] * y[i]
        if abs(f_new - f) < tol:
            return f_new, np.array(x), k, True
        f = f_new
    return f, np.array(x), max_iter, False


def qlearn_block(q, visits, v, ptr, nxt, cum, rew, terminal, start_states,
                 start_cum, alpha_r, alpha_p, gamma, variant, trans_p, exact_norm,
                 v_norm_given, pgd_step_frac, pgd_tol, pgd_max_iter, eps0,
                 eps_decay, eps_min, max_ep_steps, lr_power, uniforms, istate,
                 fstate, out_delta, out_s, out_a, out_r, out_s2, out_done,
                 out_ep_ret):
    """Run ``len(uniforms)`` online q-learning steps in place.

    ``istate`` holds ``[state, episode, episode_length, solver_failures]`` and
    ``fstate`` holds ``[episode_return]``.
    ``out_ep_ret`` is NaN except where an episode ended.
    """
    n_s, n_a = q.shape
    p_dual = dual_code(trans_p)
    s, episode, ep_len, failures = (int(t) for t in istate)
    ep_ret = float(fstate[0])
    qq = q.tolist()
    vv = v.tolist()
    vis = visits.tolist()
    ar = alpha_r.tolist()
    ap = alpha_p.tolist()
    ptr_l, nxt_l, cum_l, rew_l = ptr.tolist(), nxt.tolist(), cum.tolist(), rew.tolist()
    term = terminal.tolist()
    st_l, st_cum = start_states.tolist(), start_cum.tolist()
    use_norm = variant == R2 or variant == ROBUST_CLOSED
    vnorm = _norm(vv, p_dual) if (variant == ROBUST_CLOSED or exact_norm) else v_norm_given
    for t in range(len(uniforms)):
        u0, u1, u2, u3 = (float(x) for x in uniforms[t])
        eps = eps0 * eps_decay ** episode
        if eps < eps_min:
            eps = eps_min
        row = qq[s]
        if u0 < eps:
            a = int(u1 * n_a)
            if a >= n_a:
                a = n_a - 1
        else:
            a = 0
            best = row[0]
            for b in range(1, n_a):
                if row[b] > best:
                    best = row[b]
                    a = b
        k = s * n_a + a
        j = ptr_l[k]
        end = ptr_l[k + 1] - 1
        while j < end and not (u2 < cum_l[j]):
            j += 1
        s2 = nxt_l[j]
        r = rew_l[j]
        done = term[s2]
        if done:
            target = r
        else:
            target = r + gamma * vv[s2]
        if use_norm:
            target = target - (ar[s][a] + gamma * ap[s][a] * vnorm)
        elif variant == ROBUST_ITERATIVE:
            fr, _, _, ok_r = ball_min_pgd([1.0], ar[s][a], 2, pgd_step_frac, pgd_tol,
                                          pgd_max_iter)
            fp, _, _, ok_p = ball_min_pgd(vv, ap[s][a], trans_p, pgd_step_frac,
                                          pgd_tol, pgd_max_iter)
            if not ok_r:
                failures += 1
            if not ok_p:
                failures += 1
            target = target + fr + gamma * fp
        delta = target - row[a]
        beta = (1.0 + vis[s][a]) ** (-lr_power)
        row[a] = row[a] + beta * delta
        vis[s][a] += 1
        best = row[0]
        for b in range(1, n_a):
            if row[b] > best:
                best = row[b]
        if best != vv[s]:
            vv[s] = best
            if variant == ROBUST_CLOSED or (variant == R2 and exact_norm):
                vnorm = _norm(vv, p_dual)
        out_delta[t] = delta
        out_s[t] = s
        out_a[t] = a
        out_r[t] = r
        out_s2[t] = s2
        out_done[t] = done
        ep_ret += r
        ep_len += 1
        if done or ep_len >= max_ep_steps:
            out_ep_ret[t] = ep_ret
            episode += 1
            ep_len = 0
            ep_ret = 0.0
            j = 0
            end = len(st_l) - 1
            while j < end and not (u3 < st_cum[j]):
                j += 1
            s = st_l[j]
        else:
            out_ep_ret[t] = math.nan
            s = s2
    q[:] = qq
    v[:] = vv
    visits[:] = vis
    istate[:] = (s, episode, ep_len, failures)
    fstate[0] = ep_ret
