# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. ``_fallback.py`` holds the reference semantics."""
import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt, fabs, pow, copysign, NAN
from libc.stdlib cimport malloc, free, qsort

cnp.import_array()

cdef enum:
    P_INF = 0

cdef enum:
    VANILLA = 0
    R2 = 1
    ROBUST_CLOSED = 2
    ROBUST_ITERATIVE = 3


cdef int _cmp_desc(const void* a, const void* b) noexcept nogil:
    cdef double x = (<double*>a)[0]
    cdef double y = (<double*>b)[0]
    if x > y:
        return -1
    if x < y:
        return 1
    return 0


cdef double _l2(const double* x, Py_ssize_t n) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        acc += x[i] * x[i]
    return sqrt(acc)


cdef double _norm(const double* x, Py_ssize_t n, int p) noexcept nogil:
    cdef double acc = 0.0, a
    cdef Py_ssize_t i
    if p == 2:
        return _l2(x, n)
    if p == 1:
        for i in range(n):
            acc += fabs(x[i])
    else:
        for i in range(n):
            a = fabs(x[i])
            if a > acc:
                acc = a
    return acc


cdef int _dual(int p) noexcept nogil:
    if p == 1:
        return P_INF
    if p == 2:
        return 2
    return 1


cdef double _threshold(double* u, Py_ssize_t n, double radius) noexcept nogil:
    # u is sorted in place (descending); returns the shrinkage threshold
    qsort(u, n, sizeof(double), _cmp_desc)
    cdef double css = 0.0, theta = 0.0, t
    cdef Py_ssize_t j
    for j in range(n):
        css += u[j]
        t = (css - radius) / (j + 1)
        if u[j] - t > 0.0:
            theta = t
    return theta


cdef void _simplex_proj(const double* x, double* out, double* work,
                        Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        work[i] = x[i]
    cdef double theta = _threshold(work, n, 1.0)
    cdef double m
    for i in range(n):
        m = x[i] - theta
        out[i] = m if m > 0.0 else 0.0


def simplex_projection(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double* work = <double*>malloc(n * sizeof(double))
    if work == NULL:
        raise MemoryError()
    _simplex_proj(&x[0], &o[0], work, n)
    free(work)
    return out


def pga_l2_argmax(const double[::1] q, double w, double tol, long max_iter):
    cdef Py_ssize_t n = q.shape[0], i
    cdef double step = 1.0 / (1.0 + w * sqrt(<double>n))
    out = np.full(n, 1.0 / n)
    cdef double[::1] pi = out
    cdef double* z = <double*>malloc(n * sizeof(double))
    cdef double* work = <double*>malloc(n * sizeof(double))
    cdef double f = 0.0, f_new, npi
    cdef long k
    cdef bint ok = False
    for i in range(n):
        f += pi[i] * q[i]
    f = f - w * _l2(&pi[0], n)
    k = 0
    while k < max_iter:
        k += 1
        npi = _l2(&pi[0], n)
        for i in range(n):
            z[i] = pi[i] + step * (q[i] - w * pi[i] / npi)
        _simplex_proj(z, &pi[0], work, n)
        f_new = 0.0
        for i in range(n):
            f_new += pi[i] * q[i]
        f_new = f_new - w * _l2(&pi[0], n)
        if f_new - f < tol:
            ok = True
            break
        f = f_new
    free(z)
    free(work)
    return out, k, ok


cdef void _project_ball(double* z, Py_ssize_t n, double radius, int p,
                        double* work) noexcept nogil:
    cdef Py_ssize_t i
    cdef double nz, total, theta, m
    if p == 2:
        nz = _l2(z, n)
        if nz <= radius:
            return
        for i in range(n):
            z[i] = z[i] * (radius / nz)
        return
    if p == P_INF:
        for i in range(n):
            if z[i] < -radius:
                z[i] = -radius
            elif z[i] > radius:
                z[i] = radius
        return
    total = 0.0
    for i in range(n):
        total += fabs(z[i])
    if total <= radius:
        return
    for i in range(n):
        work[i] = fabs(z[i])
    theta = _threshold(work, n, radius)
    for i in range(n):
        m = fabs(z[i]) - theta
        z[i] = copysign(m, z[i]) if m > 0.0 else 0.0


cdef double _ball_min(const double* y, Py_ssize_t n, double radius, int p,
                      double step_frac, double tol, long max_iter,
                      double* x, double* work, bint* ok, long* iters) noexcept nogil:
    cdef double ny = _l2(y, n), h, f = 0.0, f_new
    cdef Py_ssize_t i
    cdef long k
    for i in range(n):
        x[i] = 0.0
    ok[0] = True
    iters[0] = 0
    if radius == 0.0 or ny == 0.0:
        return 0.0
    h = step_frac * radius / ny
    for k in range(1, max_iter + 1):
        iters[0] = k
        for i in range(n):
            x[i] = x[i] - h * y[i]
        _project_ball(x, n, radius, p, work)
        f_new = 0.0
        for i in range(n):
            f_new += x[i] * y[i]
        if fabs(f_new - f) < tol:
            return f_new
        f = f_new
    ok[0] = False
    return f


def ball_min_pgd(y, double radius, int p, double step_frac, double tol,
                 long max_iter):
    cdef double[::1] yy = np.ascontiguousarray(y, dtype=float)
    cdef Py_ssize_t n = yy.shape[0]
    out = np.zeros(n)
    cdef double[::1] x = out
    cdef double* work = <double*>malloc(n * sizeof(double))
    cdef bint ok
    cdef long iters
    cdef double val = _ball_min(&yy[0], n, radius, p, step_frac, tol, max_iter,
                                &x[0], work, &ok, &iters)
    free(work)
    return val, out, iters, bool(ok)


def qlearn_block(double[:, ::1] q, long[:, ::1] visits, double[::1] v,
                 const long[::1] ptr, const long[::1] nxt, const double[::1] cum,
                 const double[::1] rew, const cnp.uint8_t[::1] terminal,
                 const long[::1] start_states, const double[::1] start_cum,
                 const double[:, ::1] alpha_r, const double[:, ::1] alpha_p,
                 double gamma, int variant, int trans_p,
                 bint exact_norm, double v_norm_given, double pgd_step_frac,
                 double pgd_tol, long pgd_max_iter, double eps0, double eps_decay,
                 double eps_min, long max_ep_steps, double lr_power,
                 const double[:, ::1] uniforms, long[::1] istate, double[::1] fstate,
                 double[::1] out_delta, long[::1] out_s, long[::1] out_a,
                 double[::1] out_r, long[::1] out_s2, cnp.uint8_t[::1] out_done,
                 double[::1] out_ep_ret):
    cdef Py_ssize_t n_s = q.shape[0], n_a = q.shape[1], n_steps = uniforms.shape[0]
    cdef Py_ssize_t n_start = start_states.shape[0]
    cdef int p_dual = _dual(trans_p)
    cdef long s = istate[0], episode = istate[1], ep_len = istate[2]
    cdef long failures = istate[3]
    cdef double ep_ret = fstate[0]
    cdef bint use_norm = variant == R2 or variant == ROBUST_CLOSED
    cdef bint track = variant == ROBUST_CLOSED or (variant == R2 and exact_norm)
    cdef double vnorm
    cdef double* x = <double*>malloc(n_s * sizeof(double))
    cdef double* work = <double*>malloc(n_s * sizeof(double))
    cdef double one = 1.0, x1, w1
    cdef double u0, u1, u2, u3, eps, best, target, delta, beta, r, fr, fp
    cdef long a, b, k, j, end, s2, iters
    cdef bint done, ok_r, ok_p
    cdef Py_ssize_t t
    if variant == ROBUST_CLOSED or exact_norm:
        vnorm = _norm(&v[0], n_s, p_dual)
    else:
        vnorm = v_norm_given
    with nogil:
        for t in range(n_steps):
            u0 = uniforms[t, 0]
            u1 = uniforms[t, 1]
            u2 = uniforms[t, 2]
            u3 = uniforms[t, 3]
            eps = eps0 * pow(eps_decay, <double>episode)
            if eps < eps_min:
                eps = eps_min
            if u0 < eps:
                a = <long>(u1 * n_a)
                if a >= n_a:
                    a = n_a - 1
            else:
                a = 0
                best = q[s, 0]
                for b in range(1, n_a):
                    if q[s, b] > best:
                        best = q[s, b]
                        a = b
            k = s * n_a + a
            j = ptr[k]
            end = ptr[k + 1] - 1
            while j < end and not (u2 < cum[j]):
                j += 1
            s2 = nxt[j]
            r = rew[j]
            done = terminal[s2] != 0
            if done:
                target = r
            else:
                target = r + gamma * v[s2]
            if use_norm:
                target = target - (alpha_r[s, a] + gamma * alpha_p[s, a] * vnorm)
            elif variant == ROBUST_ITERATIVE:
                fr = _ball_min(&one, 1, alpha_r[s, a], 2, pgd_step_frac, pgd_tol,
                               pgd_max_iter, &x1, &w1, &ok_r, &iters)
                fp = _ball_min(&v[0], n_s, alpha_p[s, a], trans_p, pgd_step_frac,
                               pgd_tol, pgd_max_iter, x, work, &ok_p, &iters)
                if not ok_r:
                    failures += 1
                if not ok_p:
                    failures += 1
                target = target + fr + gamma * fp
            delta = target - q[s, a]
            beta = pow(1.0 + visits[s, a], -lr_power)
            q[s, a] = q[s, a] + beta * delta
            visits[s, a] += 1
            best = q[s, 0]
            for b in range(1, n_a):
                if q[s, b] > best:
                    best = q[s, b]
            if best != v[s]:
                v[s] = best
                if track:
                    vnorm = _norm(&v[0], n_s, p_dual)
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
                end = n_start - 1
                while j < end and not (u3 < start_cum[j]):
                    j += 1
                s = start_states[j]
            else:
                out_ep_ret[t] = NAN
                s = s2
    free(x)
    free(work)
    istate[0] = s
    istate[1] = episode
    istate[2] = ep_len
    istate[3] = failures
    fstate[0] = ep_ret
