"""Single-shooting MPC for the two-state CSTR, written for numba.

Parameter vectors keep the compiled signatures flat:

``model``  = [step, theta, rate, activation, feed, coolant, cooling, rate_state]
``cost``   = [xs1, xs2, us, q1, q2, r, pf1, pf2, rho_lin, lo1, lo2, hi1, hi2, terminal_radius, rho_quad]

State-box bounds in ``cost`` are absolute.  A negative terminal radius
disables the terminal set.  The penalty on a violation ``v >= 0`` is
``rho_lin v + rho_quad v^2``.  The linear part is an exact penalty but
puts a kink at the constraint boundary; the quadratic part alone is
smooth, which quasi-Newton iterations handle far better.
"""

import math

import numpy as np

from ._accel import jit

_EXP_CAP = 700.0


@jit
def arrhenius(x, activation):
    """``exp(-M / x)`` with the exponent capped to avoid overflow."""
    if x == 0.0:
        return 0.0
    arg = -activation / x
    if arg > _EXP_CAP:
        arg = _EXP_CAP
    return math.exp(arg)


@jit
def step_jacobian(x1, x2, u, model):
    """One Euler step and its partial derivatives.

    Returns ``(y1, y2, a11, a12, a21, a22, b2)`` with ``a`` the state
    Jacobian and ``b2`` the derivative of ``y2`` in ``u`` (``y1`` does
    not depend on ``u``).
    """
    h, theta, rate, m, feed, coolant, cooling = model[0], model[1], model[2], model[3], model[4], model[5], model[6]
    e2 = arrhenius(x2, m)
    de2 = e2 * m / (x2 * x2) if x2 != 0.0 else 0.0
    if model[7] == 1.0:
        e1 = arrhenius(x1, m)
        de1 = e1 * m / (x1 * x1) if x1 != 0.0 else 0.0
        y1 = x1 + h * ((1.0 - x1) / theta - rate * x1 * e1)
        a11 = 1.0 + h * (-1.0 / theta - rate * (e1 + x1 * de1))
        a12 = 0.0
    else:
        y1 = x1 + h * ((1.0 - x1) / theta - rate * x1 * e2)
        a11 = 1.0 + h * (-1.0 / theta - rate * e2)
        a12 = -h * rate * x1 * de2
    y2 = x2 + h * ((feed - x2) / theta + rate * x1 * e2 - cooling * u * (x2 - coolant))
    a21 = h * rate * e2
    a22 = 1.0 + h * (-1.0 / theta + rate * x1 * de2 - cooling * u)
    b2 = -h * cooling * (x2 - coolant)
    return y1, y2, a11, a12, a21, a22, b2


@jit
def _violation(x, lo, hi):
    if x < lo:
        return lo - x, -1.0
    if x > hi:
        return x - hi, 1.0
    return 0.0, 0.0


@jit
def objective(x0, u, model, cost, grad):
    """Cost, gradient (written into ``grad``) and total slack of a rollout."""
    n_steps = u.shape[0]
    xs1, xs2, us = cost[0], cost[1], cost[2]
    q1, q2, r, pf1, pf2, rho_lin = cost[3], cost[4], cost[5], cost[6], cost[7], cost[8]
    rho_quad = cost[14]
    lo1, lo2, hi1, hi2, radius = cost[9], cost[10], cost[11], cost[12], cost[13]

    traj = np.empty((n_steps + 1, 2))
    jac = np.empty((n_steps, 5))
    traj[0, 0] = x0[0]
    traj[0, 1] = x0[1]
    for k in range(n_steps):
        y1, y2, a11, a12, a21, a22, b2 = step_jacobian(traj[k, 0], traj[k, 1], u[k], model)
        traj[k + 1, 0] = y1
        traj[k + 1, 1] = y2
        jac[k, 0] = a11
        jac[k, 1] = a12
        jac[k, 2] = a21
        jac[k, 3] = a22
        jac[k, 4] = b2

    total = 0.0
    slack = 0.0
    # terminal contributions and adjoint seed
    d1 = traj[n_steps, 0] - xs1
    d2 = traj[n_steps, 1] - xs2
    total += pf1 * d1 * d1 + pf2 * d2 * d2
    lam1 = 2.0 * pf1 * d1
    lam2 = 2.0 * pf2 * d2
    if radius >= 0.0:
        v, s = _violation(d1, -radius, radius)
        slack += v
        total += rho_lin * v + rho_quad * v * v
        lam1 += (rho_lin + 2.0 * rho_quad * v) * s
        v, s = _violation(d2, -radius, radius)
        slack += v
        total += rho_lin * v + rho_quad * v * v
        lam2 += (rho_lin + 2.0 * rho_quad * v) * s

    for k in range(n_steps, -1, -1):
        v, s = _violation(traj[k, 0], lo1, hi1)
        slack += v
        total += rho_lin * v + rho_quad * v * v
        g1 = (rho_lin + 2.0 * rho_quad * v) * s
        v, s = _violation(traj[k, 1], lo2, hi2)
        slack += v
        total += rho_lin * v + rho_quad * v * v
        g2 = (rho_lin + 2.0 * rho_quad * v) * s
        if k == n_steps:
            lam1 += g1
            lam2 += g2
            continue
        # stage k: cost on x_k and u_k, then propagate the adjoint
        d1 = traj[k, 0] - xs1
        d2 = traj[k, 1] - xs2
        du = u[k] - us
        total += q1 * d1 * d1 + q2 * d2 * d2 + r * du * du
        grad[k] = 2.0 * r * du + jac[k, 4] * lam2
        new1 = 2.0 * q1 * d1 + g1 + jac[k, 0] * lam1 + jac[k, 2] * lam2
        new2 = 2.0 * q2 * d2 + g2 + jac[k, 1] * lam1 + jac[k, 3] * lam2
        lam1 = new1
        lam2 = new2
    return total, slack


@jit
def gauss_newton_matrix(x0, u, model, cost, out):
    """``J^T J`` of the residual vector whose squared norm is the cost.

    Every term of the cost is a weighted square (tracking, input, terminal
    and quadratic slack terms), so ``J^T J`` is a positive semidefinite
    model of half the Hessian.  The linear slack term has no curvature and
    is left out.  Sensitivities ``dx_k/du`` are propagated forward.
    """
    n_steps = u.shape[0]
    xs1, xs2 = cost[0], cost[1]
    q1, q2, r, pf1, pf2 = cost[3], cost[4], cost[5], cost[6], cost[7]
    lo1, lo2, hi1, hi2, radius, rho_quad = cost[9], cost[10], cost[11], cost[12], cost[13], cost[14]
    sens = np.zeros((2, n_steps))
    nxt = np.zeros((2, n_steps))
    out[:, :] = 0.0
    for i in range(n_steps):
        out[i, i] = r
    x1 = x0[0]
    x2 = x0[1]
    for k in range(n_steps + 1):
        # curvature weight per state component at step k
        w1 = 0.0
        w2 = 0.0
        if k < n_steps:
            w1 += q1
            w2 += q2
        else:
            w1 += pf1
            w2 += pf2
            if radius >= 0.0:
                if abs(x1 - xs1) > radius:
                    w1 += rho_quad
                if abs(x2 - xs2) > radius:
                    w2 += rho_quad
        if x1 < lo1 or x1 > hi1:
            w1 += rho_quad
        if x2 < lo2 or x2 > hi2:
            w2 += rho_quad
        if k > 0:
            for i in range(k):
                a1 = sens[0, i]
                a2 = sens[1, i]
                for j in range(i + 1):
                    out[i, j] += w1 * a1 * sens[0, j] + w2 * a2 * sens[1, j]
        if k == n_steps:
            break
        y1, y2, a11, a12, a21, a22, b2 = step_jacobian(x1, x2, u[k], model)
        for j in range(k):
            nxt[0, j] = a11 * sens[0, j] + a12 * sens[1, j]
            nxt[1, j] = a21 * sens[0, j] + a22 * sens[1, j]
        for j in range(k):
            sens[0, j] = nxt[0, j]
            sens[1, j] = nxt[1, j]
        sens[0, k] = 0.0
        sens[1, k] = b2
        x1 = y1
        x2 = y2
    for i in range(n_steps):
        for j in range(i):
            out[j, i] = out[i, j]


@jit
def _cholesky_solve(a, b, free, out):
    """Solve ``a[free, free] x = b[free]`` in place; False if not positive definite."""
    n = a.shape[0]
    idx = np.empty(n, dtype=np.int64)
    m = 0
    for i in range(n):
        if free[i]:
            idx[m] = i
            m += 1
    low = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1):
            acc = a[idx[i], idx[j]]
            for k in range(j):
                acc -= low[i, k] * low[j, k]
            if i == j:
                if acc <= 0.0:
                    return False
                low[i, i] = math.sqrt(acc)
            else:
                low[i, j] = acc / low[j, j]
    y = np.empty(m)
    for i in range(m):
        acc = b[idx[i]]
        for k in range(i):
            acc -= low[i, k] * y[k]
        y[i] = acc / low[i, i]
    for i in range(m - 1, -1, -1):
        acc = y[i]
        for k in range(i + 1, m):
            acc -= low[k, i] * y[k]
        y[i] = acc / low[i, i]
    out[:] = 0.0
    for i in range(m):
        out[idx[i]] = y[i]
    return True


@jit
def _projected_gradient_norm(u, g, lo, hi):
    worst = 0.0
    for i in range(u.shape[0]):
        t = u[i] - g[i]
        if t < lo:
            t = lo
        elif t > hi:
            t = hi
        d = abs(t - u[i])
        if d > worst:
            worst = d
    return worst


@jit
def projected_newton(x0, u_init, lo, hi, model, cost, max_iter, gtol, history):
    """Minimize the rollout cost over the box ``[lo, hi]^N``.

    Projected quasi-Newton iteration: the Hessian model is the damped
    Gauss-Newton matrix ``2 (J^T J + mu I)`` restricted to variables not
    held at a bound by the sign of the gradient; the gradient itself is
    the exact adjoint gradient.  Steps are projected onto the box and
    accepted by an Armijo test along the projection arc.  The damping
    ``mu`` shrinks after full steps and grows after backtracking.

    Returns ``(u, cost, slack, projected_gradient_norm, iterations, converged)``
    where convergence means projected gradient below ``gtol * max(1, cost)``.
    ``history[i]`` receives the cost after iteration ``i``; the sequence is
    non-increasing.
    """
    n = u_init.shape[0]
    u = np.empty(n)
    for i in range(n):
        u[i] = min(max(u_init[i], lo), hi)
    g = np.empty(n)
    g_new = np.empty(n)
    u_new = np.empty(n)
    d = np.empty(n)
    rhs = np.empty(n)
    free = np.ones(n, dtype=np.bool_)
    model_h = np.empty((n, n))
    value, slack = objective(x0, u, model, cost, g)
    pg = _projected_gradient_norm(u, g, lo, hi)
    converged = pg <= gtol * max(1.0, abs(value))
    damping = 1e-6
    it = 0
    while it < max_iter and not converged:
        for i in range(n):
            at_lo = u[i] <= lo and g[i] > 0.0
            at_hi = u[i] >= hi and g[i] < 0.0
            free[i] = not (at_lo or at_hi)
        gauss_newton_matrix(x0, u, model, cost, model_h)
        scale = 0.0
        for i in range(n):
            scale = max(scale, model_h[i, i])
        for i in range(n):
            model_h[i, i] += damping * scale
            rhs[i] = -0.5 * g[i]
        if not _cholesky_solve(model_h, rhs, free, d):
            for i in range(n):
                d[i] = -g[i] / scale if free[i] else 0.0

        t = 1.0
        accepted = False
        while t > 1e-12:
            decrease = 0.0
            for i in range(n):
                u_new[i] = min(max(u[i] + t * d[i], lo), hi)
                decrease += g[i] * (u_new[i] - u[i])
            value_new, slack_new = objective(x0, u_new, model, cost, g_new)
            if value_new <= value + 1e-4 * decrease:
                accepted = True
                break
            t *= 0.5
        if t == 1.0:
            damping = max(damping * 0.1, 1e-12)
        else:
            damping = min(damping * 10.0, 1e6)
        if not accepted:
            if damping >= 1e6:
                break
            continue

        u[:] = u_new
        g[:] = g_new
        value = value_new
        slack = slack_new
        if it < history.shape[0]:
            history[it] = value
        it += 1
        pg = _projected_gradient_norm(u, g, lo, hi)
        converged = pg <= gtol * max(1.0, abs(value))
    return u, value, slack, pg, it, converged


@jit
def solve_multistart(x0, starts, lo, hi, model, cost, max_iter, gtol, accept_tol):
    """Run :func:`projected_newton` from each row of ``starts``; keep the best.

    A start counts as successful if it converged or ended with projected
    gradient below ``accept_tol * max(1, cost)``.  Ties in cost go to the lowest start
    index.  Returns ``(u, cost, slack, pg, ok)`` where ``ok`` is False if
    no start succeeded.
    """
    history = np.empty(0)
    best_u = starts[0].copy()
    best_value = np.inf
    best_slack = 0.0
    best_pg = np.inf
    ok = False
    for s in range(starts.shape[0]):
        u, value, slack, pg, it, converged = projected_newton(x0, starts[s], lo, hi, model, cost, max_iter, gtol, history)
        good = converged or pg <= accept_tol * max(1.0, abs(value))
        if good and (not ok or value < best_value):
            best_u, best_value, best_slack, best_pg, ok = u, value, slack, pg, True
        elif not ok and value < best_value:
            best_u, best_value, best_slack, best_pg = u, value, slack, pg
    return best_u, best_value, best_slack, best_pg, ok


@jit
def solve_points(points, starts, lo, hi, model, cost, max_iter, gtol, accept_tol, first_input, slack_out, ok_out):
    """Solve the MPC at every row of ``points`` (physical states)."""
    for i in range(points.shape[0]):
        u, value, slack, pg, ok = solve_multistart(points[i], starts, lo, hi, model, cost, max_iter, gtol, accept_tol)
        first_input[i] = u[0]
        slack_out[i] = slack
        ok_out[i] = ok
