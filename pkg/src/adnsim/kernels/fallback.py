"""Pure numpy implementation of the RMS model kernels.

Same algorithm and interface as the compiled ``_core`` module; used when the
extension is not built or ``ADNSIM_KERNEL=python`` is set.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg as la

from ..control import ControlParams, DGState, dg_dynamics

# ROS34PW2 (Rang & Angermann): 4-stage, order 3 W-method, L-stable and
# stiffly accurate, embedded order 2. Transformed form without J*k products:
# (I/(h*GAMMA) - J) U_i = f(x + sum_j A_ij U_j) + sum_j C_ij U_j / h.
GAMMA = 0.435866521508459
A = ((), (2.0,), (1.4192173174557652, -0.2592322116729698),
     (4.184760482319161, -0.285192017355496, 2.2942803602790423))
C = ((), (-4.588560720558084,), (-4.184760482319161, 0.285192017355496),
     (-6.36817920012836, -6.795620944466837, 2.870098604331055))
M = (4.184760482319163, -0.28519201735549543, 2.2942803602790423, 1.0)
# difference between the order-3 and the embedded order-2 weights
ME = (0.27774994764797034, -1.4032398951759986, 1.7726301276675511, 0.5)

OK, NET_FAIL, STEP_UNDERFLOW, MAX_STEPS = 0, 1, 2, 3


class NetworkFailure(ArithmeticError):
    pass


class Model:
    """Network + DG model for one event-free segment.

    Args:
        ymm: admittance among non-slack buses (m x m, complex, pu).
        ys: ``Y[nonslack, slack] * u_slack`` (m, complex).
        s_load: constant-power load consumption per non-slack bus (m, complex, pu).
        dg_idx: non-slack index of each DG bus.
        meas: ``(i_from, i_to, y_tf, y_tt)``; indices into the non-slack buses,
            -1 for the slack. Measured power is what the element delivers into ``i_to``.
        u_slack: slack voltage.
        params: vector from :func:`adnsim.control.params_vector`.
        p_ref, q_ref: references (MW, Mvar) valid over the segment.
    """

    backend = "python"

    def __init__(self, ymm, ys, s_load, dg_idx, meas, u_slack, params, p_ref, q_ref,
                 net_tol=1e-10, net_maxit=30):
        self.ymm = np.ascontiguousarray(ymm, dtype=complex)
        self.ys = np.ascontiguousarray(ys, dtype=complex)
        self.s_load = np.ascontiguousarray(s_load, dtype=complex)
        self.dg_idx = np.asarray(dg_idx, dtype=np.intc)
        self.m = self.ymm.shape[0]
        self.k = len(self.dg_idx)
        self.n = 5 * self.k
        self.mf, self.mt = int(meas[0]), int(meas[1])
        self.ytf, self.ytt = complex(meas[2]), complex(meas[3])
        self.us = complex(u_slack)
        pv = np.asarray(params, dtype=float)
        self.s_base = pv[0]
        self.params = ControlParams(
            k_i_p=pv[1], k_i_q=pv[2], p_min=pv[3], p_max=pv[4], q_min=pv[5], q_max=pv[6], u_ref=pv[7],
            u_dead=pv[8], k_frt=pv[9], i_max=pv[10], freeze_band=pv[11], t_pll=pv[12], t_conv=pv[13],
            u_floor=pv[14], s_rated=pv[15])
        self.p_ref, self.q_ref = float(p_ref), float(q_ref)
        self.net_tol, self.net_maxit = net_tol, net_maxit
        self.has_pq = bool(np.any(self.s_load != 0))
        g, b = self.ymm.real, self.ymm.imag
        self._jlin = np.block([[g, -b], [b, g]])
        self._lin_lu = la.lu_factor(self._jlin) if not self.has_pq else None
        self.u = np.ones(self.m, dtype=complex)
        self.nfev = 0

    # -- network ---------------------------------------------------------

    def set_voltages(self, u):
        self.u = np.array(u, dtype=complex)

    def _injection(self, x):
        xs = x.reshape(self.k, 5)
        cur = (xs[:, 3] + 1j * xs[:, 4]) * np.exp(1j * xs[:, 2])
        inj = np.zeros(self.m, dtype=complex)
        np.add.at(inj, self.dg_idx, cur)
        return inj

    def _net_jacobian(self, u):
        if not self.has_pq:
            return self._jlin
        w = -np.conj(self.s_load) / np.conj(u) ** 2
        jac = self._jlin.copy()
        m = self.m
        idx = np.arange(m)
        jac[idx, idx] += w.real
        jac[idx, idx + m] += w.imag
        jac[idx + m, idx] += w.imag
        jac[idx + m, idx + m] -= w.real
        return jac

    def _lu(self, u):
        if not self.has_pq:
            return self._lin_lu
        return la.lu_factor(self._net_jacobian(u), check_finite=False)

    def solve_network(self, x, u0=None):
        """Bus voltages for state ``x``; Newton warm-started from ``u0`` (or the last solution)."""
        u = np.array(self.u if u0 is None else u0, dtype=complex)
        b = self._injection(x) - self.ys
        m = self.m
        for _ in range(self.net_maxit + 1):
            if np.any(np.abs(u) < 1e-6):
                raise NetworkFailure("voltage collapse in network solve")
            r = self.ymm @ u + np.conj(self.s_load) / np.conj(u) - b
            if np.max(np.abs(r)) < self.net_tol:
                self.u = u
                return u
            if not np.all(np.isfinite(r)):
                break
            with np.errstate(all="ignore"):
                dz = la.lu_solve(self._lu(u), -np.r_[r.real, r.imag], check_finite=False)
            if not np.all(np.isfinite(dz)):
                break
            u = u + dz[:m] + 1j * dz[m:]
        raise NetworkFailure("network solve did not converge")

    # -- right-hand side -------------------------------------------------

    def measurement(self, u):
        uf = self.us if self.mf < 0 else u[self.mf]
        ut = self.us if self.mt < 0 else u[self.mt]
        s = -ut * np.conj(self.ytf * uf + self.ytt * ut) * self.s_base
        return s.real, s.imag

    def local_rhs(self, x, u):
        """Derivatives given state and already solved bus voltages."""
        xs = x.reshape(self.k, 5)
        p_meas, q_meas = self.measurement(u)
        frozen = bool(np.any(np.abs(np.abs(u) - 1.0) > self.params.freeze_band))
        st = DGState(xs[:, 0], xs[:, 1], xs[:, 2], xs[:, 3], xs[:, 4])
        d, _ = dg_dynamics(st, u[self.dg_idx], self.p_ref - p_meas, self.q_ref - q_meas,
                           frozen, self.params, self.s_base)
        out = np.empty((self.k, 5))
        out[:, 0], out[:, 1], out[:, 2], out[:, 3], out[:, 4] = d.chi_p, d.chi_q, d.theta_pll, d.i_d, d.i_q
        return out.ravel()

    def rhs(self, x):
        self.nfev += 1
        u = self.solve_network(x)
        return self.local_rhs(x, u)

    def jacobian(self, x, f0, u0):
        n = self.n
        jac = np.empty((n, n))
        lu = self._lu(u0)
        m = self.m
        for col in range(n):
            xp = x.copy()
            dx = 1e-7 * max(1.0, abs(x[col]))
            j, kind = divmod(col, 5)
            # a pinned integrator does not move the clipped set-point: zero column
            pr = self.params
            if (kind == 0 and x[col] in (pr.p_min, pr.p_max)) or (kind == 1 and x[col] in (pr.q_min, pr.q_max)):
                jac[:, col] = 0.0
                continue
            xp[col] += dx
            if kind >= 2:
                b = self.dg_idx[j]
                cur0 = (x[5 * j + 3] + 1j * x[5 * j + 4]) * np.exp(1j * x[5 * j + 2])
                cur1 = (xp[5 * j + 3] + 1j * xp[5 * j + 4]) * np.exp(1j * xp[5 * j + 2])
                di = cur1 - cur0
                rhs = np.zeros(2 * m)
                rhs[b], rhs[b + m] = di.real, di.imag
                du = la.lu_solve(lu, rhs, check_finite=False)
                up = u0 + du[:m] + 1j * du[m:]
            else:
                up = u0
            jac[:, col] = (self.local_rhs(xp, up) - f0) / dx
        return jac

    def project(self, x, snap=0.0):
        """Clamp integrator states into their limits; True if anything changed.

        States closer than ``snap`` to a limit are put on it, otherwise a state
        creeping toward its clamp stalls the step size.
        """
        p = self.params
        xs = x.reshape(self.k, 5)
        before = xs[:, :2].copy()
        for col, lo, hi in ((0, p.p_min, p.p_max), (1, p.q_min, p.q_max)):
            v = xs[:, col]
            v[v < lo + snap] = lo
            v[v > hi - snap] = hi
        return bool(np.any(before != xs[:, :2]))

    def sample(self, x):
        u = self.solve_network(x)
        return u, self.measurement(u)

    # -- integration -----------------------------------------------------

    def _attempt(self, x, f0, jac, h):
        """One ROS34PW2 step of size ``h``; returns ``(x_new, error_vector)``."""
        lu = la.lu_factor(np.eye(self.n) / (h * GAMMA) - jac, check_finite=False)
        stages = []
        for i in range(4):
            xi = x + sum(A[i][j] * stages[j] for j in range(i))
            r = f0 if i == 0 else self.rhs(xi)
            r = r + sum(C[i][j] * stages[j] for j in range(i)) / h
            stages.append(la.lu_solve(lu, r, check_finite=False))
        xnew = x + sum(M[i] * stages[i] for i in range(4))
        err = sum(ME[i] * stages[i] for i in range(4))
        return xnew, err

    def integrate(self, x, t0, t1, ts, out_x, out_u, out_meas, rtol=1e-6, atol=1e-8,
                  hmax=0.1, h0=1e-4, jac_age_max=8, max_steps=1_000_000, hmin=1e-10):
        """Integrate from ``t0`` to ``t1`` with the ROS34PW2 Rosenbrock W-method.

        ``x`` is advanced in place. Samples at times ``ts`` (sorted, within
        ``[t0, t1]``) are written to the output arrays; between steps the state
        is interpolated by a cubic Hermite polynomial.

        Returns:
            ``(status, t_reached, n_samples, steps, rejected, jacobians, h_next)``.
        """
        ns = len(ts)
        si = 0
        stats = [0, 0, 0]
        t = float(t0)
        try:
            f0 = self.rhs(x)
        except NetworkFailure:
            return NET_FAIL, t, si, *stats, h0
        u_acc = self.u.copy()
        while si < ns and ts[si] <= t:
            out_x[si] = x
            out_u[si] = u_acc
            out_meas[si] = self.measurement(u_acc)
            si += 1
        h = min(h0, hmax, t1 - t) if t1 > t else 0.0
        need_jac = True
        jac = None
        jac_age = 0
        while t < t1:
            if stats[0] + stats[1] >= max_steps:
                return MAX_STEPS, t, si, *stats, h
            if t + 1.05 * h >= t1:
                h = t1 - t
            if need_jac:
                jac = self.jacobian(x, f0, u_acc)
                stats[2] += 1
                jac_age = 0
                need_jac = False
            try:
                xnew, err_vec = self._attempt(x, f0, jac, h)
                sc = atol + rtol * np.maximum(np.abs(x), np.abs(xnew))
                err = float(np.max(np.abs(err_vec) / sc))
                if not math.isfinite(err):
                    err = 1e10
                if err <= 1.0:
                    f1 = self.rhs(xnew)
            except NetworkFailure:
                err = math.inf
            if err <= 1.0:
                u_new = self.u.copy()
                t_new = t + h
                if t_new >= t1 or t1 - t_new < 1e-12:
                    t_new = t1
                while si < ns and ts[si] <= t_new:
                    if ts[si] >= t_new:
                        xi, ui = xnew, u_new
                    else:
                        s = (ts[si] - t) / h
                        xi = ((1 + 2 * s) * (1 - s) ** 2 * x + s * (1 - s) ** 2 * h * f0
                              + s * s * (3 - 2 * s) * xnew - s * s * (1 - s) * h * f1)
                        try:
                            ui = self.solve_network(xi, u_new)
                        except NetworkFailure:
                            return NET_FAIL, ts[si], si, *stats, h
                    out_x[si] = xi
                    out_u[si] = ui
                    out_meas[si] = self.measurement(ui)
                    si += 1
                x[:] = xnew
                t = t_new
                self.u = u_new
                u_acc = u_new.copy()
                f0 = f1
                if self.project(x, atol):
                    try:
                        f0 = self.rhs(x)
                    except NetworkFailure:
                        return NET_FAIL, t, si, *stats, h
                    u_acc = self.u.copy()
                stats[0] += 1
                jac_age += 1
                if jac_age >= jac_age_max:
                    need_jac = True
                fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.8 * err ** (-1.0 / 3.0)))
                h = min(h * fac, hmax)
            else:
                stats[1] += 1
                self.u = u_acc.copy()
                h *= 0.25 if not math.isfinite(err) else max(0.1, 0.8 * err ** (-1.0 / 3.0))
                if jac_age > 0:
                    need_jac = True
                if h < hmin:
                    return STEP_UNDERFLOW, t, si, *stats, h
        return OK, t, si, *stats, h
