# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled RMS model kernels (same interface and algorithm as ``fallback``)."""

import numpy as np

from libc.math cimport atan2, cos, sin, sqrt, fabs, floor, fmax, fmin, isfinite, pow, M_PI
from libc.string cimport memcpy, memset
from scipy.linalg.cython_lapack cimport dgetrf, dgetrs

from .fallback import NetworkFailure

# ROS34PW2 coefficients in transformed form, see fallback
cdef double GAMMA = 0.435866521508459
cdef double RA[4][4]
cdef double RC[4][4]
cdef double RM[4]
cdef double RME[4]
for _i in range(4):
    for _j in range(4):
        RA[_i][_j] = 0.0
        RC[_i][_j] = 0.0
RA[1][0] = 2.0
RA[2][0], RA[2][1] = 1.4192173174557652, -0.2592322116729698
RA[3][0], RA[3][1], RA[3][2] = 4.184760482319161, -0.285192017355496, 2.2942803602790423
RC[1][0] = -4.588560720558084
RC[2][0], RC[2][1] = -4.184760482319161, 0.285192017355496
RC[3][0], RC[3][1], RC[3][2] = -6.36817920012836, -6.795620944466837, 2.870098604331055
RM[0], RM[1], RM[2], RM[3] = 4.184760482319163, -0.28519201735549543, 2.2942803602790423, 1.0
RME[0], RME[1], RME[2], RME[3] = 0.27774994764797034, -1.4032398951759986, 1.7726301276675511, 0.5

cdef int OK = 0
cdef int NET_FAIL = 1
cdef int STEP_UNDERFLOW = 2
cdef int MAX_STEPS = 3


cdef inline double cabs2(double re, double im) noexcept nogil:
    return sqrt(re * re + im * im)


cdef inline double clip(double v, double lo, double hi) noexcept nogil:
    return fmin(fmax(v, lo), hi)


cdef inline double wrap(double a) noexcept nogil:
    cdef double two_pi = 2.0 * M_PI
    cdef double r = a + M_PI
    r = r - two_pi * floor(r / two_pi)
    return r - M_PI


cdef class Model:
    """Network + DG model for one event-free segment; see ``fallback.Model``."""

    cdef public int m, k, n
    cdef public long nfev
    cdef int mf, mt, net_maxit
    cdef bint has_pq
    cdef double net_tol
    cdef double yr_tf, yi_tf, yr_tt, yi_tt, us_r, us_i
    cdef double s_base, k_i_p, k_i_q, p_min, p_max, q_min, q_max, u_ref, u_dead
    cdef double k_frt, i_max, freeze_band, t_pll, t_conv, u_floor, s_rated
    cdef public double p_ref, q_ref

    cdef double[:, ::1] g, b          # ymm split
    cdef double[::1] ysr, ysi, slr, sli
    cdef int[::1] dg_idx
    cdef double[::1] ur, ui           # current network solution
    cdef double[::1] wur, wui         # Newton iterate
    cdef double[::1, :] jlin, jnet, jlu
    cdef int[::1] piv_lin, piv_net
    cdef double[::1] rvec, injr, inji
    # integrator workspace
    cdef double[::1, :] jac, wmat
    cdef int[::1] piv_w
    cdef double[:, ::1] stg
    cdef double[::1] f0, f1, f2, xn, xt, col_rhs, up_r, up_i, uacc_r, uacc_i, unew_r, unew_i

    backend = "compiled"

    def __init__(self, ymm, ys, s_load, dg_idx, meas, u_slack, params, p_ref, q_ref,
                 net_tol=1e-10, net_maxit=30):
        ymm = np.ascontiguousarray(ymm, dtype=complex)
        ys = np.ascontiguousarray(ys, dtype=complex)
        s_load = np.ascontiguousarray(s_load, dtype=complex)
        self.m = ymm.shape[0]
        self.dg_idx = np.ascontiguousarray(dg_idx, dtype=np.intc)
        self.k = self.dg_idx.shape[0]
        self.n = 5 * self.k
        self.g = np.ascontiguousarray(ymm.real)
        self.b = np.ascontiguousarray(ymm.imag)
        self.ysr = np.ascontiguousarray(ys.real)
        self.ysi = np.ascontiguousarray(ys.imag)
        self.slr = np.ascontiguousarray(s_load.real)
        self.sli = np.ascontiguousarray(s_load.imag)
        self.has_pq = bool(np.any(s_load != 0))
        self.mf, self.mt = int(meas[0]), int(meas[1])
        ytf, ytt, us = complex(meas[2]), complex(meas[3]), complex(u_slack)
        self.yr_tf, self.yi_tf, self.yr_tt, self.yi_tt = ytf.real, ytf.imag, ytt.real, ytt.imag
        self.us_r, self.us_i = us.real, us.imag
        pv = np.asarray(params, dtype=float)
        (self.s_base, self.k_i_p, self.k_i_q, self.p_min, self.p_max, self.q_min, self.q_max,
         self.u_ref, self.u_dead, self.k_frt, self.i_max, self.freeze_band, self.t_pll,
         self.t_conv, self.u_floor, self.s_rated) = [float(v) for v in pv[:16]]
        self.p_ref, self.q_ref = float(p_ref), float(q_ref)
        self.net_tol, self.net_maxit = float(net_tol), int(net_maxit)
        self.nfev = 0

        m2 = 2 * self.m
        g, b = ymm.real, ymm.imag
        self.jlin = np.asfortranarray(np.block([[g, -b], [b, g]]))
        self.jnet = np.zeros((m2, m2), order="F")
        self.jlu = np.zeros((m2, m2), order="F")
        self.piv_lin = np.zeros(m2, dtype=np.intc)
        self.piv_net = np.zeros(m2, dtype=np.intc)
        self.rvec = np.zeros(m2)
        self.injr = np.zeros(self.m)
        self.inji = np.zeros(self.m)
        self.ur = np.ones(self.m)
        self.ui = np.zeros(self.m)
        self.wur = np.zeros(self.m)
        self.wui = np.zeros(self.m)
        self.up_r = np.zeros(self.m)
        self.up_i = np.zeros(self.m)
        self.uacc_r = np.zeros(self.m)
        self.uacc_i = np.zeros(self.m)
        self.unew_r = np.zeros(self.m)
        self.unew_i = np.zeros(self.m)
        self.col_rhs = np.zeros(m2)
        if not self.has_pq:
            self.jlu[:, :] = self.jlin
            if self._factor(self.jlu, self.piv_lin) != 0:
                raise np.linalg.LinAlgError("singular network matrix")
        n = self.n
        self.jac = np.zeros((n, n), order="F")
        self.wmat = np.zeros((n, n), order="F")
        self.piv_w = np.zeros(n, dtype=np.intc)
        self.f0, self.f1, self.f2 = np.zeros(n), np.zeros(n), np.zeros(n)
        self.stg = np.zeros((4, n))
        self.xn, self.xt = np.zeros(n), np.zeros(n)

    # -- linear algebra --------------------------------------------------

    cdef int _factor(self, double[::1, :] a, int[::1] piv) noexcept nogil:
        cdef int nn = a.shape[0], info = 0
        if nn == 0:
            return 0
        dgetrf(&nn, &nn, &a[0, 0], &nn, &piv[0], &info)
        return info

    cdef void _solve(self, double[::1, :] a, int[::1] piv, double* rhs) noexcept nogil:
        cdef int nn = a.shape[0], one = 1, info = 0
        cdef char trans = b'N'
        if nn == 0:
            return
        dgetrs(&trans, &nn, &one, &a[0, 0], &nn, &piv[0], rhs, &nn, &info)

    # -- network ---------------------------------------------------------

    cdef void _injection(self, const double* x) noexcept nogil:
        cdef int j, bi
        cdef double th, cr, ci
        for j in range(self.m):
            self.injr[j] = -self.ysr[j]
            self.inji[j] = -self.ysi[j]
        for j in range(self.k):
            bi = self.dg_idx[j]
            th = x[5 * j + 2]
            cr = x[5 * j + 3] * cos(th) - x[5 * j + 4] * sin(th)
            ci = x[5 * j + 3] * sin(th) + x[5 * j + 4] * cos(th)
            self.injr[bi] += cr
            self.inji[bi] += ci

    cdef int _net_lu(self, const double* vr, const double* vi) noexcept nogil:
        """Factor the network Jacobian at (vr, vi) into ``jnet``; -1 on failure."""
        cdef int i, j, m = self.m
        cdef double den, ar, ai, wr, wi, sr, si
        for j in range(2 * m):
            for i in range(2 * m):
                self.jnet[i, j] = self.jlin[i, j]
        for i in range(m):
            # w = -conj(s) / conj(u)^2
            sr = self.slr[i]
            si = -self.sli[i]
            ar = vr[i] * vr[i] - vi[i] * vi[i]
            ai = -2.0 * vr[i] * vi[i]
            den = ar * ar + ai * ai
            wr = -(sr * ar + si * ai) / den
            wi = -(si * ar - sr * ai) / den
            self.jnet[i, i] += wr
            self.jnet[i, i + m] += wi
            self.jnet[i + m, i] += wi
            self.jnet[i + m, i + m] -= wr
        if self._factor(self.jnet, self.piv_net) != 0:
            return -1
        return 0

    cdef int _newton(self, const double* x, double* vr, double* vi) noexcept nogil:
        """Solve the network equations in place on (vr, vi); 0 on success."""
        cdef int it, i, j, m = self.m
        cdef double rr, ri, mag2, res, cr, ci
        cdef bint use_lin = not self.has_pq
        self._injection(x)
        for it in range(self.net_maxit + 1):
            res = 0.0
            for i in range(m):
                mag2 = vr[i] * vr[i] + vi[i] * vi[i]
                if not (mag2 >= 1e-12):
                    return 1
                rr = -self.injr[i]
                ri = -self.inji[i]
                for j in range(m):
                    rr += self.g[i, j] * vr[j] - self.b[i, j] * vi[j]
                    ri += self.g[i, j] * vi[j] + self.b[i, j] * vr[j]
                if self.has_pq:
                    # conj(s) / conj(u) = conj(s) * u / |u|^2
                    cr = (self.slr[i] * vr[i] + self.sli[i] * vi[i]) / mag2
                    ci = (self.slr[i] * vi[i] - self.sli[i] * vr[i]) / mag2
                    rr += cr
                    ri += ci
                self.rvec[i] = -rr
                self.rvec[i + m] = -ri
                res = fmax(res, cabs2(rr, ri))
            if res < self.net_tol:
                return 0
            if not isfinite(res):
                return 1
            if use_lin:
                self._solve(self.jlu, self.piv_lin, &self.rvec[0])
            else:
                if self._net_lu(vr, vi) != 0:
                    return 1
                self._solve(self.jnet, self.piv_net, &self.rvec[0])
            for i in range(m):
                if not (isfinite(self.rvec[i]) and isfinite(self.rvec[i + m])):
                    return 1
                vr[i] += self.rvec[i]
                vi[i] += self.rvec[i + m]
        return 1

    cdef int _solve_from(self, const double* x, const double* u0r, const double* u0i) noexcept nogil:
        """Newton from (u0r, u0i); on success the result becomes the current solution."""
        cdef int i
        for i in range(self.m):
            self.wur[i] = u0r[i]
            self.wui[i] = u0i[i]
        if self._newton(x, &self.wur[0], &self.wui[0]) != 0:
            return 1
        for i in range(self.m):
            self.ur[i] = self.wur[i]
            self.ui[i] = self.wui[i]
        return 0

    cdef void _measure(self, const double* vr, const double* vi, double* out) noexcept nogil:
        cdef double ufr, ufi, utr, uti, ir, ii
        if self.mf < 0:
            ufr, ufi = self.us_r, self.us_i
        else:
            ufr, ufi = vr[self.mf], vi[self.mf]
        if self.mt < 0:
            utr, uti = self.us_r, self.us_i
        else:
            utr, uti = vr[self.mt], vi[self.mt]
        ir = self.yr_tf * ufr - self.yi_tf * ufi + self.yr_tt * utr - self.yi_tt * uti
        ii = self.yr_tf * ufi + self.yi_tf * ufr + self.yr_tt * uti + self.yi_tt * utr
        # s = -u_t * conj(i)
        out[0] = -(utr * ir + uti * ii) * self.s_base
        out[1] = -(uti * ir - utr * ii) * self.s_base

    cdef double _integrator(self, double chi, double err_pu, double k_i, double lo, double hi,
                            bint frozen) noexcept nogil:
        cdef double rate = k_i * err_pu * self.s_base
        # blocked only while pinned on a limit; stage overshoot is projected away after the step
        if frozen or (chi == hi and rate > 0) or (chi == lo and rate < 0):
            return 0.0
        return rate

    cdef void _local_rhs(self, const double* x, const double* vr, const double* vi, double* out) noexcept nogil:
        cdef int i, j, bi
        cdef double meas[2]
        cdef double th, ur_, ui_, umag, ud, idr, iqr, scale, dev, iqp, prio, other, room
        cdef double d_cmd, q_cmd, pr1, qr1
        cdef bint frozen = False, e
        self._measure(vr, vi, meas)
        for i in range(self.m):
            if fabs(cabs2(vr[i], vi[i]) - 1.0) > self.freeze_band:
                frozen = True
                break
        scale = self.s_base / self.s_rated
        for j in range(self.k):
            bi = self.dg_idx[j]
            ur_ = vr[bi]
            ui_ = vi[bi]
            th = x[5 * j + 2]
            out[5 * j + 0] = self._integrator(x[5 * j], -(self.p_ref - meas[0]) / self.s_base, self.k_i_p,
                                              self.p_min, self.p_max, frozen)
            out[5 * j + 1] = self._integrator(x[5 * j + 1], -(self.q_ref - meas[1]) / self.s_base, self.k_i_q,
                                              self.q_min, self.q_max, frozen)
            out[5 * j + 2] = wrap(atan2(ui_, ur_) - th) / self.t_pll
            pr1 = clip(x[5 * j], self.p_min, self.p_max)
            qr1 = clip(x[5 * j + 1], self.q_min, self.q_max)
            ud = fmax(ur_ * cos(th) + ui_ * sin(th), self.u_floor)
            idr = pr1 / self.s_base / ud
            iqr = -qr1 / self.s_base / ud
            umag = cabs2(ur_, ui_)
            dev = umag - self.u_ref
            if dev < -self.u_dead:
                iqp = -self.k_frt * (dev + self.u_dead)
                e = True
            elif dev > self.u_dead:
                iqp = -self.k_frt * (dev - self.u_dead)
                e = True
            else:
                iqp = 0.0
                e = False
            d_cmd = idr * scale
            q_cmd = iqr * scale - iqp
            if e:
                prio, other = q_cmd, d_cmd
            else:
                prio, other = d_cmd, q_cmd
            prio = clip(prio, -self.i_max, self.i_max)
            room = sqrt(fmax(self.i_max * self.i_max - prio * prio, 0.0))
            other = clip(other, -room, room)
            if e:
                d_cmd, q_cmd = other, prio
            else:
                d_cmd, q_cmd = prio, other
            out[5 * j + 3] = (d_cmd / scale - x[5 * j + 3]) / self.t_conv
            out[5 * j + 4] = (q_cmd / scale - x[5 * j + 4]) / self.t_conv

    cdef int _rhs(self, const double* x, double* out) noexcept nogil:
        self.nfev += 1
        if self._solve_from(x, &self.ur[0], &self.ui[0]) != 0:
            return 1
        self._local_rhs(x, &self.ur[0], &self.ui[0], out)
        return 0

    cdef int _jacobian(self, double* x, const double* f0, const double* u0r, const double* u0i) noexcept nogil:
        cdef int col, j, kind, i, bi, m = self.m, n = self.n
        cdef double dx, save, c0r, c0i, c1r, c1i, th, idd, iqq
        cdef double* tmp = &self.xt[0]
        cdef double* up_r = &self.up_r[0]
        cdef double* up_i = &self.up_i[0]
        cdef double[::1, :] lu_mat
        cdef int[::1] lu_piv
        if self.has_pq:
            if self._net_lu(u0r, u0i) != 0:
                return 1
            lu_mat, lu_piv = self.jnet, self.piv_net
        else:
            lu_mat, lu_piv = self.jlu, self.piv_lin
        for col in range(n):
            save = x[col]
            dx = 1e-7 * fmax(1.0, fabs(save))
            j = col // 5
            kind = col % 5
            # a pinned integrator does not move the clipped set-point: zero column
            if (kind == 0 and (save == self.p_min or save == self.p_max)) or \
                    (kind == 1 and (save == self.q_min or save == self.q_max)):
                for i in range(n):
                    self.jac[i, col] = 0.0
                continue
            if kind >= 2:
                bi = self.dg_idx[j]
                th, idd, iqq = x[5 * j + 2], x[5 * j + 3], x[5 * j + 4]
                c0r = idd * cos(th) - iqq * sin(th)
                c0i = idd * sin(th) + iqq * cos(th)
                x[col] = save + dx
                th, idd, iqq = x[5 * j + 2], x[5 * j + 3], x[5 * j + 4]
                c1r = idd * cos(th) - iqq * sin(th)
                c1i = idd * sin(th) + iqq * cos(th)
                memset(&self.col_rhs[0], 0, 2 * m * sizeof(double))
                self.col_rhs[bi] = c1r - c0r
                self.col_rhs[bi + m] = c1i - c0i
                self._solve(lu_mat, lu_piv, &self.col_rhs[0])
                for i in range(m):
                    up_r[i] = u0r[i] + self.col_rhs[i]
                    up_i[i] = u0i[i] + self.col_rhs[i + m]
                self._local_rhs(x, up_r, up_i, tmp)
            else:
                x[col] = save + dx
                self._local_rhs(x, u0r, u0i, tmp)
            x[col] = save
            for i in range(n):
                self.jac[i, col] = (tmp[i] - f0[i]) / dx
        return 0

    cdef bint _project(self, double* x, double snap) noexcept nogil:
        cdef int j
        cdef double a, b
        cdef bint changed = False
        for j in range(self.k):
            a = x[5 * j]
            b = x[5 * j + 1]
            if a < self.p_min + snap:
                a = self.p_min
            if a > self.p_max - snap:
                a = self.p_max
            if b < self.q_min + snap:
                b = self.q_min
            if b > self.q_max - snap:
                b = self.q_max
            if a != x[5 * j] or b != x[5 * j + 1]:
                changed = True
            x[5 * j] = a
            x[5 * j + 1] = b
        return changed

    cdef void _store(self, int si, const double* xv, const double* vr, const double* vi,
                     double[:, ::1] out_x, double complex[:, ::1] out_u, double[:, ::1] out_meas) noexcept nogil:
        cdef int i
        cdef double meas[2]
        for i in range(self.n):
            out_x[si, i] = xv[i]
        for i in range(self.m):
            out_u[si, i] = vr[i] + 1j * vi[i]
        self._measure(vr, vi, meas)
        out_meas[si, 0] = meas[0]
        out_meas[si, 1] = meas[1]

    # -- Python-facing API -----------------------------------------------

    @property
    def u(self):
        return np.asarray(self.ur) + 1j * np.asarray(self.ui)

    def set_voltages(self, u):
        u = np.asarray(u, dtype=complex)
        self.ur = np.ascontiguousarray(u.real, dtype=float).copy()
        self.ui = np.ascontiguousarray(u.imag, dtype=float).copy()

    def solve_network(self, x, u0=None):
        cdef double[::1] xv = np.ascontiguousarray(x, dtype=float)
        cdef double[::1] ar, ai
        if u0 is None:
            ar, ai = np.array(self.ur), np.array(self.ui)
        else:
            u0 = np.asarray(u0, dtype=complex)
            ar, ai = np.ascontiguousarray(u0.real), np.ascontiguousarray(u0.imag)
        if self._solve_from(&xv[0], &ar[0], &ai[0]) != 0:
            raise NetworkFailure("network solve did not converge")
        return self.u

    def measurement(self, u):
        u = np.asarray(u, dtype=complex)
        cdef double[::1] vr = np.ascontiguousarray(u.real), vi = np.ascontiguousarray(u.imag)
        cdef double out[2]
        self._measure(&vr[0], &vi[0], out)
        return out[0], out[1]

    def local_rhs(self, x, u):
        u = np.asarray(u, dtype=complex)
        cdef double[::1] xv = np.ascontiguousarray(x, dtype=float)
        cdef double[::1] vr = np.ascontiguousarray(u.real), vi = np.ascontiguousarray(u.imag)
        out = np.empty(self.n)
        cdef double[::1] ov = out
        self._local_rhs(&xv[0], &vr[0], &vi[0], &ov[0])
        return out

    def rhs(self, x):
        cdef double[::1] xv = np.ascontiguousarray(x, dtype=float)
        out = np.empty(self.n)
        cdef double[::1] ov = out
        if self._rhs(&xv[0], &ov[0]) != 0:
            raise NetworkFailure("network solve did not converge")
        return out

    def jacobian(self, x, f0, u0):
        cdef double[::1] xv = np.array(x, dtype=float)
        cdef double[::1] fv = np.ascontiguousarray(f0, dtype=float)
        u0 = np.asarray(u0, dtype=complex)
        cdef double[::1] vr = np.ascontiguousarray(u0.real), vi = np.ascontiguousarray(u0.imag)
        if self._jacobian(&xv[0], &fv[0], &vr[0], &vi[0]) != 0:
            raise NetworkFailure("singular network Jacobian")
        return np.array(self.jac)

    def project(self, x, double snap=0.0):
        cdef double[::1] xv = x
        return bool(self._project(&xv[0], snap))

    def integrate(self, x, double t0, double t1, ts, out_x, out_u, out_meas, double rtol=1e-6,
                  double atol=1e-8, double hmax=0.1, double h0=1e-4, int jac_age_max=8,
                  long max_steps=1000000, double hmin=1e-10):
        """Integrate from ``t0`` to ``t1``; see ``fallback.Model.integrate``."""
        cdef double[::1] xv = x
        cdef double[::1] tsv = np.ascontiguousarray(ts, dtype=float)
        cdef double[:, ::1] ox = out_x
        cdef double complex[:, ::1] ou = out_u
        cdef double[:, ::1] om = out_meas
        cdef int status
        cdef int si = 0
        cdef long steps = 0, rejected = 0, njac = 0
        cdef double t_reached = t0, h_next = h0
        with nogil:
            status = self._integrate(&xv[0], t0, t1, tsv, ox, ou, om, rtol, atol, hmax, h0, jac_age_max,
                                     max_steps, hmin, &si, &steps, &rejected, &njac, &t_reached, &h_next)
        return status, t_reached, si, steps, rejected, njac, h_next

    cdef int _integrate(self, double* x, double t0, double t1, double[::1] ts,
                        double[:, ::1] out_x, double complex[:, ::1] out_u, double[:, ::1] out_meas,
                        double rtol, double atol, double hmax, double h0, int jac_age_max, long max_steps,
                        double hmin, int* si_out, long* steps, long* rejected, long* njac,
                        double* t_out, double* h_out) noexcept nogil:
        cdef int n = self.n, m = self.m, ns = ts.shape[0]
        cdef int si = 0, i, j, st, jac_age = 0
        cdef double t = t0, h, err, sc, e, t_new, s, c0, c1, c2, c3, fac, acc
        cdef bint need_jac = True, failed
        cdef double* f0 = &self.f0[0]
        cdef double* f1 = &self.f1[0]
        cdef double* r = &self.f2[0]
        cdef double* xn = &self.xn[0]
        cdef double* xt = &self.xt[0]
        cdef double* uar = &self.uacc_r[0]
        cdef double* uai = &self.uacc_i[0]
        cdef double* unr = &self.unew_r[0]
        cdef double* uni = &self.unew_i[0]
        t_out[0] = t
        h_out[0] = h0
        if self._rhs(x, f0) != 0:
            si_out[0] = 0
            return NET_FAIL
        memcpy(uar, &self.ur[0], m * sizeof(double))
        memcpy(uai, &self.ui[0], m * sizeof(double))
        while si < ns and ts[si] <= t:
            self._store(si, x, uar, uai, out_x, out_u, out_meas)
            si += 1
        h = fmin(fmin(h0, hmax), t1 - t) if t1 > t else 0.0
        while t < t1:
            si_out[0] = si
            t_out[0] = t
            h_out[0] = h
            if steps[0] + rejected[0] >= max_steps:
                return MAX_STEPS
            if t + 1.05 * h >= t1:
                h = t1 - t
            if need_jac:
                if self._jacobian(x, f0, uar, uai) != 0:
                    return NET_FAIL
                njac[0] += 1
                jac_age = 0
                need_jac = False
            for j in range(n):
                for i in range(n):
                    self.wmat[i, j] = -self.jac[i, j]
                self.wmat[j, j] += 1.0 / (h * GAMMA)
            if self._factor(self.wmat, self.piv_w) != 0:
                rejected[0] += 1
                h *= 0.25
                need_jac = True
                if h < hmin:
                    return STEP_UNDERFLOW
                continue
            failed = False
            for st in range(4):
                if st == 0:
                    memcpy(r, f0, n * sizeof(double))
                else:
                    for i in range(n):
                        acc = x[i]
                        for j in range(st):
                            acc = acc + RA[st][j] * self.stg[j, i]
                        xt[i] = acc
                    if self._rhs(xt, r) != 0:
                        failed = True
                        break
                for i in range(n):
                    acc = r[i]
                    for j in range(st):
                        acc = acc + RC[st][j] * self.stg[j, i] / h
                    self.stg[st, i] = acc
                self._solve(self.wmat, self.piv_w, &self.stg[st, 0])
            err = 0.0
            if not failed:
                for i in range(n):
                    acc = x[i]
                    e = 0.0
                    for j in range(4):
                        acc = acc + RM[j] * self.stg[j, i]
                        e = e + RME[j] * self.stg[j, i]
                    xn[i] = acc
                    sc = atol + rtol * fmax(fabs(x[i]), fabs(acc))
                    e = fabs(e) / sc
                    if e > err or e != e:
                        err = e
                if not isfinite(err):
                    err = 1e10
                if err <= 1.0:
                    failed = self._rhs(xn, f1) != 0
            if failed:
                rejected[0] += 1
                memcpy(&self.ur[0], uar, m * sizeof(double))
                memcpy(&self.ui[0], uai, m * sizeof(double))
                h *= 0.25
                if jac_age > 0:
                    need_jac = True
                if h < hmin:
                    return STEP_UNDERFLOW
                continue
            if err <= 1.0:
                memcpy(unr, &self.ur[0], m * sizeof(double))
                memcpy(uni, &self.ui[0], m * sizeof(double))
                t_new = t + h
                if t_new >= t1 or t1 - t_new < 1e-12:
                    t_new = t1
                while si < ns and ts[si] <= t_new:
                    if ts[si] >= t_new:
                        self._store(si, xn, unr, uni, out_x, out_u, out_meas)
                    else:
                        # cubic Hermite between (x, f0) and (xn, f1)
                        s = (ts[si] - t) / h
                        c0 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s)
                        c1 = s * (1.0 - s) * (1.0 - s) * h
                        c2 = s * s * (3.0 - 2.0 * s)
                        c3 = -s * s * (1.0 - s) * h
                        for i in range(n):
                            xt[i] = c0 * x[i] + c1 * f0[i] + c2 * xn[i] + c3 * f1[i]
                        if self._solve_from(xt, unr, uni) != 0:
                            si_out[0] = si
                            t_out[0] = ts[si]
                            return NET_FAIL
                        self._store(si, xt, &self.ur[0], &self.ui[0], out_x, out_u, out_meas)
                    si += 1
                memcpy(x, xn, n * sizeof(double))
                t = t_new
                memcpy(&self.ur[0], unr, m * sizeof(double))
                memcpy(&self.ui[0], uni, m * sizeof(double))
                memcpy(uar, unr, m * sizeof(double))
                memcpy(uai, uni, m * sizeof(double))
                memcpy(f0, f1, n * sizeof(double))
                if self._project(x, atol):
                    if self._rhs(x, f0) != 0:
                        si_out[0] = si
                        t_out[0] = t
                        return NET_FAIL
                    memcpy(uar, &self.ur[0], m * sizeof(double))
                    memcpy(uai, &self.ui[0], m * sizeof(double))
                steps[0] += 1
                jac_age += 1
                if jac_age >= jac_age_max:
                    need_jac = True
                if err == 0.0:
                    fac = 5.0
                else:
                    fac = fmin(5.0, fmax(0.2, 0.8 * pow(err, -1.0 / 3.0)))
                h = fmin(h * fac, hmax)
            else:
                rejected[0] += 1
                memcpy(&self.ur[0], uar, m * sizeof(double))
                memcpy(&self.ui[0], uai, m * sizeof(double))
                h *= fmax(0.1, 0.8 * pow(err, -1.0 / 3.0))
                if jac_age > 0:
                    need_jac = True
                if h < hmin:
                    si_out[0] = si
                    t_out[0] = t
                    h_out[0] = h
                    return STEP_UNDERFLOW
        si_out[0] = si
        t_out[0] = t
        h_out[0] = h
        return OK
