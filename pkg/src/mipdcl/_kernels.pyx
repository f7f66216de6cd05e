# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batch integrator for the coupled paclitaxel PK / neutrophil PD system.

Each particle is integrated independently with its own adaptive step
(Dormand-Prince 4(5), FSAL, 4th order dense output).  The public entry
point mirrors :func:`mipdcl._fallback.simulate_segment` exactly.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport pow, fabs, sqrt, isnan, isinf, INFINITY

cnp.import_array()

cdef enum:
    NS = 9
    CENT = 0
    PER1 = 1
    PER2 = 2
    STEM = 3
    PROL = 4
    TR1 = 5
    TR2 = 6
    TR3 = 7
    CIRC = 8

cdef enum:
    OK = 0
    FLOORED = 1
    FAILED = 2

cdef long MAX_STEPS = 1000000

# Dormand-Prince tableau
cdef double C2 = 1.0 / 5.0, C3 = 3.0 / 10.0, C4 = 4.0 / 5.0, C5 = 8.0 / 9.0
cdef double A21 = 1.0 / 5.0
cdef double A31 = 3.0 / 40.0, A32 = 9.0 / 40.0
cdef double A41 = 44.0 / 45.0, A42 = -56.0 / 15.0, A43 = 32.0 / 9.0
cdef double A51 = 19372.0 / 6561.0, A52 = -25360.0 / 2187.0, A53 = 64448.0 / 6561.0, A54 = -212.0 / 729.0
cdef double A61 = 9017.0 / 3168.0, A62 = -355.0 / 33.0, A63 = 46732.0 / 5247.0, A64 = 49.0 / 176.0, A65 = -5103.0 / 18656.0
cdef double B1 = 35.0 / 384.0, B3 = 500.0 / 1113.0, B4 = 125.0 / 192.0, B5 = -2187.0 / 6784.0, B6 = 11.0 / 84.0
cdef double E1 = -71.0 / 57600.0, E3 = 71.0 / 16695.0, E4 = -71.0 / 1920.0, E5 = 17253.0 / 339200.0
cdef double E6 = -22.0 / 525.0, E7 = 1.0 / 40.0

# dense output coefficients, rows = stages 1..7, columns = powers x^1..x^4
cdef double PD[7][4]
_PD_ROWS = (
    (1.0, -8048581381.0 / 2820520608.0, 8663915743.0 / 2820520608.0, -12715105075.0 / 11282082432.0),
    (0.0, 0.0, 0.0, 0.0),
    (0.0, 131558114200.0 / 32700410799.0, -68118460800.0 / 10900136933.0, 87487479700.0 / 32700410799.0),
    (0.0, -1754552775.0 / 470086768.0, 14199869525.0 / 1410260304.0, -10690763975.0 / 1880347072.0),
    (0.0, 127303824393.0 / 49829197408.0, -318862633887.0 / 49829197408.0, 701980252875.0 / 199316789632.0),
    (0.0, -282668133.0 / 205662961.0, 2019193451.0 / 616988883.0, -1453857185.0 / 822651844.0),
    (0.0, 40617522.0 / 29380423.0, -110615467.0 / 29380423.0, 69997945.0 / 29380423.0),
)
for _r in range(7):
    for _c in range(4):
        PD[_r][_c] = _PD_ROWS[_r][_c]

cdef double GOLD = 0.6180339887498949


cdef inline int rhs(const double* y, double u, const double* pk, const double* pd,
                    double* dy) noexcept nogil:
    cdef double v1 = pk[0], km_el = pk[1], vm_el = pk[2], km_tr = pk[3], vm_tr = pk[4]
    cdef double k21 = pk[5], k13 = pk[6], k31 = pk[7]
    cdef double ktr = pd[0], slope = pd[1], gam = pd[2], circ0 = pd[3], ftr = pd[4]
    cdef double c1, elim, transfer, edrug, fb, kprol, kstem, growth
    if y[CIRC] <= 0.0:
        return -1
    c1 = y[CENT] / v1
    elim = c1 * vm_el / (km_el + c1)
    transfer = c1 * vm_tr / (km_tr + c1)
    dy[CENT] = u - elim + k21 * y[PER1] - transfer + k31 * y[PER2] - k13 * y[CENT]
    dy[PER1] = transfer - k21 * y[PER1]
    dy[PER2] = k13 * y[CENT] - k31 * y[PER2]
    edrug = slope * c1
    fb = pow(circ0 / y[CIRC], gam)
    growth = (1.0 - edrug) * fb
    kprol = ftr * ktr
    kstem = (1.0 - ftr) * ktr
    dy[STEM] = kstem * y[STEM] * growth - kstem * y[STEM]
    dy[PROL] = kprol * y[PROL] * growth + kstem * y[STEM] - ktr * y[PROL]
    dy[TR1] = ktr * (y[PROL] - y[TR1])
    dy[TR2] = ktr * (y[TR1] - y[TR2])
    dy[TR3] = ktr * (y[TR2] - y[TR3])
    dy[CIRC] = ktr * (y[TR3] - y[CIRC])
    return 0


cdef inline double poly_val(const double* q, double yold, double h, double x) noexcept nogil:
    return yold + h * x * (q[0] + x * (q[1] + x * (q[2] + x * q[3])))


cdef inline double poly_der(const double* q, double x) noexcept nogil:
    return q[0] + x * (2.0 * q[1] + x * (3.0 * q[2] + x * 4.0 * q[3]))


cdef double golden_min(const double* q, double yold, double h, double xa, double xb) noexcept nogil:
    cdef double a = xa, b = xb, c, d, fc, fd
    cdef int it
    c = b - GOLD * (b - a)
    d = a + GOLD * (b - a)
    fc = poly_val(q, yold, h, c)
    fd = poly_val(q, yold, h, d)
    for it in range(48):
        if fc < fd:
            b = d
            d = c
            fd = fc
            c = b - GOLD * (b - a)
            fc = poly_val(q, yold, h, c)
        else:
            a = c
            c = d
            fc = fd
            d = a + GOLD * (b - a)
            fd = poly_val(q, yold, h, d)
        if b - a < 1e-13:
            break
    return poly_val(q, yold, h, 0.5 * (a + b))


cdef int integrate_one(double* y, const double* pk, const double* pd,
                       const double* bps, int nbp, const double* useg,
                       double t0, const double* tout, int nout, double* yout,
                       const double* win, int nwin, double* nadir,
                       double rtol, const double* atol, long* nsteps) noexcept nogil:
    cdef double k[7][NS]
    cdef double ytmp[NS]
    cdef double ynew[NS]
    cdef double q[NS][4]
    cdef double t = t0, tend, h = 0.05, hmax, err, sc, fac, x, lo, hi, xa, xb, vlo, vhi, dlo, dhi, v
    cdef double circ0 = pd[3]
    cdef int i, j, s, seg, io = 0, status = OK, bad, w
    cdef long steps = 0

    for w in range(nwin):
        nadir[w] = INFINITY
        if win[2 * w] <= t0 <= win[2 * w + 1]:
            nadir[w] = y[CIRC]
    while io < nout and tout[io] <= t0:
        for i in range(NS):
            yout[io * NS + i] = y[i]
        io += 1

    for seg in range(nbp):
        tend = bps[seg]
        if tend <= t:
            continue
        if rhs(y, useg[seg], pk, pd, k[0]) != 0:
            return FAILED
        while t < tend:
            if steps >= MAX_STEPS:
                nsteps[0] = steps
                return FAILED
            if h > tend - t or t + 1.01 * h >= tend:
                h = tend - t
            bad = 0
            for i in range(NS):
                ytmp[i] = y[i] + h * A21 * k[0][i]
            bad |= rhs(ytmp, useg[seg], pk, pd, k[1])
            if bad == 0:
                for i in range(NS):
                    ytmp[i] = y[i] + h * (A31 * k[0][i] + A32 * k[1][i])
                bad |= rhs(ytmp, useg[seg], pk, pd, k[2])
            if bad == 0:
                for i in range(NS):
                    ytmp[i] = y[i] + h * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i])
                bad |= rhs(ytmp, useg[seg], pk, pd, k[3])
            if bad == 0:
                for i in range(NS):
                    ytmp[i] = y[i] + h * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i])
                bad |= rhs(ytmp, useg[seg], pk, pd, k[4])
            if bad == 0:
                for i in range(NS):
                    ytmp[i] = y[i] + h * (A61 * k[0][i] + A62 * k[1][i] + A63 * k[2][i]
                                          + A64 * k[3][i] + A65 * k[4][i])
                bad |= rhs(ytmp, useg[seg], pk, pd, k[5])
            if bad == 0:
                for i in range(NS):
                    ynew[i] = y[i] + h * (B1 * k[0][i] + B3 * k[2][i] + B4 * k[3][i]
                                          + B5 * k[4][i] + B6 * k[5][i])
                bad |= rhs(ynew, useg[seg], pk, pd, k[6])
            if bad != 0:
                if h < 1e-10 * (1.0 + fabs(t)):
                    # step-size underflow at the feedback singularity
                    y[CIRC] = 1e-6 * circ0 if y[CIRC] < 1e-6 * circ0 else y[CIRC]
                    status = FLOORED
                    if rhs(y, useg[seg], pk, pd, k[0]) != 0:
                        return FAILED
                    h = 1e-6
                    continue
                h *= 0.25
                continue
            err = 0.0
            for i in range(NS):
                sc = atol[i] + rtol * (fabs(y[i]) if fabs(y[i]) > fabs(ynew[i]) else fabs(ynew[i]))
                v = h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i]
                         + E6 * k[5][i] + E7 * k[6][i]) / sc
                err += v * v
            err = sqrt(err / NS)
            if isnan(err) or isinf(err):
                if h < 1e-10 * (1.0 + fabs(t)):
                    return FAILED
                h *= 0.25
                continue
            if err > 1.0:
                fac = 0.9 * pow(err, -0.2)
                if fac < 0.2:
                    fac = 0.2
                h *= fac
                if h < 1e-12 * (1.0 + fabs(t)):
                    return FAILED
                continue
            # accepted step [t, t + h]
            steps += 1
            for i in range(NS):
                for j in range(4):
                    q[i][j] = 0.0
                    for s in range(7):
                        q[i][j] += k[s][i] * PD[s][j]
            while io < nout and tout[io] <= t + h:
                x = (tout[io] - t) / h
                for i in range(NS):
                    yout[io * NS + i] = poly_val(q[i], y[i], h, x)
                io += 1
            for w in range(nwin):
                lo = win[2 * w] if win[2 * w] > t else t
                hi = win[2 * w + 1] if win[2 * w + 1] < t + h else t + h
                if lo > hi:
                    continue
                xa = (lo - t) / h
                xb = (hi - t) / h
                vlo = poly_val(q[CIRC], y[CIRC], h, xa)
                vhi = poly_val(q[CIRC], y[CIRC], h, xb)
                if vlo < nadir[w]:
                    nadir[w] = vlo
                if vhi < nadir[w]:
                    nadir[w] = vhi
                dlo = poly_der(q[CIRC], xa)
                dhi = poly_der(q[CIRC], xb)
                if dlo < 0.0 and dhi > 0.0:
                    v = golden_min(q[CIRC], y[CIRC], h, xa, xb)
                    if v < nadir[w]:
                        nadir[w] = v
            t = t + h
            if tend - t < 1e-12 * (1.0 + fabs(tend)):
                t = tend
            for i in range(NS):
                y[i] = ynew[i]
                k[0][i] = k[6][i]
            if err < 1e-10:
                fac = 10.0
            else:
                fac = 0.9 * pow(err, -0.2)
                if fac > 10.0:
                    fac = 10.0
            h *= fac
    while io < nout:
        for i in range(NS):
            yout[io * NS + i] = y[i]
        io += 1
    nsteps[0] = steps
    return status


def simulate_segment(y0, pk, pd, inf_times, inf_rates, double t0, double t1,
                     t_out=None, windows=None, double rtol=1e-6, atol=None):
    """Integrate M particles from ``t0`` to ``t1``.

    Parameters are documented on the pure-Python twin in ``_fallback``.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Y = np.array(y0, dtype=np.float64, order="C", copy=True, ndmin=2)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] PK = np.ascontiguousarray(pk, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] PDA = np.ascontiguousarray(pd, dtype=np.float64)
    cdef Py_ssize_t M = Y.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] IT = np.ascontiguousarray(
        np.asarray(inf_times, dtype=np.float64).reshape(-1, 2))
    cdef Py_ssize_t K = IT.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] IR = np.ascontiguousarray(
        np.broadcast_to(np.asarray(inf_rates, dtype=np.float64).reshape(-1, K) if K else np.zeros((M, 0)), (M, K)))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] TO = np.ascontiguousarray(
        np.empty(0) if t_out is None else np.asarray(t_out, dtype=np.float64).ravel())
    cdef cnp.ndarray[cnp.float64_t, ndim=2] WIN = np.ascontiguousarray(
        np.empty((0, 2)) if windows is None else np.asarray(windows, dtype=np.float64).reshape(-1, 2))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] AT = np.ascontiguousarray(
        np.broadcast_to(np.asarray(1e-9 if atol is None else atol, dtype=np.float64), (NS,)))
    if Y.shape[1] != NS or PK.shape[0] != M or PDA.shape[0] != M:
        raise ValueError("shape mismatch between states and parameter arrays")
    if t1 < t0:
        raise ValueError("t1 must not precede t0")

    # breakpoints: infusion starts and stops strictly inside (t0, t1), then t1
    pts = sorted({float(v) for v in IT.ravel() if t0 < v < t1} | {t1})
    cdef cnp.ndarray[cnp.float64_t, ndim=1] BP = np.asarray(pts, dtype=np.float64)
    cdef int nbp = BP.shape[0]
    lefts = np.concatenate([[t0], BP[:-1]])
    mids = 0.5 * (lefts + BP)
    active = (IT[:, 0][None, :] <= mids[:, None]) & (mids[:, None] < IT[:, 1][None, :])  # (nbp, K)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] U = np.ascontiguousarray(IR @ active.T.astype(np.float64))  # (M, nbp)

    cdef Py_ssize_t T = TO.shape[0]
    cdef Py_ssize_t W = WIN.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] YOUT = np.zeros((M, T, NS))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] NAD = np.full((M, W), np.inf)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] STATUS = np.zeros(M, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] STEPS = np.zeros(M, dtype=np.int64)
    cdef Py_ssize_t m
    cdef long ns
    cdef double* yout_ptr
    cdef double* nad_ptr
    cdef double* to_ptr = &TO[0] if T > 0 else NULL
    cdef double* win_ptr = &WIN[0, 0] if W > 0 else NULL
    with nogil:
        for m in range(M):
            yout_ptr = &YOUT[m, 0, 0] if T > 0 else NULL
            nad_ptr = &NAD[m, 0] if W > 0 else NULL
            ns = 0
            STATUS[m] = integrate_one(&Y[m, 0], &PK[m, 0], &PDA[m, 0], &BP[0], nbp, &U[m, 0],
                                      t0, to_ptr, T, yout_ptr, win_ptr, W, nad_ptr,
                                      rtol, &AT[0], &ns)
            STEPS[m] = ns
    return Y, YOUT, NAD, STATUS, STEPS


# ---------------------------------------------------------------------------
# split path: PK concentration profile shared by a batch of PD particles
# ---------------------------------------------------------------------------

cdef inline void pk_rhs3(const double* y, double u, const double* pk, double* dy) noexcept nogil:
    cdef double c1 = y[0] / pk[0]
    cdef double elim = c1 * pk[2] / (pk[1] + c1)
    cdef double transfer = c1 * pk[4] / (pk[3] + c1)
    dy[0] = u - elim + pk[5] * y[1] - transfer + pk[7] * y[2] - pk[6] * y[0]
    dy[1] = transfer - pk[5] * y[1]
    dy[2] = pk[6] * y[0] - pk[7] * y[2]


def pk_profile(y_pk0, pk, inf_times, inf_rates, double t0, double t1,
               double rtol=1e-8, double atol=1e-10):
    """Central concentration C1(t) on [t0, t1] as cubic-Hermite knots.

    Returns ``(t, c1, dc1, y_pk1)``.  Knots at rate switches are duplicated
    with left and right derivatives.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=1] y = np.array(y_pk0, dtype=np.float64).ravel().copy()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] p = np.ascontiguousarray(pk, dtype=np.float64).ravel()
    it = np.asarray(inf_times, dtype=np.float64).reshape(-1, 2)
    ir = np.asarray(inf_rates, dtype=np.float64).ravel()
    pts = sorted({float(v) for v in it.ravel() if t0 < v < t1} | {t1})
    cdef list ts = [], cs = [], ds = []
    cdef double k[7][3]
    cdef double ytmp[3]
    cdef double ynew[3]
    cdef double t = t0, tend, h = 0.01, err, sc, v, u, fac, mid
    cdef int i
    cdef double v1 = p[0]
    for tend in pts:
        if tend <= t:
            continue
        mid = 0.5 * (t + tend)
        u = float(np.sum(ir[(it[:, 0] <= mid) & (mid < it[:, 1])]))
        pk_rhs3(&y[0], u, &p[0], k[0])
        ts.append(t); cs.append(y[0] / v1); ds.append(k[0][0] / v1)
        while t < tend:
            if h > tend - t or t + 1.01 * h >= tend:
                h = tend - t
            for i in range(3):
                ytmp[i] = y[i] + h * A21 * k[0][i]
            pk_rhs3(ytmp, u, &p[0], k[1])
            for i in range(3):
                ytmp[i] = y[i] + h * (A31 * k[0][i] + A32 * k[1][i])
            pk_rhs3(ytmp, u, &p[0], k[2])
            for i in range(3):
                ytmp[i] = y[i] + h * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i])
            pk_rhs3(ytmp, u, &p[0], k[3])
            for i in range(3):
                ytmp[i] = y[i] + h * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i])
            pk_rhs3(ytmp, u, &p[0], k[4])
            for i in range(3):
                ytmp[i] = y[i] + h * (A61 * k[0][i] + A62 * k[1][i] + A63 * k[2][i]
                                      + A64 * k[3][i] + A65 * k[4][i])
            pk_rhs3(ytmp, u, &p[0], k[5])
            for i in range(3):
                ynew[i] = y[i] + h * (B1 * k[0][i] + B3 * k[2][i] + B4 * k[3][i]
                                      + B5 * k[4][i] + B6 * k[5][i])
            pk_rhs3(ynew, u, &p[0], k[6])
            err = 0.0
            for i in range(3):
                sc = atol + rtol * (fabs(y[i]) if fabs(y[i]) > fabs(ynew[i]) else fabs(ynew[i]))
                v = h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i]
                         + E6 * k[5][i] + E7 * k[6][i]) / sc
                err += v * v
            err = sqrt(err / 3.0)
            if err > 1.0 or isnan(err):
                fac = 0.2 if isnan(err) else 0.9 * pow(err, -0.2)
                h *= fac if fac > 0.2 else 0.2
                if h < 1e-14:
                    raise FloatingPointError("PK step-size underflow")
                continue
            t += h
            if tend - t < 1e-12 * (1.0 + fabs(tend)):
                t = tend
            for i in range(3):
                y[i] = ynew[i]
                k[0][i] = k[6][i]
            ts.append(t); cs.append(y[0] / v1); ds.append(k[0][0] / v1)
            fac = 10.0 if err < 1e-10 else 0.9 * pow(err, -0.2)
            h *= fac if fac < 10.0 else 10.0
    return np.array(ts), np.array(cs), np.array(ds), y


cdef inline double c1_at(const double* kt, const double* kc, const double* kd, long lo, long hi,
                         double t) noexcept nogil:
    # cubic Hermite on the knot interval containing t; zero-length intervals skipped
    cdef long a = lo, b = hi - 1, m
    cdef double dt, s, s2, s3
    if t <= kt[lo]:
        return kc[lo]
    if t >= kt[hi - 1]:
        return kc[hi - 1]
    while b - a > 1:
        m = (a + b) >> 1
        if kt[m] <= t:
            a = m
        else:
            b = m
    dt = kt[b] - kt[a]
    if dt <= 0.0:
        return kc[b]
    s = (t - kt[a]) / dt
    s2 = s * s
    s3 = s2 * s
    return ((2 * s3 - 3 * s2 + 1) * kc[a] + (s3 - 2 * s2 + s) * dt * kd[a]
            + (-2 * s3 + 3 * s2) * kc[b] + (s3 - s2) * dt * kd[b])


cdef inline int pd_rhs6(const double* y, double c1, const double* pd, double* dy) noexcept nogil:
    # PD-only state: stem, prol, t1, t2, t3, circ
    cdef double ktr = pd[0], ftr = pd[4], growth, kprol, kstem
    if y[5] <= 0.0:
        return -1
    growth = (1.0 - pd[1] * c1) * pow(pd[3] / y[5], pd[2])
    kprol = ftr * ktr
    kstem = (1.0 - ftr) * ktr
    dy[0] = kstem * y[0] * growth - kstem * y[0]
    dy[1] = kprol * y[1] * growth + kstem * y[0] - ktr * y[1]
    dy[2] = ktr * (y[1] - y[2])
    dy[3] = ktr * (y[2] - y[3])
    dy[4] = ktr * (y[3] - y[4])
    dy[5] = ktr * (y[4] - y[5])
    return 0


cdef int integrate_pd_one(double* y, const double* pd,
                          const double* kt, const double* kc, const double* kd, long klo, long khi,
                          const double* bps, int nbp, double t0,
                          const double* tout, int nout, double* yout,
                          const double* win, int nwin, double* nadir,
                          double rtol, const double* atol, long* nsteps) noexcept nogil:
    cdef double k[7][6]
    cdef double ytmp[6]
    cdef double ynew[6]
    cdef double q[6][4]
    cdef double cst[7]
    cdef double t = t0, tend, h = 0.05, err, sc, fac, x, lo, hi, xa, xb, vlo, vhi, dlo, dhi, v
    cdef int i, j, s, seg, io = 0, status = OK, bad, w
    cdef long steps = 0
    cdef double* qc

    for w in range(nwin):
        nadir[w] = INFINITY
        if win[2 * w] <= t0 <= win[2 * w + 1]:
            nadir[w] = y[5]
    while io < nout and tout[io] <= t0:
        for i in range(6):
            yout[io * 6 + i] = y[i]
        io += 1

    for seg in range(nbp):
        tend = bps[seg]
        if tend <= t:
            continue
        # right-limit of the forcing at the segment start
        if pd_rhs6(y, c1_at(kt, kc, kd, klo, khi, t + 1e-12 * (1.0 + fabs(t))), pd, k[0]) != 0:
            return FAILED
        while t < tend:
            if steps >= MAX_STEPS:
                nsteps[0] = steps
                return FAILED
            if h > tend - t or t + 1.01 * h >= tend:
                h = tend - t
            bad = 0
            # stage forcings; the last stage sits at the left limit of tend
            cst[1] = c1_at(kt, kc, kd, klo, khi, t + C2 * h)
            cst[2] = c1_at(kt, kc, kd, klo, khi, t + C3 * h)
            cst[3] = c1_at(kt, kc, kd, klo, khi, t + C4 * h)
            cst[4] = c1_at(kt, kc, kd, klo, khi, t + C5 * h)
            cst[5] = c1_at(kt, kc, kd, klo, khi, t + h - 1e-12 * (1.0 + fabs(t + h)))
            for i in range(6):
                ytmp[i] = y[i] + h * A21 * k[0][i]
            bad |= pd_rhs6(ytmp, cst[1], pd, k[1])
            if bad == 0:
                for i in range(6):
                    ytmp[i] = y[i] + h * (A31 * k[0][i] + A32 * k[1][i])
                bad |= pd_rhs6(ytmp, cst[2], pd, k[2])
            if bad == 0:
                for i in range(6):
                    ytmp[i] = y[i] + h * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i])
                bad |= pd_rhs6(ytmp, cst[3], pd, k[3])
            if bad == 0:
                for i in range(6):
                    ytmp[i] = y[i] + h * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i])
                bad |= pd_rhs6(ytmp, cst[4], pd, k[4])
            if bad == 0:
                for i in range(6):
                    ytmp[i] = y[i] + h * (A61 * k[0][i] + A62 * k[1][i] + A63 * k[2][i]
                                          + A64 * k[3][i] + A65 * k[4][i])
                bad |= pd_rhs6(ytmp, cst[5], pd, k[5])
            if bad == 0:
                for i in range(6):
                    ynew[i] = y[i] + h * (B1 * k[0][i] + B3 * k[2][i] + B4 * k[3][i]
                                          + B5 * k[4][i] + B6 * k[5][i])
                bad |= pd_rhs6(ynew, cst[5], pd, k[6])
            if bad != 0:
                if h < 1e-10 * (1.0 + fabs(t)):
                    y[5] = 1e-6 * pd[3] if y[5] < 1e-6 * pd[3] else y[5]
                    status = FLOORED
                    if pd_rhs6(y, c1_at(kt, kc, kd, klo, khi, t), pd, k[0]) != 0:
                        return FAILED
                    h = 1e-6
                    continue
                h *= 0.25
                continue
            err = 0.0
            for i in range(6):
                sc = atol[i] + rtol * (fabs(y[i]) if fabs(y[i]) > fabs(ynew[i]) else fabs(ynew[i]))
                v = h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i]
                         + E6 * k[5][i] + E7 * k[6][i]) / sc
                err += v * v
            err = sqrt(err / 6.0)
            if isnan(err) or isinf(err):
                if h < 1e-10 * (1.0 + fabs(t)):
                    return FAILED
                h *= 0.25
                continue
            if err > 1.0:
                fac = 0.9 * pow(err, -0.2)
                h *= fac if fac > 0.2 else 0.2
                if h < 1e-12 * (1.0 + fabs(t)):
                    return FAILED
                continue
            steps += 1
            for i in range(6):
                for j in range(4):
                    q[i][j] = 0.0
                    for s in range(7):
                        q[i][j] += k[s][i] * PD[s][j]
            while io < nout and tout[io] <= t + h:
                x = (tout[io] - t) / h
                for i in range(6):
                    yout[io * 6 + i] = poly_val(q[i], y[i], h, x)
                io += 1
            qc = q[5]
            for w in range(nwin):
                lo = win[2 * w] if win[2 * w] > t else t
                hi = win[2 * w + 1] if win[2 * w + 1] < t + h else t + h
                if lo > hi:
                    continue
                xa = (lo - t) / h
                xb = (hi - t) / h
                vlo = poly_val(qc, y[5], h, xa)
                vhi = poly_val(qc, y[5], h, xb)
                if vlo < nadir[w]:
                    nadir[w] = vlo
                if vhi < nadir[w]:
                    nadir[w] = vhi
                dlo = poly_der(qc, xa)
                dhi = poly_der(qc, xb)
                if dlo < 0.0 and dhi > 0.0:
                    v = golden_min(qc, y[5], h, xa, xb)
                    if v < nadir[w]:
                        nadir[w] = v
            t = t + h
            if tend - t < 1e-12 * (1.0 + fabs(tend)):
                t = tend
            for i in range(6):
                y[i] = ynew[i]
                k[0][i] = k[6][i]
            if err < 1e-10:
                fac = 10.0
            else:
                fac = 0.9 * pow(err, -0.2)
                if fac > 10.0:
                    fac = 10.0
            h *= fac
    while io < nout:
        for i in range(6):
            yout[io * 6 + i] = y[i]
        io += 1
    nsteps[0] = steps
    return status


def simulate_pd(y0, pd, profiles, profile_index, breakpoints, double t0, double t1,
                t_out=None, windows=None, double rtol=1e-6, atol=None):
    """Integrate M PD particles driven by shared concentration profiles.

    See ``_fallback.simulate_pd`` for the argument contract.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Y = np.array(y0, dtype=np.float64, order="C", copy=True, ndmin=2)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] PDA = np.ascontiguousarray(pd, dtype=np.float64)
    cdef Py_ssize_t M = Y.shape[0]
    kts, kcs, kds, offs = [], [], [], [0]
    total = 0
    for prof in profiles:
        kt_arr = np.asarray(prof[0], dtype=np.float64)
        kts.append(kt_arr)
        kcs.append(np.asarray(prof[1], dtype=np.float64))
        kds.append(np.asarray(prof[2], dtype=np.float64))
        total += kt_arr.size
        offs.append(total)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] KT = np.ascontiguousarray(np.concatenate(kts))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] KC = np.ascontiguousarray(np.concatenate(kcs))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] KD = np.ascontiguousarray(np.concatenate(kds))
    cdef cnp.ndarray[cnp.int64_t, ndim=1] OFF = np.asarray(offs, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] PID = np.ascontiguousarray(
        np.broadcast_to(np.asarray(profile_index, dtype=np.int64), (M,)))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] TO = np.ascontiguousarray(
        np.empty(0) if t_out is None else np.asarray(t_out, dtype=np.float64).ravel())
    cdef cnp.ndarray[cnp.float64_t, ndim=2] WIN = np.ascontiguousarray(
        np.empty((0, 2)) if windows is None else np.asarray(windows, dtype=np.float64).reshape(-1, 2))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] AT = np.ascontiguousarray(
        np.broadcast_to(np.asarray(1e-9 if atol is None else atol, dtype=np.float64), (6,)))
    if Y.shape[1] != 6 or PDA.shape[0] != M:
        raise ValueError("shape mismatch between states and parameter arrays")
    if PID.size and (PID.min() < 0 or PID.max() >= len(profiles)):
        raise ValueError("profile index out of range")
    pts = sorted({float(v) for v in np.ravel(breakpoints) if t0 < v < t1} | {t1})
    cdef cnp.ndarray[cnp.float64_t, ndim=1] BP = np.asarray(pts, dtype=np.float64)
    cdef int nbp = BP.shape[0]
    cdef Py_ssize_t T = TO.shape[0]
    cdef Py_ssize_t W = WIN.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] YOUT = np.zeros((M, T, 6))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] NAD = np.full((M, W), np.inf)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] STATUS = np.zeros(M, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] STEPS = np.zeros(M, dtype=np.int64)
    cdef Py_ssize_t m
    cdef long ns, lo, hi
    cdef double* yout_ptr
    cdef double* nad_ptr
    cdef double* to_ptr = &TO[0] if T > 0 else NULL
    cdef double* win_ptr = &WIN[0, 0] if W > 0 else NULL
    with nogil:
        for m in range(M):
            yout_ptr = &YOUT[m, 0, 0] if T > 0 else NULL
            nad_ptr = &NAD[m, 0] if W > 0 else NULL
            lo = OFF[PID[m]]
            hi = OFF[PID[m] + 1]
            ns = 0
            STATUS[m] = integrate_pd_one(&Y[m, 0], &PDA[m, 0], &KT[0], &KC[0], &KD[0], lo, hi,
                                         &BP[0], nbp, t0, to_ptr, T, yout_ptr, win_ptr, W, nad_ptr,
                                         rtol, &AT[0], &ns)
            STEPS[m] = ns
    return Y, YOUT, NAD, STATUS, STEPS
