"""Independent reference computations used by the tests."""

import numpy as np
from scipy import integrate

from gridpulse.grid import loads


def ybus_incidence(model):
    """Bus admittance matrix assembled from from/to incidence matrices."""
    n, m = model.n_bus, len(model.branches)
    Cf = np.zeros((m, n))
    Ct = np.zeros((m, n))
    ys = np.empty(m, complex)
    bc = np.empty(m)
    tap = np.empty(m)
    for k, br in enumerate(model.branches):
        Cf[k, model.bus_index(br.from_bus)] = 1.0
        Ct[k, model.bus_index(br.to_bus)] = 1.0
        ys[k] = 1.0 / complex(br.r, br.x)
        bc[k] = br.b
        tap[k] = br.tap
    Ytt = ys + 0.5j * bc
    Yff = Ytt / tap**2
    Yft = -ys / tap
    Yf = np.diag(Yff) @ Cf + np.diag(Yft) @ Ct
    Yt = np.diag(Yft) @ Cf + np.diag(Ytt) @ Ct
    ysh = np.array([complex(b.gs, b.bs) for b in model.buses])
    return Cf.T @ Yf + Ct.T @ Yt + np.diag(ysh)


def polar_mismatch(Y, v, p_spec, q_spec):
    """Per-bus (dP, dQ) from the polar power equations, element by element."""
    n = len(v)
    vm, va = np.abs(v), np.angle(v)
    G, B = Y.real, Y.imag
    dp, dq = np.empty(n), np.empty(n)
    for i in range(n):
        p = q = 0.0
        for j in range(n):
            a = va[i] - va[j]
            p += vm[i] * vm[j] * (G[i, j] * np.cos(a) + B[i, j] * np.sin(a))
            q += vm[i] * vm[j] * (G[i, j] * np.sin(a) - B[i, j] * np.cos(a))
        dp[i], dq[i] = p - p_spec[i], q - q_spec[i]
    return dp, dq


# single machine on an infinite bus through two parallel lossless lines
SMIB = dict(pg=0.9, xd=0.3, x_line=0.4, h=5.0, location=0.5, frequency=60.0)


def smib_text(pg=SMIB["pg"], xd=SMIB["xd"], x=SMIB["x_line"], h=SMIB["h"]):
    return (
        "gridmodel-v1 base_mva=100 frequency=60\n"
        "[buses]\n1,PV,0,0,0,0\n2,slack,0,0,0,0\n"
        f"[branches]\n1,1,2,0,{x},0,1,3\n2,1,2,0,{x},0,1,3\n"
        f"[generators]\n1,{pg},1.0,{h},{xd},0\n2,0,1.0,1e7,1e-7,0\n")


def smib_model(**kw):
    return loads(smib_text(**kw), name="smib")


def smib_critical_clearing_time(pg=SMIB["pg"], xd=SMIB["xd"], x=SMIB["x_line"],
                                h=SMIB["h"], f=SMIB["location"], frequency=60.0):
    """Equal-area critical angle, then the time to reach it by quadrature.

    Bolted fault at fraction ``f`` along the second line; the infinite bus
    sits at 1 pu and the machine terminal is held at 1 pu.
    """
    theta = np.arcsin(pg * x / 2)
    vt = np.exp(1j * theta)
    current = (vt - 1.0) / (1j * x / 2)
    emf = vt + 1j * xd * current
    e, d0 = abs(emf), np.angle(emf)
    p_fault = e / ((xd * x + f * x * x + f * x * xd) / (f * x))
    p_post = e / (xd + x)
    d_max = np.pi - np.arcsin(pg / p_post)
    cos_cr = (pg * (d_max - d0) + p_post * np.cos(d_max) - p_fault * np.cos(d0)) \
        / (p_post - p_fault)
    d_cr = np.arccos(cos_cr)
    m = 2 * h / (2 * np.pi * frequency)

    def h_of(d):
        # speed^2 = (d - d0) * h_of(d) during the fault
        if d == d0:
            return (2 / m) * (pg - p_fault * np.sin(d0))
        return (2 / m) * (pg * (d - d0) + p_fault * (np.cos(d) - np.cos(d0))) / (d - d0)

    t, _ = integrate.quad(lambda d: h_of(d) ** -0.5, d0, d_cr, weight="alg", wvar=(-0.5, 0))
    return t
