"""Independent reference implementations used as test oracles.

Everything here is plain numpy/scipy with explicit loops so it shares no code
with the package under test.
"""

import math

import numpy as np
from scipy import stats


def se_kernel_loop(x, y, lengthscales, variance):
    s = 0.0
    for a, b, l in zip(x, y, lengthscales):
        s += (a - b) ** 2 / l**2
    return variance * math.exp(-0.5 * s)


def gram_loop(X, Z, lengthscales, variance):
    out = np.empty((len(X), len(Z)))
    for i, x in enumerate(X):
        for j, z in enumerate(Z):
            out[i, j] = se_kernel_loop(x, z, lengthscales, variance)
    return out


def planar_apply(u_hat, w, b, x):
    return x + u_hat * math.tanh(float(np.dot(w, x)) + b)


def numerical_jacobian(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    d = x.size
    J = np.empty((np.asarray(f(x)).size, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, j] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h)
    return J


def rk4_reference(f, x0, t0, t1, n_steps):
    """Scalar-loop RK4, written independently of the package integrator."""
    x = np.array(x0, dtype=float)
    h = (t1 - t0) / n_steps
    for _ in range(n_steps):
        a = np.asarray(f(x))
        b = np.asarray(f(x + h / 2 * a))
        c = np.asarray(f(x + h / 2 * b))
        e = np.asarray(f(x + h * c))
        x = x + h * (a + 2 * b + 2 * c + e) / 6
    return x


def dense_mvn_logpdf_columns(U, K):
    return sum(stats.multivariate_normal(np.zeros(K.shape[0]), K).logpdf(U[:, j]) for j in range(U.shape[1]))


def gaussian_conditional(kxx, Kxz, Kzz, U):
    """Dense conditioning: mean Kxz Kzz^-1 U, variance kxx - Kxz Kzz^-1 Kzx."""
    inv = np.linalg.inv(Kzz)
    return Kxz @ inv @ U, kxx - Kxz @ inv @ Kxz.T


def gaussian_kl_diag(mu, var):
    """KL(N(mu, diag var) || N(0, I)) by the scalar formula."""
    return float(sum(0.5 * (v + m * m - 1 - math.log(v)) for m, v in zip(mu, var)))


def gaussian_kl_quadrature(mu, sigma):
    """Same KL by numerical integration of q log(q/p), one dimension at a time."""
    from scipy.integrate import quad

    total = 0.0
    for m, s in zip(mu, sigma):
        q = stats.norm(m, s)
        p = stats.norm(0, 1)
        total += quad(lambda z: q.pdf(z) * (q.logpdf(z) - p.logpdf(z)), m - 12 * s, m + 12 * s,
                      epsabs=1e-12, epsrel=1e-12)[0]
    return total
