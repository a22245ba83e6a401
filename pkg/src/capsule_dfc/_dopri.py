"""Dormand-Prince 5(4) tableau, dense output and shared jitted helpers."""

import numpy as np
from numba import njit

C2, C3, C4, C5 = 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0
A21 = 1.0 / 5.0
A31, A32 = 3.0 / 40.0, 9.0 / 40.0
A41, A42, A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
A51, A52, A53, A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
A61, A62, A63, A64, A65 = (9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0,
                           49.0 / 176.0, -5103.0 / 18656.0)
A71, A73, A74, A75, A76 = (35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0,
                           -2187.0 / 6784.0, 11.0 / 84.0)
E1, E3, E4, E5, E6, E7 = (71.0 / 57600.0, -71.0 / 16695.0, 71.0 / 1920.0,
                          -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0)
D1, D3, D4, D5, D6, D7 = (-12715105075.0 / 11282082432.0, 87487479700.0 / 32700410799.0,
                          -10690763975.0 / 1880347072.0, 701980252875.0 / 199316789632.0,
                          -1453857185.0 / 822651844.0, 69997945.0 / 29380423.0)


@njit(cache=True)
def dense_eval(coef, theta, out):
    """Continuous extension on one step; ``coef`` has shape (5, n)."""
    t1 = 1.0 - theta
    for j in range(coef.shape[1]):
        out[j] = coef[0, j] + theta * (coef[1, j] + t1 * (coef[2, j] + theta * (coef[3, j] + t1 * coef[4, j])))


@njit(cache=True)
def dense_eval1(coef, theta, j):
    t1 = 1.0 - theta
    return coef[0, j] + theta * (coef[1, j] + t1 * (coef[2, j] + theta * (coef[3, j] + t1 * coef[4, j])))


def dense_eval_np(coef, theta):
    """Vectorised dense output: coef (m, 5, n), theta (m,) -> (m, n)."""
    th = theta[:, None]
    t1 = 1.0 - th
    return coef[:, 0] + th * (coef[:, 1] + t1 * (coef[:, 2] + th * (coef[:, 3] + t1 * coef[:, 4])))


def dense_deriv_np(coef, theta, hp):
    """d/dt of the dense output; hp (m,) are the polynomial step lengths."""
    th = theta[:, None]
    c1, c2, c3, c4 = coef[:, 1], coef[:, 2], coef[:, 3], coef[:, 4]
    # p(th) = c0 + th*c1 + (th - th^2)*c2 + (th^2 - th^3)*c3 + (th^2 - 2 th^3 + th^4)*c4
    dp = c1 + (1 - 2 * th) * c2 + (2 * th - 3 * th ** 2) * c3 + (2 * th - 6 * th ** 2 + 4 * th ** 3) * c4
    return dp / hp[:, None]


@njit(cache=True)
def fill_dense(y, ynew, k1, k3, k4, k5, k6, k7, h, coef):
    for j in range(y.shape[0]):
        dy = ynew[j] - y[j]
        bspl = h * k1[j] - dy
        coef[0, j] = y[j]
        coef[1, j] = dy
        coef[2, j] = bspl
        coef[3, j] = dy - h * k7[j] - bspl
        coef[4, j] = h * (D1 * k1[j] + D3 * k3[j] + D4 * k4[j] + D5 * k5[j] + D6 * k6[j] + D7 * k7[j])


@njit(cache=True)
def grow2(a, n_new):
    b = np.empty(n_new, a.dtype)
    b[: a.shape[0]] = a
    return b


@njit(cache=True)
def grow3(a, n_new):
    b = np.empty((n_new, a.shape[1], a.shape[2]), a.dtype)
    b[: a.shape[0]] = a
    return b


@njit(cache=True)
def grow_i2(a, n_new):
    b = np.empty((n_new, a.shape[1]), a.dtype)
    b[: a.shape[0]] = a
    return b
