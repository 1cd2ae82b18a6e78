"""In-place statevector kernels.

All loops are serial so that floating point reductions happen in a fixed
order; parallelism lives at the ensemble level.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True)
def phase(psi, energies, gamma):
    for z in range(psi.size):
        a = -gamma * energies[z]
        psi[z] *= complex(math.cos(a), math.sin(a))


@numba.njit(cache=True)
def mixer(psi, n, theta):
    """exp(-i theta/2 X) on every qubit."""
    c = math.cos(0.5 * theta)
    s = math.sin(0.5 * theta)
    ms = complex(0.0, -s)
    dim = psi.size
    for q in range(n):
        stride = 1 << q
        for base in range(0, dim, 2 * stride):
            for i in range(base, base + stride):
                a = psi[i]
                b = psi[i + stride]
                psi[i] = c * a + ms * b
                psi[i + stride] = ms * a + c * b


@numba.njit(cache=True)
def apply_hx(psi, n, out):
    dim = psi.size
    for z in range(dim):
        acc = 0j
        for q in range(n):
            acc += psi[z ^ (1 << q)]
        out[z] = acc


@numba.njit(cache=True)
def qaoa_state(energies, n, gammas, thetas):
    dim = energies.size
    psi = np.full(dim, complex(1.0 / math.sqrt(dim), 0.0))
    for i in range(gammas.size):
        phase(psi, energies, gammas[i])
        mixer(psi, n, thetas[i])
    return psi


@numba.njit(cache=True)
def expectation(psi, energies):
    acc = 0.0
    for z in range(psi.size):
        v = psi[z]
        acc += (v.real * v.real + v.imag * v.imag) * energies[z]
    return acc


@numba.njit(cache=True)
def qaoa_value_and_grad(energies, n, gammas, thetas):
    """<H> and its exact gradient by reverse-mode propagation.

    Returns (value, d/dgamma, d/dtheta). The forward state is walked back
    with inverse layers, so memory stays O(2^n).
    """
    p = gammas.size
    psi = qaoa_state(energies, n, gammas, thetas)
    value = expectation(psi, energies)
    lam = psi * energies
    tmp = np.empty_like(psi)
    g_gamma = np.empty(p)
    g_theta = np.empty(p)
    for i in range(p - 1, -1, -1):
        # dE/dtheta_i = Im <lam|H_x|psi> with lam, psi after layer i
        apply_hx(psi, n, tmp)
        acc = 0.0
        for z in range(psi.size):
            acc += (lam[z].conjugate() * tmp[z]).imag
        g_theta[i] = acc
        mixer(psi, n, -thetas[i])
        mixer(lam, n, -thetas[i])
        # dE/dgamma_i = 2 Im <mu|H|phi>
        acc = 0.0
        for z in range(psi.size):
            acc += (lam[z].conjugate() * psi[z]).imag * energies[z]
        g_gamma[i] = 2.0 * acc
        phase(psi, energies, -gammas[i])
        phase(lam, energies, -gammas[i])
    return value, g_gamma, g_theta


@numba.njit(cache=True)
def apply_ham(psi, energies, n, mixer_coef, cost_coef, out):
    """out = (mixer_coef * H_x + cost_coef * H) psi."""
    dim = psi.size
    for z in range(dim):
        acc = 0j
        for q in range(n):
            acc += psi[z ^ (1 << q)]
        out[z] = mixer_coef * acc + cost_coef * energies[z] * psi[z]


@numba.njit(cache=True)
def rk4_step(psi, energies, n, mixer_coef, cost_coefs, h, k1, k2, k3, k4, work):
    """Classic RK4 for i dpsi/dx = H(x) psi.

    ``cost_coefs`` holds the cost weight at the step start, midpoint and end.
    """
    dim = psi.size
    mi = complex(0.0, -1.0)
    apply_ham(psi, energies, n, mixer_coef, cost_coefs[0], k1)
    for z in range(dim):
        k1[z] *= mi
        work[z] = psi[z] + 0.5 * h * k1[z]
    apply_ham(work, energies, n, mixer_coef, cost_coefs[1], k2)
    for z in range(dim):
        k2[z] *= mi
        work[z] = psi[z] + 0.5 * h * k2[z]
    apply_ham(work, energies, n, mixer_coef, cost_coefs[1], k3)
    for z in range(dim):
        k3[z] *= mi
        work[z] = psi[z] + h * k3[z]
    apply_ham(work, energies, n, mixer_coef, cost_coefs[2], k4)
    for z in range(dim):
        k4[z] *= mi
        psi[z] += h / 6.0 * (k1[z] + 2.0 * k2[z] + 2.0 * k3[z] + k4[z])
