"""Optional numba-compiled inner loops for the fixed-point iteration.

These kernels fuse the per-iteration work of the low-order and FCT schemes
(kinetics updates, matrix scatter, artificial diffusion, fluxes, Zalesak
limiting, right-hand side) into a few tight loops.  They are numerically
equivalent to the plain numpy path in ``stepper``/``fct``/``kinetics`` up
to floating-point summation order; the test suite checks the two paths
against each other.  Import failure (no numba) simply disables the fast
path.

Set ``INVASIONFCT_DISABLE_NUMBA=1`` to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np

HAVE_NUMBA = False
if not os.environ.get("INVASIONFCT_DISABLE_NUMBA"):
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - depends on environment
        HAVE_NUMBA = False

if HAVE_NUMBA:

    @njit(cache=True)
    def kinetics_kernel(u_n, c_n, p_n, u_prev, p_prev, tau, e_r, i0, i1, i2,
                        c_k, p_k):
        """Nodal tissue/protease updates with precomputed moments."""
        M = u_n.shape[0]
        for i in range(M):
            c_k[i] = c_n[i] * np.exp(-0.5 * tau * (p_prev[i] + p_n[i]))
            du = u_prev[i] - u_n[i]
            dc = c_k[i] - c_n[i]
            a = u_n[i] * c_n[i]
            b = u_n[i] * dc + c_n[i] * du
            d = du * dc
            p_k[i] = e_r * p_n[i] + a * i0 + b * i1 + d * i2

    @njit(cache=True)
    def system_kernel(local16, scatter, diag, transpose, rows,
                      edge_i, edge_j, edge_pos, mass_edge, f_static,
                      dbar_edge, q_plus, q_minus, lumped, rhs_base,
                      u_prev, theta_tau,
                      is_fct, prelimit_on, limiter_mode,
                      a_data, b_data, rowsum, p_plus, p_minus,
                      r_plus, r_minus, f_edge, rhs):
        """Scatter local matrices, add artificial diffusion, build B and rhs.

        B = M_L + theta*tau*(A + D) with d_ij = -max(a_ij, 0, a_ji) off the
        diagonal and zero-row-sum diagonal.  For the FCT scheme the limited
        antidiffusive fluxes are added to the right-hand side
        (limiter_mode 0 = Zalesak, 1 = all limiters forced to one).
        """
        nnz = a_data.shape[0]
        M = lumped.shape[0]
        E = edge_i.shape[0]
        nc = local16.shape[0]

        for k in range(nnz):
            a_data[k] = 0.0
        for e in range(nc):
            for ab in range(16):
                a_data[scatter[e, ab]] += local16[e, ab]

        # one pass over edges: fold D into B on both orientations, and (for
        # the FCT scheme) build the prelimited fluxes and their nodal sums
        for i in range(M):
            rowsum[i] = 0.0
            p_plus[i] = 0.0
            p_minus[i] = 0.0
        for e in range(E):
            k_ij = edge_pos[e]
            k_ji = transpose[k_ij]
            a_ij = a_data[k_ij]
            a_ji = a_data[k_ji]
            t = a_ij if a_ij > a_ji else a_ji
            if t < 0.0:
                t = 0.0
            i = edge_i[e]
            j = edge_j[e]
            b_data[k_ij] = theta_tau * (a_ij - t)
            b_data[k_ji] = theta_tau * (a_ji - t)
            rowsum[i] += t
            rowsum[j] += t
            if is_fct:
                fe = (-theta_tau * t - mass_edge[e]) * (u_prev[j] - u_prev[i]) \
                    + f_static[e]
                if prelimit_on and fe * dbar_edge[e] > 0.0:
                    fe = 0.0
                f_edge[e] = fe
                if fe > 0.0:
                    p_plus[i] += fe
                    p_minus[j] -= fe
                elif fe < 0.0:
                    p_minus[i] += fe
                    p_plus[j] -= fe
        for i in range(M):
            b_data[diag[i]] = theta_tau * (a_data[diag[i]] + rowsum[i]) \
                + lumped[i]

        if not is_fct:
            for i in range(M):
                rhs[i] = rhs_base[i]
            return

        for i in range(M):
            if p_plus[i] >= 1e-300:
                r = q_plus[i] / p_plus[i]
                r_plus[i] = r if r < 1.0 else 1.0
            else:
                r_plus[i] = 1.0
            if p_minus[i] <= -1e-300:
                r = q_minus[i] / p_minus[i]
                r_minus[i] = r if r < 1.0 else 1.0
            else:
                r_minus[i] = 1.0

        for i in range(M):
            rhs[i] = rhs_base[i]
        for e in range(E):
            fe = f_edge[e]
            if fe == 0.0:
                continue
            i = edge_i[e]
            j = edge_j[e]
            if limiter_mode == 1:
                alpha = 1.0
            elif fe > 0.0:
                alpha = r_plus[i] if r_plus[i] < r_minus[j] else r_minus[j]
            else:
                alpha = r_minus[i] if r_minus[i] < r_plus[j] else r_plus[j]
            val = alpha * fe
            rhs[i] += val
            rhs[j] -= val

    @njit(cache=True)
    def solve_and_norms(indptr, indices, b_data, diag, rhs, u_prev,
                        c_k, c_prev, p_k, p_prev, rtol, max_sweeps,
                        u_k, r_buf):
        """Warm-started Jacobi solve of B u_k = rhs with the residual contract.

        Returns (ok, scaled_residual, norm_x, du, dc, dp).  On failure (not
        strongly diagonally dominant enough) the caller falls back to the LU
        solver; B and rhs stay valid in their buffers.
        """
        M = rhs.shape[0]
        norm_B = 0.0
        for i in range(M):
            s = 0.0
            for k in range(indptr[i], indptr[i + 1]):
                s += abs(b_data[k])
            if s > norm_B:
                norm_B = s
        norm_b = 0.0
        for i in range(M):
            if abs(rhs[i]) > norm_b:
                norm_b = abs(rhs[i])

        for i in range(M):
            u_k[i] = u_prev[i]
        res = np.inf
        ok = False
        scaled = 0.0
        norm_x = 0.0
        for sweep in range(max_sweeps + 1):
            norm_x = 0.0
            for i in range(M):
                if abs(u_k[i]) > norm_x:
                    norm_x = abs(u_k[i])
            res_new = 0.0
            for i in range(M):
                s = rhs[i]
                for k in range(indptr[i], indptr[i + 1]):
                    s -= b_data[k] * u_k[indices[k]]
                r_buf[i] = s
                if abs(s) > res_new:
                    res_new = abs(s)
            scale = norm_B * norm_x + norm_b
            if np.isfinite(res_new) and res_new <= rtol * scale:
                ok = True
                scaled = res_new / scale if scale > 0.0 else 0.0
                break
            if not np.isfinite(res_new) or res_new > 0.3 * res:
                break  # stalling; LU fallback
            res = res_new
            for i in range(M):
                u_k[i] += r_buf[i] / b_data[diag[i]]
        if not ok:
            return False, 0.0, 0.0, 0.0, 0.0, 0.0
        su = sc = sp = 0.0
        for i in range(M):
            du = u_k[i] - u_prev[i]
            dc = c_k[i] - c_prev[i]
            dp = p_k[i] - p_prev[i]
            su += du * du
            sc += dc * dc
            sp += dp * dp
        return True, scaled, norm_x, np.sqrt(su), np.sqrt(sc), np.sqrt(sp)

    @njit(cache=True)
    def diff_norms(u_k, u_prev, c_k, c_prev, p_k, p_prev):
        """Euclidean norms of the three iterate increments."""
        su = sc = sp = 0.0
        for i in range(u_k.shape[0]):
            du = u_k[i] - u_prev[i]
            dc = c_k[i] - c_prev[i]
            dp = p_k[i] - p_prev[i]
            su += du * du
            sc += dc * dc
            sp += dp * dp
        return np.sqrt(su), np.sqrt(sc), np.sqrt(sp)

    @njit(cache=True)
    def damp_inplace(u_k, u_prev, c_k, c_prev, p_k, p_prev, beta):
        omb = 1.0 - beta
        for i in range(u_k.shape[0]):
            u_prev[i] = beta * u_k[i] + omb * u_prev[i]
            c_prev[i] = beta * c_k[i] + omb * c_prev[i]
            p_prev[i] = beta * p_k[i] + omb * p_prev[i]
