"""Theta-method time stepping for the invasion system with three schemes.

Per time step the nonlinear problem is solved by damped fixed-point
iterations: the tissue and protease get their exact nodal updates from the
lagged iterates, the state-dependent stiffness (and, except for the plain
Galerkin scheme, artificial diffusion, raw fluxes, prelimiting and Zalesak
limiters) is rebuilt, and one sparse linear system produces the next cancer
density iterate.  Iterations stop when the Euclidean norms of all three
increments fall below the tolerance; otherwise all three iterates are
damped and the sweep repeats.

Schemes
-------
``galerkin``
    Consistent mass, raw stiffness; no stabilization, no positivity
    guarantees (the negative control).
``low_order``
    Lumped mass plus artificial diffusion; provably positivity preserving
    under the time-step conditions, but very diffusive.
``fct``
    Low-order scheme plus limited antidiffusive fluxes (Zalesak); positivity
    preserving under the same conditions with far less smearing.

The inner iteration has two interchangeable implementations: a plain
numpy/scipy path built from the public ``assembly``/``fct``/``kinetics``
operations, and a fused numba fast path (see ``_kernels``); they agree to
floating-point summation order and the tests assert it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import splu

from . import _kernels
from . import fct as fct_mod
from .assembly import Assembler, PatternMatrix, artificial_diffusion, assembler_for
from .kinetics import exp_moments, update_c, update_p
from .mesh import Mesh, shape_constant_kappa

log = logging.getLogger(__name__)

SCHEMES = ("galerkin", "low_order", "fct")
TAU_POLICIES = ("enforce", "warn", "off")

# Factor keeping the enforced time step strictly below the implicit-side
# admissibility bound, which requires strict inequality.
_STRICT_MARGIN = 1.0 - 1e-9


class StepFailure(RuntimeError):
    """A time step could not be completed (solver breakdown, blow-up, ...)."""

    def __init__(self, message: str, time: float | None = None):
        if time is not None:
            message = f"t={time:.6g}: {message}"
        super().__init__(message)
        self.time = time


@dataclass
class SchemeConfig:
    """All knobs of one simulation run."""

    mu: float = 1.0
    chi: float = 1.0
    eps: float = 0.2
    alpha_inv: float = 0.0
    theta: float = 0.5
    scheme: str = "fct"
    tol: float = 1e-8
    damping: float = 0.5
    max_iterations: int = 200
    tau: float = 0.1
    tau_policy: str = "enforce"
    final_time: float = 50.0
    on_nonconvergence: str = "raise"  # or "accept"
    # diagnostic switches used by the scheme-equivalence checks
    limiter_override: str | None = None  # None, "zero" or "one"
    prelimiting: bool = True
    galerkin_variant: str = "raw"  # "raw" or "abs"

    def __post_init__(self):
        if self.mu < 0 or self.chi < 0:
            raise ValueError("mu and chi must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.alpha_inv < 0:
            raise ValueError("alpha_inv must be non-negative")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping factor must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.tau_policy not in TAU_POLICIES:
            raise ValueError(f"tau_policy must be one of {TAU_POLICIES}")
        if self.final_time < 0:
            raise ValueError("final_time must be non-negative")
        if self.on_nonconvergence not in ("raise", "accept"):
            raise ValueError("on_nonconvergence must be 'raise' or 'accept'")
        if self.limiter_override not in (None, "zero", "one"):
            raise ValueError("limiter_override must be None, 'zero' or 'one'")
        if self.galerkin_variant not in ("raw", "abs"):
            raise ValueError("galerkin_variant must be 'raw' or 'abs'")


@dataclass
class State:
    """Nodal coefficients of the three fields at one time level."""

    u: np.ndarray
    c: np.ndarray
    p: np.ndarray
    t: float = 0.0

    def copy(self) -> "State":
        return State(self.u.copy(), self.c.copy(), self.p.copy(), self.t)


@dataclass
class StepDiagnostics:
    """Per-step record of the fixed-point iteration and invariant checks."""

    t: float
    tau: float
    iterations: int
    converged: bool
    du: float
    dc: float
    dp: float
    u_min: float
    u_max: float
    c_min: float
    c_max: float
    p_min: float
    p_max: float
    residual: float
    explicit_ok: bool | None
    implicit_apriori_ok: bool | None
    implicit_aposteriori_ok: bool | None
    m_matrix_ok: bool | None


_LOG_COLUMNS = [f.name for f in fields(StepDiagnostics)]


class DiagnosticsLog:
    """Columnar per-step diagnostics storage (compact for long runs)."""

    def __init__(self):
        self._cols = {name: np.empty(1024) for name in _LOG_COLUMNS}
        self.n = 0

    def append(self, d: StepDiagnostics) -> None:
        if self.n == len(self._cols["t"]):
            for k, v in self._cols.items():
                grown = np.empty(2 * len(v))
                grown[: self.n] = v
                self._cols[k] = grown
        for k in _LOG_COLUMNS:
            v = getattr(d, k)
            self._cols[k][self.n] = np.nan if v is None else float(v)
        self.n += 1

    def column(self, name: str) -> np.ndarray:
        return self._cols[name][: self.n]

    def __len__(self) -> int:
        return self.n

    def record(self, i: int) -> StepDiagnostics:
        vals = {}
        for name in _LOG_COLUMNS:
            x = self._cols[name][i]
            if name == "iterations":
                vals[name] = int(x)
            elif name == "converged":
                vals[name] = bool(x)
            elif name.endswith("_ok"):
                vals[name] = None if np.isnan(x) else bool(x)
            else:
                vals[name] = float(x)
        return StepDiagnostics(**vals)

    def records(self):
        return [self.record(i) for i in range(self.n)]


@dataclass
class SimulationResult:
    """Trajectory summary: final state, per-step log, requested snapshots."""

    mesh: Mesh
    config: SchemeConfig
    state: State
    log: DiagnosticsLog
    snapshots: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.log)


def initialize(mesh: Mesh, u0, c0, p0) -> State:
    """Nodal interpolation of the initial data at t = 0."""

    def interp(f):
        x, y = mesh.coords[:, 0], mesh.coords[:, 1]
        vals = np.asarray(f(x, y), dtype=float)
        if vals.shape != (mesh.n_nodes,):
            vals = np.broadcast_to(vals, (mesh.n_nodes,)).astype(float)
        return vals.copy()

    return State(interp(u0), interp(c0), interp(p0), 0.0)


class LinearSolver:
    """Sparse direct solver with factorization reuse and refinement.

    The system matrix changes a little in every fixed-point iteration, so
    the last LU factorization is kept and used as a preconditioner for
    iterative refinement; a warm start and, for strongly diagonally
    dominant systems, plain Jacobi sweeps avoid most factorizations.  Only
    when refinement fails to reach the residual contract is the current
    matrix refactorized.  Every returned solution satisfies
    ``||B x - b||_inf <= rtol * (||B||_inf ||x||_inf + ||b||_inf)``.
    """

    rtol = 1e-10
    max_refine = 3
    max_jacobi = 5

    def __init__(self, pattern):
        self.pattern = pattern
        n, nnz = pattern.n, pattern.nnz
        self._csr = csr_matrix(
            (np.zeros(nnz), pattern.indices, pattern.indptr), shape=(n, n)
        )
        helper = csr_matrix(
            (np.arange(nnz, dtype=float), pattern.indices, pattern.indptr),
            shape=(n, n),
        ).tocsc()
        self._csc_perm = helper.data.astype(np.int64)
        self._csc = helper
        self._lu = None
        self.refactorizations = 0

    def _norm_inf(self, data) -> float:
        return float(
            np.add.reduceat(np.abs(data), self.pattern.indptr[:-1]).max()
        )

    def _refactor(self, data) -> None:
        self._csc.data = data[self._csc_perm]
        try:
            self._lu = splu(self._csc, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:  # singular factor
            self._lu = None
            raise StepFailure(f"sparse factorization failed: {exc}") from exc
        self.refactorizations += 1

    def solve(self, data: np.ndarray, b: np.ndarray, x0=None, jacobi=False):
        """Solve B x = b for the matrix with the given pattern data.

        ``x0`` is an optional warm start; with ``jacobi=True`` cheap Jacobi
        sweeps are tried before falling back to LU corrections.  Returns
        ``(x, scaled_residual)``; raises StepFailure when the matrix is
        numerically singular or the residual contract cannot be met.
        """
        csr = self._csr
        csr.data = data
        norm_B = self._norm_inf(data)
        norm_b = float(np.abs(b).max(initial=0.0))

        def passes(x, r):
            res = float(np.abs(r).max(initial=0.0))
            scale = norm_B * float(np.abs(x).max(initial=0.0)) + norm_b
            ok = math.isfinite(res) and res <= self.rtol * scale
            return ok, (res / scale if scale > 0 else 0.0), res

        x = None
        if x0 is not None:
            x = x0.copy()
            r = b - csr @ x
            ok, scaled, res = passes(x, r)
            if ok:
                return x, scaled
            if jacobi:
                dg = data[self.pattern.diag]
                for _ in range(self.max_jacobi):
                    x += r / dg
                    r = b - csr @ x
                    ok, scaled, res_new = passes(x, r)
                    if ok:
                        return x, scaled
                    if not math.isfinite(res_new) or res_new > 0.3 * res:
                        break  # not contracting; hand over to LU
                    res = res_new

        refactored = self._lu is None
        if refactored:
            self._refactor(data)
        if x is None:
            x = self._lu.solve(b)
        while True:
            for _ in range(self.max_refine + 1):
                r = b - csr @ x
                ok, scaled, _ = passes(x, r)
                if ok:
                    return x, scaled
                x = x + self._lu.solve(r)
                if not np.all(np.isfinite(x)):
                    break
            if refactored:
                raise StepFailure(
                    "linear solve failed to meet the residual contract "
                    "(matrix numerically singular or badly conditioned)"
                )
            self._refactor(data)
            refactored = True
            x = self._lu.solve(b)


def linear_step(B, b: np.ndarray) -> np.ndarray:
    """One-shot contract-checked sparse solve of B x = b.

    ``B`` may be a PatternMatrix or any scipy sparse matrix.  Raises
    StepFailure for singular or severely ill-conditioned systems.
    """
    if isinstance(B, PatternMatrix):
        solver = LinearSolver(B.pattern)
        x, _ = solver.solve(B.data, np.asarray(b, dtype=float))
        return x
    B = csr_matrix(B)
    b = np.asarray(b, dtype=float)
    lu = splu(B.tocsc())
    x = lu.solve(b)
    norm_B = float(np.abs(B).sum(axis=1).max())

    def bound(x):
        return 1e-10 * (norm_B * float(np.abs(x).max(initial=0.0))
                        + float(np.abs(b).max(initial=0.0)))

    for _ in range(4):
        r = b - B @ x
        if float(np.abs(r).max(initial=0.0)) <= bound(x) and np.all(np.isfinite(x)):
            return x
        x = x + lu.solve(r)
    raise StepFailure("linear solve failed to meet the residual contract")


def max_admissible_tau(mesh: Mesh, lumped_mass: np.ndarray, L_old: PatternMatrix,
                       config: SchemeConfig, kappa_sq: float | None = None):
    """Sufficient time-step bounds for positivity preservation.

    Returns ``(tau_explicit, tau_implicit)``:

    * explicit side: ``(1-theta) tau l_ii <= m_i``, i.e. ``tau <=
      min_i m_i / ((1-theta) l_ii)`` over nodes with positive diagonal;
      infinite for theta = 1 or when no diagonal entry is positive.
    * implicit side (a-priori, via the shape constant): ``theta tau (mu m_i
      + chi n_v kappa^2 sum_{K ni x_i} h_K^(d-2)) < m_i`` with n_v = 4 and
      d = 2; infinite for theta = 0.  Strict inequality is required.
    """
    theta = config.theta
    if kappa_sq is None:
        kappa_sq = shape_constant_kappa(mesh) ** 2
    if theta >= 1.0:
        tau_explicit = math.inf
    else:
        l_diag = L_old.diagonal()
        pos = l_diag > 0
        if not np.any(pos):
            tau_explicit = math.inf
        else:
            tau_explicit = float(
                (lumped_mass[pos] / ((1.0 - theta) * l_diag[pos])).min()
            )
    if theta <= 0.0:
        tau_implicit = math.inf
    else:
        denom = theta * (config.mu * lumped_mass
                         + config.chi * 4.0 * kappa_sq * mesh.incident_cells)
        with np.errstate(divide="ignore"):
            ratios = np.where(denom > 0, lumped_mass / denom, math.inf)
        tau_implicit = float(ratios.min())
    return tau_explicit, tau_implicit


def low_order_predictor(lumped_mass: np.ndarray, L_old: PatternMatrix,
                        u_old: np.ndarray, tau: float, theta: float) -> np.ndarray:
    """Explicit low-order intermediate solution of the splitting.

    u_bar_i = u^n_i - (1-theta) tau (L^n u^n)_i / m_i.  Under the explicit
    time-step condition this predictor inherits non-negativity from u^n.
    """
    if theta >= 1.0:
        return u_old.copy()
    return u_old - ((1.0 - theta) * tau / lumped_mass) * (L_old.to_csr() @ u_old)


@dataclass
class _StepCache:
    """Per-step constants shared by all fixed-point iterations."""

    tau: float
    theta_tau: float
    e_r: float
    i0: float
    i1: float
    i2: float
    u_bar: np.ndarray | None
    rhs_base: np.ndarray
    D_old: PatternMatrix | None = None
    f_static: np.ndarray | None = None
    dbar_edge: np.ndarray | None = None
    q_plus: np.ndarray | None = None
    q_minus: np.ndarray | None = None
    jacobi_hint: bool = False


class Stepper:
    """Reusable time stepper bound to one mesh and one configuration."""

    def __init__(self, mesh: Mesh, config: SchemeConfig):
        self.mesh = mesh
        self.config = config
        self.assembler: Assembler = assembler_for(mesh)
        self.pattern = self.assembler.pattern
        self.mass = self.assembler.mass()
        self.lumped = self.assembler.lumped_mass()
        self.kappa_sq = shape_constant_kappa(mesh) ** 2
        self.solver = LinearSolver(self.pattern)
        # state-independent Laplacian, used by the a-posteriori tau check
        self._laplacian = self.assembler.stiffness(
            np.zeros(mesh.n_nodes), np.zeros(mesh.n_nodes),
            mu=0.0, chi=0.0, alpha_inv=1.0,
        ).to_csr()
        self._mass_csr = self.mass.to_csr()
        self._mass_edge = self.mass.data[self.pattern.edge_pos_ij]
        self._tau_warned = False
        self.use_fast_path = _kernels.HAVE_NUMBA and config.scheme != "galerkin"
        self._init_buffers()

    def _init_buffers(self):
        mesh, p = self.mesh, self.pattern
        q = self.assembler.quad
        cfg = self.config
        nc, M, nnz, E = mesh.n_cells, p.n, p.nnz, p.n_edges
        self._cells_flat = mesh.cells.ravel()
        self._scatter2d = self.assembler.scatter.reshape(nc, 16)
        # quadrature tables with the model constants folded in
        self._Pm_s = (-cfg.mu * mesh.h**2) * q.P_mass
        self._gradxy = np.hstack([q.grad_x, q.grad_y])            # (4, 18)
        self._Pg_s = (-cfg.chi) * np.vstack([q.P_gx, q.P_gy])      # (18, 16)
        self._lap_row = cfg.alpha_inv * q.lap_16
        self._basis = q.basis
        # iteration work arrays
        self._u4 = np.empty((nc, 4))
        self._c4 = np.empty((nc, 4))
        self._uq = np.empty((nc, 9))
        self._cg = np.empty((nc, 18))
        self._local = np.empty((nc, 16))
        self._tmp16 = np.empty((nc, 16))
        self._a_data = np.empty(nnz)
        self._b_data = np.empty(nnz)
        self._rowsum = np.empty(M)
        self._p_plus = np.empty(M)
        self._p_minus = np.empty(M)
        self._r_plus = np.empty(M)
        self._r_minus = np.empty(M)
        self._f_edge = np.empty(E)
        self._rhs = np.empty(M)
        self._c_k = np.empty(M)
        self._p_k = np.empty(M)
        self._u_k = np.empty(M)
        self._r_buf = np.empty(M)
        self._u_prev = np.empty(M)
        self._c_prev = np.empty(M)
        self._p_prev = np.empty(M)

    # -- helpers ---------------------------------------------------------

    def _assemble(self, u, c, variant):
        cfg = self.config
        return self.assembler.stiffness(
            u, c, mu=cfg.mu, chi=cfg.chi, variant=variant, alpha_inv=cfg.alpha_inv
        )

    def _stiffness_variant(self):
        if self.config.scheme == "galerkin":
            return self.config.galerkin_variant
        return "abs"

    def _clip_tau(self, tau_req: float, tau_explicit: float, tau_implicit: float):
        cfg = self.config
        tau = tau_req
        if cfg.tau_policy == "enforce":
            tau = min(tau, tau_explicit, tau_implicit * _STRICT_MARGIN)
        elif cfg.tau_policy == "warn":
            if tau > min(tau_explicit, tau_implicit) and not self._tau_warned:
                log.warning(
                    "time step %.3g exceeds the sufficient positivity bounds "
                    "(explicit %.3g, implicit %.3g); continuing per policy",
                    tau, tau_explicit, tau_implicit,
                )
                self._tau_warned = True
        return tau

    # -- one time step ---------------------------------------------------

    def step(self, state: State) -> tuple[State, StepDiagnostics]:
        """Advance the state by one (possibly clipped) time step."""
        cfg = self.config
        u_n, c_n = state.u, state.c
        variant = self._stiffness_variant()

        if cfg.scheme == "galerkin":
            tau = min(cfg.tau, cfg.final_time - state.t)
            A_old = self._assemble(u_n, c_n, variant)
            rhs_base = self._mass_csr @ u_n - ((1.0 - cfg.theta) * tau) * (
                A_old.to_csr() @ u_n
            )
            cache = self._make_cache(tau, None, rhs_base, None)
            return self._iterate(state, cache, math.nan, math.nan)

        A_old = self._assemble(u_n, c_n, variant)
        D_old = artificial_diffusion(A_old)
        L_old = PatternMatrix(self.pattern, A_old.data + D_old.data)
        tau_explicit, tau_implicit = max_admissible_tau(
            self.mesh, self.lumped, L_old, cfg, self.kappa_sq
        )
        tau = self._clip_tau(cfg.tau, tau_explicit, tau_implicit)
        tau = min(tau, cfg.final_time - state.t)
        u_bar = low_order_predictor(self.lumped, L_old, u_n, tau, cfg.theta)
        rhs_base = self.lumped * u_bar
        cache = self._make_cache(tau, u_bar, rhs_base, D_old, L_old, u_n)
        return self._iterate(state, cache, tau_explicit, tau_implicit)

    def _make_cache(self, tau, u_bar, rhs_base, D_old, L_old=None, u_n=None):
        cfg = self.config
        r = tau / cfg.eps
        i0, i1, i2 = exp_moments(r)
        cache = _StepCache(
            tau=tau, theta_tau=cfg.theta * tau, e_r=math.exp(-r),
            i0=i0, i1=i1, i2=i2, u_bar=u_bar, rhs_base=rhs_base, D_old=D_old,
        )
        if D_old is not None:
            p = self.pattern
            d_old_edge = D_old.data[p.edge_pos_ij]
            du_n = u_n[p.edge_j] - u_n[p.edge_i]
            cache.f_static = (self._mass_edge
                              + (1.0 - cfg.theta) * tau * d_old_edge) * du_n
            cache.dbar_edge = u_bar[p.edge_j] - u_bar[p.edge_i]
            u_min, u_max = fct_mod.local_bounds(u_bar, p)
            cache.q_plus = self.lumped * (u_max - u_bar)
            cache.q_minus = self.lumped * (u_min - u_bar)
            # Jacobi is worth probing when B is strongly diagonally dominant
            off = np.abs(L_old.data).copy()
            off[p.diag] = 0.0
            offsum = np.bincount(p.rows, weights=off, minlength=p.n)
            rho = cache.theta_tau * float((offsum / self.lumped).max())
            cache.jacobi_hint = rho < 0.35
        return cache

    # -- the two engine implementations -----------------------------------

    def _iter_numpy(self, cache: _StepCache, state: State, u_prev, c_prev, p_prev):
        """Reference implementation built from the public operations."""
        cfg = self.config
        u_n, c_n, p_n = state.u, state.c, state.p
        c_k = update_c(c_n, p_n, p_prev, cache.tau)
        p_k = update_p(u_n, u_prev, c_n, c_k, p_n, cfg.eps, cache.tau)
        A_k = self._assemble(u_prev, c_k, self._stiffness_variant())
        if cfg.scheme == "galerkin":
            B_data = self.mass.data + cache.theta_tau * A_k.data
            return c_k, p_k, B_data, cache.rhs_base
        D_k = artificial_diffusion(A_k)
        B_data = A_k.data + D_k.data
        B_data *= cache.theta_tau
        B_data[self.pattern.diag] += self.lumped
        if cfg.scheme == "fct" and cfg.limiter_override != "zero":
            fluxes = fct_mod.compute_fluxes(
                self.mass, D_k, cache.D_old, u_prev, u_n, cache.tau, cfg.theta
            )
            if cfg.prelimiting:
                fluxes = fct_mod.prelimit(fluxes, cache.u_bar)
            if cfg.limiter_override == "one":
                alpha = fct_mod.LimiterSet(
                    self.pattern, np.ones(self.pattern.n_edges)
                )
            else:
                alpha = fct_mod.zalesak(fluxes, cache.u_bar, self.lumped)
            rhs = cache.rhs_base + fct_mod.limited_increment(alpha, fluxes)
        else:
            rhs = cache.rhs_base
        return c_k, p_k, B_data, rhs

    def _iter_fast(self, cache: _StepCache, state: State, u_prev, c_prev, p_prev):
        """Fused numba path; numerically equivalent to _iter_numpy."""
        cfg = self.config
        p = self.pattern
        _kernels.kinetics_kernel(
            state.u, state.c, state.p, u_prev, p_prev,
            cache.tau, cache.e_r, cache.i0, cache.i1, cache.i2,
            self._c_k, self._p_k,
        )
        # BLAS part of the assembly: local 4x4 cell matrices
        np.take(u_prev, self._cells_flat, out=self._u4.reshape(-1))
        np.dot(self._u4, self._basis, out=self._uq)
        np.abs(self._uq, out=self._uq)
        np.subtract(1.0, self._uq, out=self._uq)
        np.dot(self._uq, self._Pm_s, out=self._local)
        if cfg.chi != 0.0:
            np.take(self._c_k, self._cells_flat, out=self._c4.reshape(-1))
            np.dot(self._c4, self._gradxy, out=self._cg)
            np.dot(self._cg, self._Pg_s, out=self._tmp16)
            self._local += self._tmp16
        if cfg.alpha_inv:
            self._local += self._lap_row
        is_fct = cfg.scheme == "fct" and cfg.limiter_override != "zero"
        limiter_mode = 1 if cfg.limiter_override == "one" else 0
        _kernels.system_kernel(
            self._local, self._scatter2d, p.diag, p.transpose, p.rows,
            p.edge_i, p.edge_j, p.edge_pos_ij, self._mass_edge,
            cache.f_static, cache.dbar_edge, cache.q_plus, cache.q_minus,
            self.lumped, cache.rhs_base, u_prev, cache.theta_tau,
            is_fct, cfg.prelimiting, limiter_mode,
            self._a_data, self._b_data, self._rowsum, self._p_plus,
            self._p_minus, self._r_plus, self._r_minus, self._f_edge,
            self._rhs,
        )
        return self._c_k, self._p_k, self._b_data, self._rhs

    # -- fixed-point loop --------------------------------------------------

    def _iterate(self, state, cache: _StepCache, tau_explicit, tau_implicit):
        cfg = self.config
        beta = cfg.damping
        fast = self.use_fast_path
        engine = self._iter_fast if fast else self._iter_numpy

        if fast:
            u_prev, c_prev, p_prev = self._u_prev, self._c_prev, self._p_prev
            np.copyto(u_prev, state.u)
            np.copyto(c_prev, state.c)
            np.copyto(p_prev, state.p)
        else:
            u_prev, c_prev, p_prev = state.u, state.c, state.p

        converged = False
        residual = 0.0
        du = dc = dp = math.nan
        u_k = state.u
        c_k = state.c
        p_k = state.p
        B_data = None

        pattern = self.pattern
        for k in range(1, cfg.max_iterations + 1):
            c_k, p_k, B_data, rhs = engine(cache, state, u_prev, c_prev, p_prev)
            solved = False
            if fast:
                ok, residual, norm_x, du, dc, dp = _kernels.solve_and_norms(
                    pattern.indptr, pattern.indices, B_data, pattern.diag,
                    rhs, u_prev, c_k, c_prev, p_k, p_prev,
                    LinearSolver.rtol,
                    LinearSolver.max_jacobi if cache.jacobi_hint else 0,
                    self._u_k, self._r_buf,
                )
                if ok:
                    # the residual contract implies finiteness; guard growth
                    if norm_x > 1e8:
                        raise StepFailure(
                            "solution blow-up in fixed-point iteration",
                            time=state.t,
                        )
                    u_k = self._u_k
                    solved = True
            if not solved:
                try:
                    u_k, residual = self.solver.solve(
                        B_data, rhs, x0=u_prev, jacobi=False
                    )
                except StepFailure as exc:
                    raise StepFailure(str(exc), time=state.t) from exc
                if not np.all(np.isfinite(u_k)) or np.abs(u_k).max() > 1e8:
                    raise StepFailure(
                        "solution blow-up in fixed-point iteration",
                        time=state.t,
                    )
                if fast:
                    du, dc, dp = _kernels.diff_norms(u_k, u_prev, c_k, c_prev,
                                                     p_k, p_prev)
                else:
                    du = float(np.linalg.norm(u_k - u_prev))
                    dc = float(np.linalg.norm(c_k - c_prev))
                    dp = float(np.linalg.norm(p_k - p_prev))
            if max(du, dc, dp) < cfg.tol:
                converged = True
                break
            # damped restart: the stored iterates move only a beta-fraction
            if fast:
                _kernels.damp_inplace(u_k, u_prev, c_k, c_prev, p_k, p_prev,
                                      beta)
            else:
                u_prev = beta * u_k + (1.0 - beta) * u_prev
                c_prev = beta * c_k + (1.0 - beta) * c_prev
                p_prev = beta * p_k + (1.0 - beta) * p_prev
        else:
            k = cfg.max_iterations
            if cfg.on_nonconvergence == "raise":
                raise StepFailure(
                    f"fixed-point iteration did not converge in {k} iterations "
                    f"(increments u={du:.3g} c={dc:.3g} p={dp:.3g})",
                    time=state.t,
                )

        if c_k is self._c_k:  # unalias the reusable buffers
            c_k = c_k.copy()
            p_k = p_k.copy()
        if u_k is self._u_k:
            u_k = u_k.copy()
        new_state = State(u_k, c_k, p_k, state.t + cache.tau)
        diag = self._diagnose(new_state, cache.tau, k, converged, du, dc, dp,
                              residual, B_data, tau_explicit, tau_implicit)
        return new_state, diag

    def _diagnose(self, new_state, tau, iterations, converged, du, dc, dp,
                  residual, B_data, tau_explicit, tau_implicit):
        cfg = self.config
        u, c, p = new_state.u, new_state.c, new_state.p
        if cfg.scheme == "galerkin":
            explicit_ok = implicit_apriori_ok = implicit_post_ok = mmatrix_ok = None
        else:
            explicit_ok = tau <= tau_explicit
            implicit_apriori_ok = tau < tau_implicit
            # a-posteriori second condition with the computed c^{n+1}
            grad_term = self._laplacian @ c
            lhs = cfg.theta * tau * (cfg.mu * self.lumped + cfg.chi * grad_term)
            implicit_post_ok = bool(np.all(lhs < self.lumped))
            diag_vals = B_data[self.pattern.diag]
            off = B_data.copy()
            off[self.pattern.diag] = 0.0
            rowsums = np.bincount(self.pattern.rows, weights=B_data,
                                  minlength=self.pattern.n)
            mmatrix_ok = bool(
                np.all(diag_vals > 0.0)
                and off.max(initial=0.0) <= 1e-14 * max(1.0, np.abs(B_data).max())
                and np.all(rowsums > 0.0)
            )
        return StepDiagnostics(
            t=new_state.t, tau=tau, iterations=iterations, converged=converged,
            du=du, dc=dc, dp=dp,
            u_min=float(u.min()), u_max=float(u.max()),
            c_min=float(c.min()), c_max=float(c.max()),
            p_min=float(p.min()), p_max=float(p.max()),
            residual=residual,
            explicit_ok=explicit_ok,
            implicit_apriori_ok=implicit_apriori_ok,
            implicit_aposteriori_ok=implicit_post_ok,
            m_matrix_ok=mmatrix_ok,
        )

    # -- full trajectory ---------------------------------------------------

    def run(self, state: State, snapshot_times=()) -> SimulationResult:
        """March the state to the configured final time.

        Snapshots are immutable copies taken the first time the trajectory
        reaches each requested time.  Step failures propagate with the
        failing time attached.
        """
        cfg = self.config
        result = SimulationResult(self.mesh, cfg, state, DiagnosticsLog())
        pending = sorted(snapshot_times)
        t_end = cfg.final_time
        eps_t = 1e-12 * max(1.0, t_end)

        def take_snapshots(s):
            while pending and s.t >= pending[0] - 1e-9 * max(1.0, t_end):
                result.snapshots.append((pending.pop(0), s.copy()))

        take_snapshots(state)
        while state.t < t_end - eps_t:
            state, diag = self.step(state)
            result.log.append(diag)
            take_snapshots(state)
        result.state = state
        return result


def fixed_point_step(state: State, config: SchemeConfig, mesh: Mesh):
    """Single time step; see :class:`Stepper` for the loop structure."""
    return Stepper(mesh, config).step(state)


def run_simulation(config: SchemeConfig, mesh: Mesh, initial,
                   snapshot_times=()) -> SimulationResult:
    """Run a full simulation from initial data.

    ``initial`` is either a ready State or a triple of scalar functions
    ``(u0, c0, p0)`` of position to be interpolated at the nodes.
    """
    if isinstance(initial, State):
        state = initial.copy()
    else:
        state = initialize(mesh, *initial)
    return Stepper(mesh, config).run(state, snapshot_times)
