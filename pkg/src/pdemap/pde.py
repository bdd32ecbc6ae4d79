"""Finite-difference forward solvers and adjoint misfit gradients.

Two elliptic boundary-value problems on the unit interval/square:

* conductivity form  div(f grad u) = g  with  u = 0 on the boundary,
  discretized in flux form with arithmetic-mean face coefficients,
* potential form  (1/2) Lap u - f u = 0  with  u = g on the boundary.

Both discrete systems are symmetric positive definite (for f >= f_min > 0
resp. f >= 0) and are solved by diagonally preconditioned conjugate
gradients to 1e-12 relative residual.  A data-misfit gradient with respect
to the nodal coefficient is assembled from one forward and one adjoint
solve; the adjoint sources are point masses spread onto the surrounding
nodes with the multilinear interpolation weights divided by h^d, which
makes the adjoint exactly the transpose of point evaluation and the
returned gradient the Riesz representative of the misfit differential in
the trapezoid L^2 inner product.

Solvers are pure functions of their inputs; no shared mutable caches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fnspace import Grid, GridFunction, trapezoid_weights

__all__ = [
    "DarcyProblem",
    "SchrodingerProblem",
    "SolverError",
    "solve_darcy",
    "solve_schrodinger",
    "point_eval",
    "point_eval_many",
    "interp_weights",
    "misfit_gradient",
]

CG_RTOL = 1e-12
CG_ITER_FACTOR = 20
RESIDUAL_TOL = 1e-10
MAX_2D_NODES = 127


class SolverError(RuntimeError):
    """Linear solver failed to converge; carries iteration diagnostics."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class DarcyProblem:
    """Fixed data for the conductivity problem: source g and bound f_min."""

    grid: Grid
    g: GridFunction
    f_min: float = 0.5

    def __post_init__(self):
        if self.g.grid != self.grid:
            raise ValueError("source grid does not match problem grid")
        if not np.all(np.isfinite(self.g.values)):
            raise ValueError("source must be finite at all nodes")
        if self.f_min <= 0.0:
            raise ValueError(f"f_min must be positive, got {self.f_min}")
        _check_2d_limit(self.grid)


@dataclass(frozen=True)
class SchrodingerProblem:
    """Fixed data for the potential problem: boundary trace from g."""

    grid: Grid
    g: GridFunction

    def __post_init__(self):
        if self.g.grid != self.grid:
            raise ValueError("boundary data grid does not match problem grid")
        if np.any(self.g.boundary_values < 0.0):
            raise ValueError("boundary values must be nonnegative")
        _check_2d_limit(self.grid)


def _check_2d_limit(grid: Grid):
    if grid.dim == 2 and grid.n > MAX_2D_NODES:
        raise ValueError(f"2D grids limited to n <= {MAX_2D_NODES} per axis")


def _cg_spd(A, b, diag):
    """Diagonally preconditioned CG with a hard iteration cap."""
    if not np.any(b):
        return np.zeros_like(b)
    maxiter = CG_ITER_FACTOR * b.size
    M = sp.diags(1.0 / diag)
    iters = [0]

    def _count(_):
        iters[0] += 1

    x, info = spla.cg(A, b, rtol=CG_RTOL, atol=0.0, maxiter=maxiter, M=M, callback=_count)
    bnorm = np.linalg.norm(b)
    res = np.linalg.norm(A @ x - b) / bnorm
    if info != 0 or res > RESIDUAL_TOL:
        raise SolverError(
            f"conjugate gradients did not reach relative residual "
            f"{RESIDUAL_TOL:g} within {maxiter} iterations "
            f"(info={info}, iterations={iters[0]}, residual={res:.3e})",
            iterations=iters[0],
            residual=res,
        )
    return x


def _darcy_system(grid: Grid, f: np.ndarray):
    """SPD matrix M with M u_int = -g_int encoding div(f grad u) = g."""
    n, h = grid.n, grid.h
    ih2 = 1.0 / (h * h)
    if grid.dim == 1:
        fa = 0.5 * (f[:-1] + f[1:])  # faces 0..n
        main = (fa[:-1] + fa[1:]) * ih2
        off = -fa[1:-1] * ih2
        A = sp.diags([off, main, off], [-1, 0, 1], format="csr")
        return A, main
    # 2D, row-major interior indexing (i outer, j inner)
    fe = 0.5 * (f[1:-1, 1:-1] + f[2:, 1:-1])   # face to (i+1, j)
    fw = 0.5 * (f[1:-1, 1:-1] + f[:-2, 1:-1])
    fn = 0.5 * (f[1:-1, 1:-1] + f[1:-1, 2:])   # face to (i, j+1)
    fs = 0.5 * (f[1:-1, 1:-1] + f[1:-1, :-2])
    main = ((fe + fw + fn + fs) * ih2).ravel()
    east = (-fe[:-1, :] * ih2).ravel()          # couples row k to k+n
    north = (-fn[:, :-1] * ih2)                 # couples row k to k+1
    north = np.concatenate([north, np.zeros((n, 1))], axis=1).ravel()[:-1]
    A = sp.diags([east, north, main, north, east], [-n, -1, 0, 1, n], format="csr")
    return A, main


def solve_darcy(prob: DarcyProblem, f: GridFunction) -> GridFunction:
    """Solve div(f grad u) = g with zero boundary values.

    Requires f >= f_min at every node.  The flux-form discretization is
    second-order accurate for smooth coefficients.
    """
    if f.grid != prob.grid:
        raise ValueError("coefficient grid does not match problem grid")
    if np.any(f.values < prob.f_min):
        raise ValueError(f"coefficient falls below f_min = {prob.f_min}")
    A, diag = _darcy_system(prob.grid, f.values)
    b = -prob.g.interior.ravel()
    u_int = _cg_spd(A, b, diag)
    u = np.zeros(prob.grid.shape)
    if prob.grid.dim == 1:
        u[1:-1] = u_int
    else:
        u[1:-1, 1:-1] = u_int.reshape(prob.grid.n, prob.grid.n)
    return GridFunction(prob.grid, u)


def _schrodinger_system(grid: Grid, f: np.ndarray, g: np.ndarray):
    """SPD matrix M and rhs b with M u_int = b encoding (1/2)Lap u = f u."""
    n, h = grid.n, grid.h
    c = 0.5 / (h * h)
    if grid.dim == 1:
        main = 2.0 * c + f[1:-1]
        off = np.full(n - 1, -c)
        A = sp.diags([off, main, off], [-1, 0, 1], format="csr")
        b = np.zeros(n)
        b[0] += c * g[0]
        b[-1] += c * g[-1]
        return A, main, b
    fint = f[1:-1, 1:-1]
    main = (4.0 * c + fint).ravel()
    east = np.full(n * (n - 1), -c)
    north = np.tile(np.concatenate([np.full(n - 1, -c), [0.0]]), n)[:-1]
    A = sp.diags([east, north, main, north, east], [-n, -1, 0, 1, n], format="csr")
    b = np.zeros((n, n))
    b[0, :] += c * g[0, 1:-1]
    b[-1, :] += c * g[-1, 1:-1]
    b[:, 0] += c * g[1:-1, 0]
    b[:, -1] += c * g[1:-1, -1]
    return A, main, b.ravel()


def solve_schrodinger(prob: SchrodingerProblem, f: GridFunction) -> GridFunction:
    """Solve (1/2)Lap u - f u = 0 with u = g on the boundary; needs f >= 0."""
    if f.grid != prob.grid:
        raise ValueError("coefficient grid does not match problem grid")
    if np.any(f.values < 0.0):
        raise ValueError("potential must be nonnegative")
    A, diag, b = _schrodinger_system(prob.grid, f.values, prob.g.values)
    u_int = _cg_spd(A, b, diag)
    u = np.array(prob.g.values)
    if prob.grid.dim == 1:
        u[1:-1] = u_int
    else:
        u[1:-1, 1:-1] = u_int.reshape(prob.grid.n, prob.grid.n)
    return GridFunction(prob.grid, u)


def interp_weights(grid: Grid, points: np.ndarray):
    """Multilinear interpolation stencil for points in the closed domain.

    Returns (idx, wts): integer node indices of shape (N, 2^d) into the
    flattened nodal array and matching weights summing to one per point.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != grid.dim:
        raise ValueError(f"points must have {grid.dim} coordinates")
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        raise ValueError("point outside the closed unit domain")
    m = grid.n + 2
    u = pts * (grid.n + 1)
    i0 = np.minimum(u.astype(int), grid.n)  # cell lower corner per axis
    t = u - i0
    if grid.dim == 1:
        idx = np.stack([i0[:, 0], i0[:, 0] + 1], axis=1)
        wts = np.stack([1.0 - t[:, 0], t[:, 0]], axis=1)
        return idx, wts
    ix, iy = i0[:, 0], i0[:, 1]
    tx, ty = t[:, 0], t[:, 1]
    idx = np.stack(
        [ix * m + iy, ix * m + iy + 1, (ix + 1) * m + iy, (ix + 1) * m + iy + 1],
        axis=1,
    )
    wts = np.stack(
        [(1 - tx) * (1 - ty), (1 - tx) * ty, tx * (1 - ty), tx * ty], axis=1
    )
    return idx, wts


def point_eval_many(u: GridFunction, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of nodal values at many points."""
    idx, wts = interp_weights(u.grid, points)
    return (u.values.ravel()[idx] * wts).sum(axis=1)


def point_eval(u: GridFunction, x) -> float:
    """Multilinear interpolation at a single point of the closed domain."""
    return float(point_eval_many(u, np.atleast_2d(np.asarray(x, dtype=float)))[0])


def _interior_index_map(grid: Grid) -> np.ndarray:
    """Flat node index -> interior system row, -1 for boundary nodes."""
    m = grid.n + 2
    out = -np.ones(grid.n_nodes, dtype=int)
    if grid.dim == 1:
        out[1:-1] = np.arange(grid.n)
    else:
        rows = np.arange(grid.n * grid.n).reshape(grid.n, grid.n)
        full = -np.ones((m, m), dtype=int)
        full[1:-1, 1:-1] = rows
        out = full.ravel()
    return out


def misfit_gradient(kind: str, prob, f: GridFunction, dataset, u: GridFunction | None = None) -> GridFunction:
    """Adjoint-state gradient of the data misfit with respect to nodal f.

    The misfit is J(f) = 1/(2 sigma^2 N) sum_i (u_f(X_i) - Y_i)^2 with
    u_f(X_i) evaluated by multilinear interpolation.  One forward and one
    adjoint solve; the kernel is -(grad u . grad w) in flux form for the
    conductivity problem and -(u w) nodally for the potential problem.
    The result is an L^2 density: its trapezoid inner product with any
    nodal direction equals the exact directional derivative of J.

    ``u`` may supply the already-computed forward solution for this f.
    """
    grid = prob.grid
    if kind == "darcy":
        if u is None:
            u = solve_darcy(prob, f)
    elif kind == "schrodinger":
        if u is None:
            u = solve_schrodinger(prob, f)
    else:
        raise ValueError(f"unknown problem kind: {kind!r}")
    pts = np.atleast_2d(np.asarray(dataset.points, dtype=float))
    y = np.asarray(dataset.responses, dtype=float)
    if pts.shape[0] == 0:
        raise ValueError("dataset is empty")
    sigma = float(dataset.sigma) if float(dataset.sigma) > 0.0 else 1.0
    resid = point_eval_many(u, pts) - y
    scale = 1.0 / (sigma**2 * pts.shape[0])

    # adjoint point sources spread with interpolation weights (boundary
    # rows dropped: boundary values are fixed by the boundary condition)
    idx, wts = interp_weights(grid, pts)
    source = np.zeros(grid.n_nodes)
    np.add.at(source, idx.ravel(), (wts * (scale * resid)[:, None]).ravel())
    imap = _interior_index_map(grid)
    n_int = grid.n ** grid.dim
    b = np.zeros(n_int)
    sel = imap >= 0
    b[imap[sel]] = source[sel]

    if kind == "darcy":
        A, diag = _darcy_system(grid, f.values)
    else:
        A, diag, _ = _schrodinger_system(grid, f.values, prob.g.values)
    w_int = _cg_spd(A, b, diag)

    adj = np.zeros(grid.shape)
    if grid.dim == 1:
        adj[1:-1] = w_int
    else:
        adj[1:-1, 1:-1] = w_int.reshape(grid.n, grid.n)

    h = grid.h
    raw = np.zeros(grid.shape)
    if kind == "darcy":
        uv = u.values
        if grid.dim == 1:
            q = np.diff(uv) * np.diff(adj) / (h * h)
            raw[:-1] -= 0.5 * q
            raw[1:] -= 0.5 * q
        else:
            qx = np.diff(uv, axis=0) * np.diff(adj, axis=0) / (h * h)
            raw[:-1, :] -= 0.5 * qx
            raw[1:, :] -= 0.5 * qx
            qy = np.diff(uv, axis=1) * np.diff(adj, axis=1) / (h * h)
            raw[:, :-1] -= 0.5 * qy
            raw[:, 1:] -= 0.5 * qy
    else:
        # the potential multiplies u only at interior nodes
        if grid.dim == 1:
            raw[1:-1] = -u.values[1:-1] * adj[1:-1]
        else:
            raw[1:-1, 1:-1] = -u.values[1:-1, 1:-1] * adj[1:-1, 1:-1]

    density = raw / trapezoid_weights(grid)
    return GridFunction(grid, density)
