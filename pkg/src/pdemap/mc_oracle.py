"""Path-integral Monte Carlo point-value oracle for the forward solvers.

Independent verification of the deterministic solvers through stochastic
representations of the solutions:

* potential problem:  u(x) = E_x[ g(X_tau) exp(-int_0^tau f(X_s) ds) ]
  with X a standard Brownian motion (generator (1/2) Lap) absorbed at the
  boundary,
* conductivity problem:  u(x) = -E_x[ int_0^tau g(X_s) ds ] where X is the
  diffusion dX = grad f(X) dt + sqrt(2 f(X)) dW (generator div(f grad .)).
  The sign/scale convention is fixed by calibration: with f = 1, g = 2 the
  estimate reproduces the solver value u(1/2) = -1/4.

Paths are Euler-Maruyama with increments sqrt(dt) * normal per axis,
absorbed at the first boundary crossing with linear interpolation of the
crossing point; the known O(sqrt(dt)) exit bias is absorbed into explicit
bias budgets wherever estimates are compared against solver values.

Normals come from a Philox substream of the seed.  In 1D the engine
simulates several starting points against a shared (path, step)-indexed
increment table, generated blockwise only for paths still alive somewhere
(estimates at different points share randomness; each point's paths stay
i.i.d., so its standard error is unaffected).  The per-path inner loop is
JIT-compiled when numba is importable; set PDEMAP_NO_NUMBA=1 to force the
pure-numpy column-wise consumer (same scheme, same increments).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .fnspace import GridFunction
from .pde import point_eval_many
from .rng import substream

__all__ = [
    "McConfig",
    "McEstimate",
    "OracleError",
    "fk_schrodinger",
    "fk_darcy",
    "fk_schrodinger_many",
    "fk_darcy_many",
]

try:  # pragma: no cover - exercised through the env toggle
    if os.environ.get("PDEMAP_NO_NUMBA"):
        raise ImportError("numba disabled via PDEMAP_NO_NUMBA")
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

_BLOCK_BUDGET = 1 << 24  # elements of the per-block increment table
_MAX_BLOCK_STEPS = 2048  # bounds the normals wasted by paths exiting mid-block


class OracleError(RuntimeError):
    """Monte Carlo estimate unavailable (e.g. every path censored)."""


@dataclass(frozen=True)
class McConfig:
    """Path count, step size, seed, and the per-path step cap.

    ``dt <= h^2`` is recommended for grid-resolved coefficients, and the
    horizon should satisfy ``max_steps * dt >= 10`` (documented, not
    enforced).  ``max_steps=None`` chooses exactly that horizon.
    """

    n_paths: int = 10_000
    dt: float = 1e-4
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.max_steps is None:
            object.__setattr__(self, "max_steps", int(math.ceil(10.0 / self.dt)))
        elif self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


@dataclass(frozen=True)
class McEstimate:
    """Sample mean, its standard error, and exit/censor counts."""

    mean: float
    std_error: float
    n_exited: int
    n_censored: int


def _estimate(payoffs: np.ndarray, n_censored: int) -> McEstimate:
    n = payoffs.size
    if n_censored >= n:
        raise OracleError("all paths censored before exiting the domain")
    se = float(np.std(payoffs, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return McEstimate(
        mean=float(np.mean(payoffs)),
        std_error=se,
        n_exited=n - n_censored,
        n_censored=n_censored,
    )


# ---------------------------------------------------------------------------
# 1D consumers: per-path loop over one block of shared increments.
# ``rows[j]`` is the row of path j in the increment table ``xi`` (already
# scaled by sqrt(dt)).  Exited paths record their payoff and step index.


def _consume_schrodinger_1d(xi, sqdt, rows, x, a, exit_step, payoff, f, inv_h, dt, g0, g1):
    nmax = f.size - 2
    B = xi.shape[1]
    for j in range(rows.size):
        xj = x[j]
        aj = a[j]
        r = rows[j]
        for s in range(B):
            u = xj * inv_h
            i = int(u)
            if i > nmax:
                i = nmax
            fv = f[i] + (u - i) * (f[i + 1] - f[i])
            xn = xj + sqdt * xi[r, s]
            if xn <= 0.0 or xn >= 1.0:
                left = xn <= 0.0
                bound = 0.0 if left else 1.0
                tf = (bound - xj) / (xn - xj)
                aj += tf * dt * fv
                payoff[j] = (g0 if left else g1) * np.exp(-aj)
                exit_step[j] = s
                break
            aj += dt * fv
            xj = xn
        x[j] = xj
        a[j] = aj


def _consume_darcy_1d(xi, sqdt, rows, x, a, exit_step, payoff, f, df, g, inv_h, dt):
    nmax = f.size - 2
    B = xi.shape[1]
    for j in range(rows.size):
        xj = x[j]
        aj = a[j]
        r = rows[j]
        for s in range(B):
            u = xj * inv_h
            i = int(u)
            if i > nmax:
                i = nmax
            fr = u - i
            fv = f[i] + fr * (f[i + 1] - f[i])
            dfv = df[i] + fr * (df[i + 1] - df[i])
            gv = g[i] + fr * (g[i + 1] - g[i])
            xn = xj + dfv * dt + np.sqrt(2.0 * fv) * sqdt * xi[r, s]
            if xn <= 0.0 or xn >= 1.0:
                bound = 0.0 if xn <= 0.0 else 1.0
                tf = (bound - xj) / (xn - xj)
                aj += tf * dt * gv
                payoff[j] = -aj
                exit_step[j] = s
                break
            aj += dt * gv
            xj = xn
        x[j] = xj
        a[j] = aj


if _HAVE_NUMBA:
    _consume_schrodinger_1d = _njit(cache=True)(_consume_schrodinger_1d)
    _consume_darcy_1d = _njit(cache=True)(_consume_darcy_1d)
else:

    def _columns_consumer(step_fn):
        """Vectorized column-by-column replacement for the jitted loops."""

        def run(xi, sqdt, rows, x, a, exit_step, payoff, *args):
            act = np.arange(rows.size)
            for s in range(xi.shape[1]):
                if act.size == 0:
                    return
                act = step_fn(xi, sqdt, rows, x, a, exit_step, payoff, act, s, *args)

        return run

    def _sch_step(xi, sqdt, rows, x, a, exit_step, payoff, act, s, f, inv_h, dt, g0, g1):
        u = x[act] * inv_h
        i = np.minimum(u.astype(int), f.size - 2)
        fv = f[i] + (u - i) * (f[i + 1] - f[i])
        xn = x[act] + sqdt * xi[rows[act], s].astype(float)
        crossed = (xn <= 0.0) | (xn >= 1.0)
        ci = act[crossed]
        if ci.size:
            left = xn[crossed] <= 0.0
            bound = np.where(left, 0.0, 1.0)
            tf = (bound - x[ci]) / (xn[crossed] - x[ci])
            a[ci] += tf * dt * fv[crossed]
            payoff[ci] = np.where(left, g0, g1) * np.exp(-a[ci])
            exit_step[ci] = s
        si = act[~crossed]
        a[si] += dt * fv[~crossed]
        x[si] = xn[~crossed]
        return si

    def _darcy_step(xi, sqdt, rows, x, a, exit_step, payoff, act, s, f, df, g, inv_h, dt):
        u = x[act] * inv_h
        i = np.minimum(u.astype(int), f.size - 2)
        fr = u - i
        fv = f[i] + fr * (f[i + 1] - f[i])
        dfv = df[i] + fr * (df[i + 1] - df[i])
        gv = g[i] + fr * (g[i + 1] - g[i])
        xn = x[act] + dfv * dt + np.sqrt(2.0 * fv) * sqdt * xi[rows[act], s].astype(float)
        crossed = (xn <= 0.0) | (xn >= 1.0)
        ci = act[crossed]
        if ci.size:
            bound = np.where(xn[crossed] <= 0.0, 0.0, 1.0)
            tf = (bound - x[ci]) / (xn[crossed] - x[ci])
            a[ci] += tf * dt * gv[crossed]
            payoff[ci] = -a[ci]
            exit_step[ci] = s
        si = act[~crossed]
        a[si] += dt * gv[~crossed]
        x[si] = xn[~crossed]
        return si

    _consume_schrodinger_1d = _columns_consumer(_sch_step)
    _consume_darcy_1d = _columns_consumer(_darcy_step)


def _centered_gradient_1d(f: np.ndarray, h: float) -> np.ndarray:
    df = np.empty_like(f)
    df[1:-1] = (f[2:] - f[:-2]) / (2.0 * h)
    df[0] = (f[1] - f[0]) / h
    df[-1] = (f[-1] - f[-2]) / h
    return df


def _run_1d(kind, consumer_args_fn, starts, cfg: McConfig, stream_tag):
    """Shared-increment multi-start engine on the unit interval."""
    m = len(starts)
    n = cfg.n_paths
    rng = substream(cfg.seed, "fk", stream_tag)
    sqdt = float(np.sqrt(cfg.dt))
    X = [np.full(n, s, dtype=float) for s in starts]
    A = [np.zeros(n) for _ in range(m)]
    payoff = [np.zeros(n) for _ in range(m)]
    alive = [np.ones(n, dtype=bool) for _ in range(m)]
    buf = np.empty(min(_BLOCK_BUDGET, n * cfg.max_steps), dtype=np.float32)
    steps_done = 0
    while steps_done < cfg.max_steps:
        union = alive[0].copy()
        for c in range(1, m):
            union |= alive[c]
        drive_idx = np.nonzero(union)[0]
        if drive_idx.size == 0:
            break
        B = max(
            1,
            min(_BLOCK_BUDGET // drive_idx.size, _MAX_BLOCK_STEPS, cfg.max_steps - steps_done),
        )
        flat = buf[: drive_idx.size * B]
        rng.standard_normal(out=flat, dtype=np.float32)
        xi = flat.reshape(drive_idx.size, B)
        for c in range(m):
            ap = np.nonzero(alive[c])[0]
            if ap.size == 0:
                continue
            rows = np.searchsorted(drive_idx, ap)
            x_loc = X[c][ap]
            a_loc = A[c][ap]
            exit_step = np.full(ap.size, -1, dtype=np.int64)
            pay_loc = np.zeros(ap.size)
            _consume = consumer_args_fn(xi, sqdt, rows, x_loc, a_loc, exit_step, pay_loc)
            _consume()
            X[c][ap] = x_loc
            A[c][ap] = a_loc
            exited = exit_step >= 0
            idx = ap[exited]
            payoff[c][idx] = pay_loc[exited]
            alive[c][idx] = False
        steps_done += B
    results = []
    for c in range(m):
        n_censored = int(alive[c].sum())
        results.append((payoff[c], A[c], alive[c], n_censored))
    return results


def _points_1d(points):
    xs = [float(np.atleast_1d(np.asarray(p, dtype=float)).ravel()[0]) for p in points]
    for x in xs:
        if not 0.0 < x < 1.0:
            raise ValueError(f"start point must be interior, got {x}")
    return xs


def fk_schrodinger_many(
    f: GridFunction, g_boundary: GridFunction, points, cfg: McConfig
) -> list[McEstimate]:
    """Estimates of the potential-problem solution at several points.

    All points are driven by one shared (path, step) increment table, so a
    batch costs one generation pass; estimates at different points share
    randomness but each is an i.i.d. sample mean with a valid standard
    error.
    """
    grid = f.grid
    if grid.dim != 1:
        return [fk_schrodinger(f, g_boundary, p, cfg) for p in points]
    if np.any(f.values < 0.0):
        raise ValueError("potential must be nonnegative")
    xs = _points_1d(points)
    fv = np.asarray(f.values, dtype=float)
    g0 = float(g_boundary.values[0])
    g1 = float(g_boundary.values[-1])
    inv_h = float(grid.n + 1)

    def args_fn(xi, sqdt, rows, x, a, exit_step, pay):
        return lambda: _consume_schrodinger_1d(
            xi, sqdt, rows, x, a, exit_step, pay, fv, inv_h, cfg.dt, g0, g1
        )

    out = []
    for pay, _, alive, n_cens in _run_1d("schrodinger", args_fn, xs, cfg, "schrodinger"):
        pay = np.where(alive, 0.0, pay)  # censored paths contribute nothing
        out.append(_estimate(pay, n_cens))
    return out


def fk_darcy_many(
    f: GridFunction, g: GridFunction, points, cfg: McConfig
) -> list[McEstimate]:
    """Estimates of the conductivity-problem solution at several points."""
    grid = f.grid
    if grid.dim != 1:
        return [fk_darcy(f, g, p, cfg) for p in points]
    if np.any(f.values <= 0.0):
        raise ValueError("coefficient must be strictly positive")
    xs = _points_1d(points)
    fv = np.asarray(f.values, dtype=float)
    gv = np.asarray(g.values, dtype=float)
    df = _centered_gradient_1d(fv, grid.h)
    inv_h = float(grid.n + 1)

    def args_fn(xi, sqdt, rows, x, a, exit_step, pay):
        return lambda: _consume_darcy_1d(
            xi, sqdt, rows, x, a, exit_step, pay, fv, df, gv, inv_h, cfg.dt
        )

    out = []
    for pay, acc, alive, n_cens in _run_1d("darcy", args_fn, xs, cfg, "darcy"):
        pay = np.where(alive, -acc, pay)  # censored carry their partial integral
        out.append(_estimate(pay, n_cens))
    return out


def fk_schrodinger(
    f: GridFunction, g_boundary: GridFunction, x, cfg: McConfig
) -> McEstimate:
    """Single-point estimate for the potential problem."""
    if f.grid.dim == 1:
        return fk_schrodinger_many(f, g_boundary, [x], cfg)[0]
    return _fk_2d("schrodinger", f, g_boundary, x, cfg)


def fk_darcy(f: GridFunction, g: GridFunction, x, cfg: McConfig) -> McEstimate:
    """Single-point estimate for the conductivity problem."""
    if f.grid.dim == 1:
        return fk_darcy_many(f, g, [x], cfg)[0]
    return _fk_2d("darcy", f, g, x, cfg)


def _fk_2d(kind, f: GridFunction, g: GridFunction, x, cfg: McConfig) -> McEstimate:
    """Step-vectorized 2D fallback (no increment sharing)."""
    grid = f.grid
    pt = np.asarray(x, dtype=float).ravel()
    if pt.size != 2 or not np.all((pt > 0.0) & (pt < 1.0)):
        raise ValueError("start point must be strictly interior")
    if kind == "schrodinger" and np.any(f.values < 0.0):
        raise ValueError("potential must be nonnegative")
    if kind == "darcy" and np.any(f.values <= 0.0):
        raise ValueError("coefficient must be strictly positive")
    h = grid.h
    if kind == "darcy":
        fx = np.empty(grid.shape)
        fy = np.empty(grid.shape)
        v = f.values
        fx[1:-1, :] = (v[2:, :] - v[:-2, :]) / (2 * h)
        fx[0, :] = (v[1, :] - v[0, :]) / h
        fx[-1, :] = (v[-1, :] - v[-2, :]) / h
        fy[:, 1:-1] = (v[:, 2:] - v[:, :-2]) / (2 * h)
        fy[:, 0] = (v[:, 1] - v[:, 0]) / h
        fy[:, -1] = (v[:, -1] - v[:, -2]) / h
        gx = GridFunction(grid, fx)
        gy = GridFunction(grid, fy)

    rng = substream(cfg.seed, "fk", kind, "2d")
    n = cfg.n_paths
    sqdt = np.sqrt(cfg.dt)
    X = np.tile(pt, (n, 1))
    A = np.zeros(n)
    payoff = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    for _ in range(cfg.max_steps):
        ai = np.nonzero(alive)[0]
        if ai.size == 0:
            break
        pts = X[ai]
        xi = sqdt * rng.standard_normal((ai.size, 2))
        if kind == "darcy":
            fv = point_eval_many(f, pts)
            drift = np.stack([point_eval_many(gx, pts), point_eval_many(gy, pts)], axis=1)
            integ = point_eval_many(g, pts)
            Xn = pts + drift * cfg.dt + np.sqrt(2.0 * fv)[:, None] * xi
        else:
            integ = point_eval_many(f, pts)
            Xn = pts + xi
        lo = np.minimum(Xn[:, 0], Xn[:, 1])
        hi = np.maximum(Xn[:, 0], Xn[:, 1])
        crossed = (lo <= 0.0) | (hi >= 1.0)
        ci = ai[crossed]
        if ci.size:
            delta = Xn[crossed] - pts[crossed]
            # first axis-crossing fraction along the straight segment
            tf = np.ones(ci.size)
            for ax in range(2):
                d = delta[:, ax]
                p0 = pts[crossed][:, ax]
                with np.errstate(divide="ignore", invalid="ignore"):
                    t_lo = np.where(d < 0, (0.0 - p0) / d, np.inf)
                    t_hi = np.where(d > 0, (1.0 - p0) / d, np.inf)
                tf = np.minimum(tf, np.minimum(t_lo, t_hi))
            xc = np.clip(pts[crossed] + tf[:, None] * delta, 0.0, 1.0)
            if kind == "schrodinger":
                a_exit = A[ci] + tf * cfg.dt * integ[crossed]
                payoff[ci] = point_eval_many(g, xc) * np.exp(-a_exit)
            else:
                payoff[ci] = -(A[ci] + tf * cfg.dt * integ[crossed])
            alive[ci] = False
        si = ~crossed
        A[ai[si]] += cfg.dt * integ[si]
        X[ai[si]] = Xn[si]
    n_censored = int(alive.sum())
    if kind == "darcy":
        payoff = np.where(alive, -A, payoff)
    else:
        payoff = np.where(alive, 0.0, payoff)
    return _estimate(payoff, n_censored)
