"""Statistical layer: forward map, data generator, truth synthesis, loss.

The forward map composes the link function with a PDE solve,
G(theta) = solve(Psi o theta).  Observations follow the random-design
regression model

    Y_i = G(theta_o)(X_i) + sigma * eps_i,   X_i ~ Uniform(0,1)^d,

with standard normal noise independent of the design.  The module also
provides the penalized loss

    d_r^2(theta_1, theta_2) = ||G(theta_1) - G(theta_2)||_{L^2}^2
                              + r^2 ||theta_1||_{H^alpha}^2

and empirical probes of the regularity conditions the estimator theory
rests on (Lipschitz ratios in weighted norms, uniform boundedness, the
inverse continuity modulus, and the Sobolev interpolation inequality).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import pde
from .fnspace import (
    Grid,
    GridFunction,
    SpectralField,
    eigenvalues,
    grid_function,
    l2_distance,
    sobolev_norm,
    sup_distance,
    synthesize,
)
from .link import LinkFunction, link_apply
from .rng import substream

__all__ = [
    "ForwardProblem",
    "Dataset",
    "GroundTruth",
    "make_darcy",
    "make_schrodinger",
    "forward",
    "stability_exponent",
    "generate_dataset",
    "synthesize_truth",
    "random_field",
    "d_r2",
    "c1_seminorm",
    "RatioProbe",
    "ModulusProbe",
    "InterpolationProbe",
    "probe_l2_lipschitz",
    "probe_uniform_bound",
    "probe_sup_lipschitz",
    "probe_inverse_modulus",
    "probe_interpolation",
    "dataset_to_csv",
    "dataset_from_csv",
    "DARCY_SMOOTHING",
    "SCHRODINGER_SMOOTHING",
    "SCHRODINGER_F_MIN",
]

# smoothing order (ill-posedness degree) of each forward map
DARCY_SMOOTHING = 1.0
SCHRODINGER_SMOOTHING = 2.0

# The potential problem needs f >= 0 only; a strictly positive floor keeps
# the same link formalism usable, recorded as a modeling choice.
SCHRODINGER_F_MIN = 0.05


@dataclass(frozen=True)
class ForwardProblem:
    """A PDE kind, its fixed data, and the link function, on one grid."""

    kind: str
    problem: object
    link: LinkFunction
    grid: Grid

    def __post_init__(self):
        if self.kind not in ("darcy", "schrodinger"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.problem.grid != self.grid:
            raise ValueError("problem grid does not match")

    @property
    def kappa(self) -> float:
        return DARCY_SMOOTHING if self.kind == "darcy" else SCHRODINGER_SMOOTHING


def stability_exponent(kind: str, alpha: float) -> float:
    """Modulus exponent tau: (alpha-1)/(alpha+1) resp. alpha/(alpha+2)."""
    if kind == "darcy":
        return (alpha - 1.0) / (alpha + 1.0)
    return alpha / (alpha + 2.0)


def make_darcy(
    grid: Grid,
    f_min: float = 0.5,
    link_b: float = 1.0,
    source_amplitude: float = 10.0,
) -> ForwardProblem:
    """Conductivity forward problem with the default smooth sign-definite source."""
    if grid.dim == 1:
        g = grid_function(grid, lambda x: source_amplitude * np.sin(np.pi * x))
    else:
        g = grid_function(
            grid, lambda x, y: source_amplitude * np.sin(np.pi * x) * np.sin(np.pi * y)
        )
    problem = pde.DarcyProblem(grid, g, f_min)
    return ForwardProblem("darcy", problem, LinkFunction(f_min, link_b), grid)


def make_schrodinger(
    grid: Grid,
    boundary_value: float = 1.0,
    link_b: float = 1.0,
    f_min: float = SCHRODINGER_F_MIN,
) -> ForwardProblem:
    """Potential forward problem with constant positive boundary data."""
    g = GridFunction(grid, np.full(grid.shape, boundary_value))
    problem = pde.SchrodingerProblem(grid, g)
    return ForwardProblem("schrodinger", problem, LinkFunction(f_min, link_b), grid)


@dataclass(frozen=True)
class Dataset:
    """Design points, noisy responses, the noise level, and the seed used."""

    points: np.ndarray
    responses: np.ndarray
    sigma: float
    seed: int = 0

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        resp = np.asarray(self.responses, dtype=float)
        if pts.shape[0] != resp.size:
            raise ValueError("points and responses must have equal length")
        if pts.size and (np.any(pts <= 0.0) or np.any(pts >= 1.0)):
            raise ValueError("design points must be strictly interior")
        if self.sigma < 0.0:
            raise ValueError("sigma must be nonnegative")
        pts.flags.writeable = False
        resp = np.array(resp)
        resp.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "responses", resp)

    @property
    def size(self) -> int:
        return self.responses.size


@dataclass(frozen=True)
class GroundTruth:
    """A synthesized parameter, its coefficient field, and its norm budget."""

    theta: SpectralField
    f: GridFunction
    alpha: float
    norm_bound: float


def forward(fp: ForwardProblem, theta: SpectralField) -> GridFunction:
    """Solution of the PDE with coefficient Psi(theta); deterministic."""
    if theta.grid != fp.grid:
        raise ValueError("parameter grid does not match the forward problem")
    f = link_apply(fp.link, synthesize(theta))
    if fp.kind == "darcy":
        return pde.solve_darcy(fp.problem, f)
    return pde.solve_schrodinger(fp.problem, f)


def generate_dataset(
    fp: ForwardProblem, truth: GroundTruth, N: int, sigma: float, seed: int
) -> Dataset:
    """Draw N uniform design points and noisy point evaluations of the truth."""
    if N < 1:
        raise ValueError("need at least one observation")
    if sigma < 0.0:
        raise ValueError("sigma must be nonnegative")
    u = forward(fp, truth.theta)
    rng = substream(seed, "dataset")
    pts = rng.uniform(size=(N, fp.grid.dim))
    noiseless = pde.point_eval_many(u, pts)
    resp = noiseless + sigma * rng.standard_normal(N)
    return Dataset(points=pts, responses=resp, sigma=sigma, seed=seed)


def _decayed_coeffs(grid: Grid, alpha: float, K: int, rng) -> np.ndarray:
    """Coefficients with H^alpha-summable decay and random signs/amplitudes."""
    lam = eigenvalues(grid, K)
    decay = (1.0 + lam) ** (-(alpha + 0.5 + 0.01) / 2.0)
    return rng.standard_normal(lam.shape) * decay


def random_field(
    grid: Grid, alpha: float, K: int, rng, radius: float
) -> SpectralField:
    """Random spectral field rescaled to H^alpha norm exactly ``radius``."""
    c = _decayed_coeffs(grid, alpha, K, rng)
    sf = SpectralField(grid, c)
    norm = sobolev_norm(sf, alpha)
    if radius == 0.0 or norm == 0.0:
        return SpectralField(grid, np.zeros_like(c))
    return SpectralField(grid, c * (radius / norm))


def synthesize_truth(
    grid: Grid,
    alpha: float,
    K: int,
    seed: int,
    radius: float,
    link: LinkFunction = LinkFunction(),
) -> GroundTruth:
    """Ground truth with sign-randomized decaying coefficients.

    Coefficients c_k = radius * s_k * (1 + lambda_k)^{-(alpha+0.51)/2} with
    random signs s_k, rescaled so the H^alpha norm equals ``radius``.
    """
    if alpha <= grid.dim / 2.0:
        raise ValueError("need alpha > d/2 for a continuous truth")
    if K > grid.n:
        raise ValueError("K must not exceed the interior node count")
    rng = substream(seed, "truth")
    lam = eigenvalues(grid, K)
    signs = rng.choice([-1.0, 1.0], size=lam.shape)
    c = radius * signs * (1.0 + lam) ** (-(alpha + 0.5 + 0.01) / 2.0)
    sf = SpectralField(grid, c)
    norm = sobolev_norm(sf, alpha)
    if radius > 0.0 and norm > 0.0:
        sf = SpectralField(grid, c * (radius / norm))
    theta_norm = sobolev_norm(sf, alpha)
    f = link_apply(link, synthesize(sf))
    return GroundTruth(theta=sf, f=f, alpha=alpha, norm_bound=theta_norm)


def d_r2(
    fp: ForwardProblem,
    theta1: SpectralField,
    theta2: SpectralField,
    r: float,
    alpha: float,
) -> float:
    """Squared prediction distance plus r^2-weighted penalty of theta1."""
    pred = l2_distance(forward(fp, theta1), forward(fp, theta2))
    return pred**2 + r**2 * sobolev_norm(theta1, alpha) ** 2


def c1_seminorm(gf: GridFunction) -> float:
    """Nodal C^1 norm surrogate: sup |v| plus sup of centered differences."""
    v = gf.values
    h = gf.grid.h
    total = float(np.max(np.abs(v)))
    if gf.grid.dim == 1:
        total += float(np.max(np.abs((v[2:] - v[:-2]) / (2 * h))))
    else:
        dx = np.abs((v[2:, :] - v[:-2, :]) / (2 * h))
        dy = np.abs((v[:, 2:] - v[:, :-2]) / (2 * h))
        total += float(max(np.max(dx), np.max(dy)))
    return total


# ---------------------------------------------------------------------------
# empirical probes of the regularity conditions


@dataclass(frozen=True)
class RatioProbe:
    """Pairwise ratio table for a Lipschitz-type bound."""

    name: str
    distances: np.ndarray
    ratios: np.ndarray

    @property
    def max_ratio(self) -> float:
        return float(np.max(self.ratios))

    def closest_decile_max(self) -> float:
        """Max ratio among the 10% of pairs with the smallest distance."""
        order = np.argsort(self.distances)
        k = max(1, len(order) // 10)
        return float(np.max(self.ratios[order[:k]]))


@dataclass(frozen=True)
class ModulusProbe:
    """Log-log relation between parameter distance and prediction distance."""

    deltas: np.ndarray
    errors: np.ndarray
    slope: float
    tau: float


@dataclass(frozen=True)
class InterpolationProbe:
    betas: tuple
    max_constant: float


def _probe_pairs(grid, alpha, K, rng, radius, n_pairs):
    """Pairs in an H^alpha ball with distances spanning several decades."""
    scales = np.logspace(-4, 0, n_pairs)
    for i in range(n_pairs):
        t1 = random_field(grid, alpha, K, rng, radius * rng.uniform(0.2, 1.0))
        bump = random_field(grid, alpha, K, rng, radius)
        c2 = t1.coeffs + scales[i] * bump.coeffs
        t2 = SpectralField(grid, c2)
        norm2 = sobolev_norm(t2, alpha)
        if norm2 > radius:
            t2 = SpectralField(grid, c2 * (radius / norm2))
        yield t1, t2


def probe_l2_lipschitz(
    fp: ForwardProblem,
    alpha: float,
    n_pairs: int = 200,
    seed: int = 0,
    radius: float = 1.0,
    growth: float = 4.0,
) -> RatioProbe:
    """Ratio of prediction distance to the weighted dual-norm bound.

    The bound is (1 + max ||theta||_{H^alpha}^growth) * ||theta1 -
    theta2||_{(H^kappa)*}, with the dual norm realized spectrally at order
    -kappa.  Finite ratios over a ball support the L^2 regularity of the
    forward map.
    """
    rng = substream(seed, "probe-l2")
    K = min(24, fp.grid.n)
    kappa = fp.kappa
    dist, ratio = [], []
    for t1, t2 in _probe_pairs(fp.grid, alpha, K, rng, radius, n_pairs):
        diff = SpectralField(fp.grid, t1.coeffs - t2.coeffs)
        dual = sobolev_norm(diff, -kappa)
        if dual < 1e-14:
            continue
        pred = l2_distance(forward(fp, t1), forward(fp, t2))
        m = max(sobolev_norm(t1, alpha), sobolev_norm(t2, alpha))
        ratio.append(pred / ((1.0 + m**growth) * dual))
        dist.append(dual)
    return RatioProbe("l2_lipschitz", np.asarray(dist), np.asarray(ratio))


def probe_uniform_bound(
    fp: ForwardProblem,
    alpha: float,
    n_samples: int = 200,
    seed: int = 0,
    radius: float = 1.0,
) -> float:
    """Fitted constant sup |G(theta)| / ||g||_inf over random parameters."""
    rng = substream(seed, "probe-bound")
    K = min(24, fp.grid.n)
    zero = GridFunction(fp.grid, np.zeros(fp.grid.shape))
    g_sup = sup_distance(fp.problem.g, zero)
    worst = 0.0
    for _ in range(n_samples):
        t = random_field(fp.grid, alpha, K, rng, radius * rng.uniform(0.0, 1.0))
        worst = max(worst, sup_distance(forward(fp, t), zero))
    return worst / g_sup


def probe_sup_lipschitz(
    fp: ForwardProblem,
    alpha: float,
    n_pairs: int = 200,
    seed: int = 0,
    radius: float = 1.0,
    growth: float = 4.0,
) -> RatioProbe:
    """Sup-norm ratio with C^1 norms from nodal values and centered differences."""
    rng = substream(seed, "probe-sup")
    K = min(24, fp.grid.n)
    dist, ratio = [], []
    for t1, t2 in _probe_pairs(fp.grid, alpha, K, rng, radius, n_pairs):
        g1, g2 = synthesize(t1), synthesize(t2)
        diff_c1 = c1_seminorm(GridFunction(fp.grid, g1.values - g2.values))
        if diff_c1 < 1e-14:
            continue
        sup = sup_distance(forward(fp, t1), forward(fp, t2))
        m = max(c1_seminorm(g1), c1_seminorm(g2))
        ratio.append(sup / ((1.0 + m**growth) * diff_c1))
        dist.append(diff_c1)
    return RatioProbe("sup_lipschitz", np.asarray(dist), np.asarray(ratio))


def probe_inverse_modulus(
    fp: ForwardProblem,
    alpha: float,
    n_base: int = 8,
    n_scales: int = 8,
    seed: int = 0,
    radius: float = 1.0,
) -> ModulusProbe:
    """Slope of log ||f1 - f2||_{L^2} against log prediction distance.

    Stability of the inversion requires ||f1 - f2|| <= C * delta^tau for
    pairs with prediction distance delta; the fitted log-log slope should
    not fall below tau.
    """
    rng = substream(seed, "probe-modulus")
    K = min(24, fp.grid.n)
    deltas, errors = [], []
    for _ in range(n_base):
        t1 = random_field(fp.grid, alpha, K, rng, radius * rng.uniform(0.3, 0.9))
        direction = random_field(fp.grid, alpha, K, rng, radius)
        for s in np.logspace(-3, -0.5, n_scales):
            t2 = SpectralField(fp.grid, t1.coeffs + s * direction.coeffs)
            delta = l2_distance(forward(fp, t1), forward(fp, t2))
            f1 = link_apply(fp.link, synthesize(t1))
            f2 = link_apply(fp.link, synthesize(t2))
            err = l2_distance(f1, f2)
            if delta > 1e-13 and err > 1e-13:
                deltas.append(delta)
                errors.append(err)
    deltas = np.asarray(deltas)
    errors = np.asarray(errors)
    slope = float(np.polyfit(np.log(deltas), np.log(errors), 1)[0])
    return ModulusProbe(deltas, errors, slope, stability_exponent(fp.kind, alpha))


def probe_interpolation(
    grid: Grid,
    alpha: float,
    n_fields: int = 100,
    seed: int = 0,
    betas: tuple = (1.0, 2.0),
) -> InterpolationProbe:
    """Fitted constant of the Sobolev interpolation inequality.

    ||u||_{H^beta} <= C ||u||_{L^2}^{(alpha+1-beta)/(alpha+1)}
                        ||u||_{H^{alpha+1}}^{beta/(alpha+1)};
    in the spectral norms this is an exact Hoelder bound, so C = 1 up to
    round-off.
    """
    rng = substream(seed, "probe-interp")
    K = min(32, grid.n)
    worst = 0.0
    for _ in range(n_fields):
        t = random_field(grid, alpha, K, rng, rng.uniform(0.1, 2.0))
        n0 = sobolev_norm(t, 0.0)
        ntop = sobolev_norm(t, alpha + 1.0)
        for beta in betas:
            nb = sobolev_norm(t, beta)
            w1 = (alpha + 1.0 - beta) / (alpha + 1.0)
            w2 = beta / (alpha + 1.0)
            worst = max(worst, nb / (n0**w1 * ntop**w2))
    return InterpolationProbe(tuple(betas), worst)


# ---------------------------------------------------------------------------
# serialization


def dataset_to_csv(ds: Dataset, csv_path, meta_path=None, kind: str = ""):
    """CSV with header (x [, y], response) plus a JSON sidecar."""
    dim = ds.points.shape[1]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "response"] if dim == 1 else ["x", "y", "response"])
        for p, r in zip(ds.points, ds.responses):
            w.writerow([f"{c:.17g}" for c in p] + [f"{r:.17g}"])
    if meta_path is not None:
        with open(meta_path, "w") as fh:
            json.dump(
                {"sigma": ds.sigma, "seed": ds.seed, "kind": kind, "n_obs": ds.size},
                fh,
                indent=2,
            )


def dataset_from_csv(csv_path, meta_path) -> Dataset:
    with open(meta_path) as fh:
        meta = json.load(fh)
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    pts = np.array([[float(c) for c in r[:-1]] for r in rows])
    resp = np.array([float(r[-1]) for r in rows])
    return Dataset(points=pts, responses=resp, sigma=meta["sigma"], seed=meta["seed"])
