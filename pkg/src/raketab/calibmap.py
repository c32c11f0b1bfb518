"""
calibration maps between race distributions measured on different
populations.

The map is the column-stochastic matrix nearest the identity in Frobenius
norm that carries a source distribution onto a target distribution. Since
the objective is squared distance from the identity, the solution is the
Euclidean projection of the identity onto the feasible polytope. The
primary scheme is Dykstra's alternating projections between the affine
constraint set (column sums and the transport equation) and the
nonnegative orthant; when the solution sits on a badly conditioned face
(e.g. source shares near zero) that iteration can stall, so a
finite-termination fallback projects exactly by reducing to least-distance
programming and solving the resulting nonnegative least squares with the
classic active-set method. The problem is tiny (n*n variables with n = 6),
so no external solver is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CalibrationSolveError(RuntimeError):
    """The projection iteration failed to reach the requested residual."""


@dataclass(frozen=True)
class CalibrationMap:
    """Column-stochastic matrix mapping `source` onto `target`.

    Every column sums to 1, all entries are nonnegative, and
    matrix @ source == target to solver tolerance. `objective` is the
    Frobenius distance of the matrix from the identity.
    """

    matrix: np.ndarray
    source: np.ndarray
    target: np.ndarray
    objective: float

    def __post_init__(self):
        self.matrix.flags.writeable = False


def _check_probability(name, vec, tol=1e-6):
    v = np.asarray(vec, dtype=np.float64)
    if v.ndim != 1 or len(v) < 2:
        raise ValueError(f"{name} must be a vector of length >= 2")
    if np.any(v < 0):
        raise ValueError(f"{name} has negative entries")
    if abs(v.sum() - 1.0) > tol:
        raise ValueError(f"{name} sums to {v.sum()!r}, expected 1")
    return v


def _affine_system(u, v):
    """Stack the column-sum and transport constraints as M @ vec(A) = b."""
    n = len(u)
    m = np.zeros((2 * n, n * n))
    for j in range(n):  # column j sums to 1
        m[j, j::n] = 1.0
    for i in range(n):  # row i of A @ u = v
        m[n + i, i * n : (i + 1) * n] = u
    b = np.concatenate([np.ones(n), v])
    return m, b


def _kkt_residual(x, z, m, b):
    """First-order optimality residual for min ||x - z||^2 on {Mx=b, x>=0}.

    Multipliers for the equality constraints are fit by least squares on
    the components away from the nonnegativity bound; the residual is the
    worst of stationarity on free components, sign violations of the bound
    multipliers, and primal feasibility. The free/active split is tried at
    several thresholds and the best certificate wins, since near-degenerate
    solutions can park entries a hair above zero.
    """
    g = x - z
    feasibility = float(np.abs(m @ x - b).max())
    best = np.inf
    for free_tol in (1e-10, 1e-8, 1e-6):
        free = x > free_tol
        if not np.any(free):
            best = min(best, feasibility)
            continue
        lam, *_ = np.linalg.lstsq(m[:, free].T, -g[free], rcond=None)
        mu = g + m.T @ lam
        stationarity = float(np.abs(mu[free]).max())
        bound_sign = float(max(0.0, -(mu[~free].min())) if np.any(~free) else 0.0)
        best = min(best, max(stationarity, bound_sign, feasibility))
    return best


def _nnls(a, f, max_iterations=500):
    """Nonnegative least squares min ||a @ u - f|| with u >= 0.

    The classic active-set iteration: admit the variable with the most
    positive gradient, solve the unconstrained subproblem on the admitted
    set, and when the subproblem turns a variable negative, step back to
    the last feasible point on the segment and drop the variables that hit
    zero. Terminates finitely; the caps are safety nets.
    """
    n = a.shape[1]
    passive = np.zeros(n, dtype=bool)
    u = np.zeros(n)
    for _ in range(max_iterations):
        grad = a.T @ (f - a @ u)
        grad[passive] = -np.inf
        best = int(np.argmax(grad))
        if grad[best] <= 1e-12:
            return u
        passive[best] = True
        for _ in range(max_iterations):
            sub = np.zeros(n)
            sub[passive], *_ = np.linalg.lstsq(a[:, passive], f, rcond=None)
            # tolerate roundoff-scale negatives, or ill-conditioned faces cycle
            if sub[passive].min() >= -1e-12:
                u = np.maximum(sub, 0.0)
                break
            bad = passive & (sub <= 0)
            denom = u[bad] - sub[bad]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(denom > 0, u[bad] / denom, 0.0)
            alpha = float(ratios.min())
            u = u + alpha * (sub - u)
            u[~passive] = 0.0
            passive &= u > 1e-14
            if not np.any(passive):
                u = np.zeros(n)
                break
        else:
            raise CalibrationSolveError("nonnegative least squares failed to settle")
    raise CalibrationSolveError("nonnegative least squares failed to settle")


def _project_exact(z, m, b):
    """Exact projection of z onto {x : M x = b, x >= 0}.

    The equalities are eliminated with an orthonormal basis of ker(M),
    which turns the projection into a least-distance problem over the
    basis coordinates; that in turn reduces to a single nonnegative least
    squares solve (Lawson-Hanson reduction). Returns the point and the
    bound multipliers, which certify optimality.
    """
    x0, *_ = np.linalg.lstsq(m, b, rcond=None)
    _, svals, vt = np.linalg.svd(m, full_matrices=True)
    rank = int(np.sum(svals > svals.max() * 1e-12))
    basis = vt[rank:].T  # (n_vars, k) orthonormal columns spanning ker(M)
    w = basis.T @ (z - x0)
    # shift to s = t - w: min ||s|| subject to basis @ s >= -(x0 + basis @ w)
    h = -(x0 + basis @ w)
    e = np.vstack([basis.T, h])  # (k + 1, n_vars)
    f = np.zeros(e.shape[0])
    f[-1] = 1.0
    u = _nnls(e, f)
    r = e @ u - f
    if abs(r[-1]) < 1e-12:
        raise CalibrationSolveError("least-distance reduction is degenerate")
    s = -r[:-1] / r[-1]
    x = x0 + basis @ (w + s)
    # the scaled nonnegative solve solution is exactly the multiplier
    # vector of the bound constraints
    mu = u / -r[-1]
    return np.maximum(x, 0.0), mu


def _kkt_residual_with_multipliers(x, z, m, b, mu):
    """Optimality residual when the bound multipliers are known exactly.

    Fits the equality multipliers by unrestricted least squares (no
    complementarity guessing needed) and reports the worst of stationarity,
    complementarity slack, and feasibility.
    """
    g = x - z
    lam, *_ = np.linalg.lstsq(m.T, mu - g, rcond=None)
    stationarity = float(np.abs(g + m.T @ lam - mu).max())
    complementarity = float(np.abs(mu * x).max())
    feasibility = float(np.abs(m @ x - b).max())
    return max(stationarity, complementarity, feasibility)


def solve_calibration_map(
    u_source,
    u_target,
    kkt_tol: float = 1e-6,
    feas_tol: float = 1e-9,
    max_iterations: int = 100_000,
) -> CalibrationMap:
    """Find the column-stochastic matrix nearest the identity mapping
    `u_source` to `u_target`.

    Both inputs must be probability vectors of equal length (nonnegative,
    summing to 1 within 1e-6). The rank-one matrix with every column equal
    to `u_target` is always feasible, so a solution exists; the returned
    objective never exceeds that benchmark.

    Dykstra's alternating projections of the identity onto the
    intersection of the affine constraints and the nonnegative orthant run
    until the first-order optimality residual drops below `kkt_tol` and
    affine feasibility below `feas_tol`; if the iteration stalls (the rate
    degrades on badly conditioned faces), the exact least-distance
    projection takes over and the same optimality checks are applied.

    Source shares below 1e-5 of the largest share are snapped to exact
    zero (and the source renormalized): such columns constrain the map
    only at measurement-noise scale, and keeping them makes the problem
    numerically ill posed. Exactly-zero shares are handled exactly.
    """
    u = _check_probability("u_source", u_source)
    v = _check_probability("u_target", u_target)
    if len(u) != len(v):
        raise ValueError("source and target lengths differ")
    u = np.where(u < 1e-5 * u.max(), 0.0, u)
    u = u / u.sum()
    n = len(u)

    m, b = _affine_system(u, v)
    # projection onto {Mx = b}: x - M^T (M M^T)^+ (M x - b); the Gram matrix
    # is rank deficient by one (total mass is counted by both families)
    gram_pinv = np.linalg.pinv(m @ m.T)

    def proj_affine(x):
        return x - m.T @ (gram_pinv @ (m @ x - b))

    # aim well below the contract gates first; accept contract level only
    # when the face geometry is too degenerate for better
    strict_feas = min(feas_tol, 1e-11)
    strict_kkt = min(kkt_tol, 1e-8)

    def residuals(x):
        return float(np.abs(m @ x - b).max()), _kkt_residual(x, z, m, b)

    z = np.eye(n).ravel()
    x = z.copy()
    p = np.zeros_like(z)
    q = np.zeros_like(z)
    check_every = 10
    budget = min(5_000, max_iterations)  # past this, the exact path is cheaper
    done = False
    for it in range(1, budget + 1):
        y = proj_affine(x + p)
        p = x + p - y
        x_new = np.maximum(y + q, 0.0)
        q = y + q - x_new
        x = x_new
        if it % check_every == 0 or it == budget:
            # feasibility is cheap; only then pay for the optimality check
            if float(np.abs(m @ x - b).max()) <= strict_feas:
                if _kkt_residual(x, z, m, b) <= strict_kkt:
                    done = True
                    break
    if not done:
        candidates = [(x, residuals(x))]
        try:
            exact, mu = _project_exact(z, m, b)
            kkt_exact = _kkt_residual_with_multipliers(exact, z, m, b, mu)
            candidates.append((exact, (float(np.abs(m @ exact - b).max()), kkt_exact)))
        except CalibrationSolveError:
            pass
        x, (feas, kkt) = min(candidates, key=lambda c: max(*c[1]))
        if feas > feas_tol or kkt > kkt_tol:
            raise CalibrationSolveError(
                f"projection stalled: feasibility {feas:.3e}, KKT residual {kkt:.3e}"
            )

    a = x.reshape(n, n)
    # clamp projection residue and make column sums exactly one
    a[(a < 0) & (a > -1e-12)] = 0.0
    a = a / a.sum(axis=0, keepdims=True)
    objective = float(np.linalg.norm(a - np.eye(n)))

    benchmark = float(np.linalg.norm(np.outer(v, np.ones(n)) - np.eye(n)))
    if objective > benchmark + 1e-6:
        raise CalibrationSolveError(
            f"objective {objective:.6g} exceeds the rank-one benchmark {benchmark:.6g}"
        )
    return CalibrationMap(matrix=a, source=u, target=v, objective=objective)


def apply_calibration_map(cmap: CalibrationMap, p) -> np.ndarray:
    """Transform a probability vector through the calibration map.

    The output is again a probability vector: column sums of 1 preserve
    total mass and nonnegativity preserves signs.
    """
    vec = _check_probability("p", p)
    if len(vec) != len(cmap.source):
        raise ValueError("vector length does not match the map")
    return cmap.matrix @ vec
