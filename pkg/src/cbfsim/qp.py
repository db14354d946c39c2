"""Small dense quadratic programs.

Two solution routes are provided and kept deliberately independent so that
they can cross-check each other:

* ``solve_two_constraint_closed_form`` evaluates the exact closed-form
  solution available when there are exactly two inequality rows. The
  problem is transformed into a projection in the inner product weighted by
  the cost matrix; the 2x2 Gram system then has an explicit three-branch
  multiplier formula with a clamp ``w(r) = min(r, 0)``.
* ``solve_active_set`` is a primal/dual active-set iteration for the same
  problems plus any number of extra rows (input bounds, relaxed equality
  pairs). Problems here have 2-6 variables, so every working-set solve is a
  fresh dense KKT factorization.

Sign conventions: rows are ``a . z <= b``; reported multipliers are <= 0 and
satisfy stationarity ``H z + F = sum_i lambda_i a_i``.
"""

from __future__ import annotations

import warnings
import weakref
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

# Contract tolerances: primal feasibility / stationarity at 1e-8, dual
# feasibility / complementary slackness at 1e-6.
TOL_PRIMAL = 1e-8
TOL_STATIONARITY = 1e-8
TOL_DUAL = 1e-6

# Internal thresholds for the active-set iteration.
_EPS_ADD = 1e-10
_EPS_DROP = 1e-11
_EPS_DEP = 1e-9

COND_WARN = 1e12

# Controllers rebuild a QpProblem around the same (immutable) cost matrix at
# every control step; remember matrices that already passed validation so the
# symmetric/PD checks run once per matrix, not once per step.
_VALIDATED_H: "weakref.WeakValueDictionary[int, Array]" = weakref.WeakValueDictionary()


def _h_already_validated(H: Array) -> bool:
    return _VALIDATED_H.get(id(H)) is H


def _remember_validated(H: Array) -> None:
    if isinstance(H, np.ndarray) and not H.flags.writeable:
        try:
            _VALIDATED_H[id(H)] = H
        except TypeError:
            pass


@dataclass
class QpProblem:
    """minimize 0.5 z'Hz + F'z  subject to  a_i . z <= b_i for every row.

    H must be symmetric positive definite (checked by attempted Cholesky
    factorization at construction).
    """

    H: Array
    F: Array
    rows: list[tuple[Array, float]]

    def __post_init__(self):
        if not (isinstance(self.H, np.ndarray) and self.H.dtype == np.float64):
            self.H = np.asarray(self.H, dtype=float)
        if not (isinstance(self.F, np.ndarray) and self.F.dtype == np.float64
                and self.F.ndim == 1):
            self.F = np.atleast_1d(np.asarray(self.F, dtype=float))
        n = self.H.shape[0]
        if self.H.shape != (n, n):
            raise ValueError("H must be square")
        if self.F.shape != (n,):
            raise ValueError("F length must match H")
        if not _h_already_validated(self.H):
            scale = max(1.0, float(np.abs(self.H).max()))
            if float(np.abs(self.H - self.H.T).max()) > 1e-12 * scale:
                raise ValueError("H must be symmetric within 1e-12")
            try:
                np.linalg.cholesky(self.H)
            except np.linalg.LinAlgError as exc:
                raise ValueError("H must be positive definite") from exc
            _remember_validated(self.H)
        rows = []
        for a, b in self.rows:
            if not (isinstance(a, np.ndarray) and a.dtype == np.float64
                    and a.ndim == 1):
                a = np.atleast_1d(np.asarray(a, dtype=float))
            if a.shape != (n,):
                raise ValueError("row dimension must match H")
            rows.append((a, float(b)))
        self.rows = rows

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def row_matrix(self) -> tuple[Array, Array]:
        if not self.rows:
            n = self.dim
            return np.zeros((0, n)), np.zeros(0)
        A = np.vstack([a for a, _ in self.rows])
        b = np.array([b for _, b in self.rows])
        return A, b


@dataclass
class QpSolution:
    """Solver result: point, per-row multipliers (<= 0), active rows, status."""

    z: Array
    multipliers: Array
    active_set: tuple[int, ...]
    status: str  # "optimal" | "infeasible" | "degenerate"
    iterations: int = 0
    info: dict = field(default_factory=dict)


@dataclass
class GramData:
    """Transformed data for the two-row closed form.

    ``ybar`` holds H^{-1} y_i as columns, ``pbar`` the right-hand sides
    shifted by the unconstrained optimum ``ubar = -H^{-1} F``, and ``G`` the
    2x2 Gram matrix of the rows under the H-weighted inner product.
    """

    ubar: Array
    ybar: Array
    pbar: Array
    G: Array


def _solve_pd(H: Array, rhs: Array) -> Array:
    # H was validated positive definite; a dense solve is adequate at these
    # sizes and never forms the explicit inverse.
    return np.linalg.solve(H, rhs)


def _cond_check(H: Array) -> None:
    if _h_already_validated(H):
        return
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise ValueError("cost matrix factorization failed") from exc
    d = np.diag(L)
    cond_est = (d.max() / d.min()) ** 2  # cheap two-sided bound surrogate
    if cond_est >= COND_WARN:
        warnings.warn(
            f"cost matrix condition number ~{cond_est:.2e}; closed-form "
            "solution may be inaccurate",
            RuntimeWarning,
            stacklevel=3,
        )
    _remember_validated(H)


def assemble_h_inner_product(p: QpProblem) -> GramData:
    """Build the Gram data used by the two-row closed form."""
    if len(p.rows) != 2:
        raise ValueError("assemble_h_inner_product requires exactly 2 rows")
    H = p.H
    _cond_check(H)
    Y = np.column_stack([p.rows[0][0], p.rows[1][0]])
    b = np.array([p.rows[0][1], p.rows[1][1]])
    # Factor-backed solve for [-F | Y]; the inverse is never formed (the
    # 2x2 case is unrolled, these solves dominate the control-step cost).
    rhs = np.empty((p.dim, 3))
    rhs[:, 0] = -p.F
    rhs[:, 1:] = Y
    if p.dim == 2:
        a, c, d = H[0, 0], H[1, 0], H[1, 1]
        det = a * d - c * c
        sol = np.empty_like(rhs)
        sol[0] = (d * rhs[0] - c * rhs[1]) / det
        sol[1] = (a * rhs[1] - c * rhs[0]) / det
    else:
        sol = _solve_pd(H, rhs)
    ubar = sol[:, 0]
    ybar = sol[:, 1:]
    G = Y.T @ ybar
    G = 0.5 * (G + G.T)
    pbar = b - Y.T @ ubar
    return GramData(ubar=ubar, ybar=ybar, pbar=pbar, G=G)


def _clamp_neg(r: float) -> float:
    return r if r < 0.0 else 0.0


def closed_form_multipliers(G: Array, pbar: Array) -> tuple[Array, str]:
    """Three-branch multiplier formula for the 2x2 Gram system.

    Returns the multipliers (<= 0) and which branch fired; exposed
    separately so branch-boundary consistency can be probed directly.
    """
    det = G[0, 0] * G[1, 1] - G[0, 1] * G[1, 0]
    p1, p2 = float(pbar[0]), float(pbar[1])
    if G[1, 0] * _clamp_neg(p2) - G[1, 1] * p1 < 0.0:
        return np.array([0.0, _clamp_neg(p2) / G[1, 1]]), "first-inactive"
    if G[0, 1] * _clamp_neg(p1) - G[0, 0] * p2 < 0.0:
        return np.array([_clamp_neg(p1) / G[0, 0], 0.0]), "second-inactive"
    lam1 = _clamp_neg(G[1, 1] * p1 - G[1, 0] * p2) / det
    lam2 = _clamp_neg(G[0, 0] * p2 - G[0, 1] * p1) / det
    return np.array([lam1, lam2]), "both-active"


def solve_two_constraint_closed_form(p: QpProblem) -> QpSolution:
    """Exact solution of a 2-row problem via the weighted-projection form.

    Returns status "degenerate" when the two rows are linearly dependent
    under the H-inner product; callers fall back to the active-set route.
    """
    gd = assemble_h_inner_product(p)
    det = gd.G[0, 0] * gd.G[1, 1] - gd.G[0, 1] * gd.G[1, 0]
    tr = gd.G[0, 0] + gd.G[1, 1]
    if abs(det) <= 1e-12 * (tr * tr) / 4.0:
        return QpSolution(
            z=gd.ubar.copy(),
            multipliers=np.zeros(2),
            active_set=(),
            status="degenerate",
            info={"reason": "rows dependent under H-inner product", "detG": det},
        )
    lam, branch = closed_form_multipliers(gd.G, gd.pbar)
    z = gd.ubar + gd.ybar @ lam
    A, b = p.row_matrix()
    resid = A @ z - b
    active = tuple(
        i for i in range(2) if abs(resid[i]) <= TOL_PRIMAL * (1.0 + abs(b[i]))
    )
    return QpSolution(
        z=z,
        multipliers=lam,
        active_set=active,
        status="optimal",
        info={"branch": branch, "gram": gd, "residuals": resid},
    )


def _solve3(M: Array, r: Array) -> Array:
    """Unrolled 3x3 solve (adjugate); adequate for the well-conditioned
    KKT systems that dominate the per-step cost."""
    a, b_, c = M[0]
    d, e, f = M[1]
    g, h, i = M[2]
    co_a = e * i - f * h
    co_b = f * g - d * i
    co_c = d * h - e * g
    det = a * co_a + b_ * co_b + c * co_c
    if det == 0.0:
        raise np.linalg.LinAlgError("singular 3x3 system")
    x0 = (co_a * r[0] + (c * h - b_ * i) * r[1] + (b_ * f - c * e) * r[2]) / det
    x1 = (co_b * r[0] + (a * i - c * g) * r[1] + (c * d - a * f) * r[2]) / det
    x2 = (co_c * r[0] + (b_ * g - a * h) * r[1] + (a * e - b_ * d) * r[2]) / det
    return np.array([x0, x1, x2])


def _solve_dense_small(M: Array, r: Array) -> Array:
    """Gaussian elimination with partial pivoting, unrolled in Python.

    Beats the LAPACK call overhead for the 3x3/4x4 KKT systems that
    dominate the per-control-step cost.
    """
    n = M.shape[0]
    a = M.tolist()
    x = r.tolist()
    for col in range(n):
        piv = col
        best = abs(a[col][col])
        for row in range(col + 1, n):
            mag = abs(a[row][col])
            if mag > best:
                best = mag
                piv = row
        if best == 0.0:
            raise np.linalg.LinAlgError("singular small system")
        if piv != col:
            a[col], a[piv] = a[piv], a[col]
            x[col], x[piv] = x[piv], x[col]
        inv = 1.0 / a[col][col]
        for row in range(col + 1, n):
            factor = a[row][col] * inv
            if factor != 0.0:
                arow = a[row]
                acol = a[col]
                for k2 in range(col + 1, n):
                    arow[k2] -= factor * acol[k2]
                x[row] -= factor * x[col]
    for col in range(n - 1, -1, -1):
        acc = x[col]
        arow = a[col]
        for k2 in range(col + 1, n):
            acc -= arow[k2] * x[k2]
        x[col] = acc / arow[col]
    return np.array(x)


def _eqp(H: Array, F: Array, A: Array, b: Array, work: list[int],
         n: int) -> tuple[Array, Array]:
    """Equality-constrained solve on the working set (direct dense KKT)."""
    if not work:
        if n == 2:
            det = H[0, 0] * H[1, 1] - H[0, 1] * H[1, 0]
            z = np.array([
                (-H[1, 1] * F[0] + H[0, 1] * F[1]) / det,
                (-H[0, 0] * F[1] + H[1, 0] * F[0]) / det,
            ])
            return z, np.zeros(0)
        return _solve_pd(H, -F), np.zeros(0)
    AW = A[work]
    m = len(work)
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = H
    kkt[:n, n:] = AW.T
    kkt[n:, :n] = AW
    rhs = np.empty(n + m)
    rhs[:n] = -F
    rhs[n:] = b[work]
    if n + m == 3:
        sol = _solve3(kkt, rhs)
    elif n + m <= 5:
        sol = _solve_dense_small(kkt, rhs)
    else:
        sol = np.linalg.solve(kkt, rhs)
    return sol[:n], sol[n:]


def _kkt_residuals(H: Array, F: Array, A: Array, b: Array, z: Array,
                   lam: Array) -> dict:
    k = A.shape[0]
    stat = H @ z + F - (A.T @ lam if k else 0.0)
    primal = A @ z - b if k else np.zeros(0)
    comp = lam * primal if k else np.zeros(0)
    return {
        "stationarity": float(np.abs(stat).max()),
        "primal": float(primal.max()) if primal.size else 0.0,
        "dual": float(lam.max()) if lam.size else 0.0,
        "complementarity": float(np.abs(comp).max()) if comp.size else 0.0,
    }


def _direction(H: Array, A: Array, work: list[int], a_new: Array,
               n: int) -> tuple[Array, Array]:
    """Direction of (z, mu_work) as the incoming row's multiplier grows.

    Solves [H A_W'; A_W 0] [dz; dmu] = [-a_new; 0]; dz' H dz >= 0 with
    equality exactly when a_new is dependent on the working rows.
    """
    if not work:
        if n == 2:
            det = H[0, 0] * H[1, 1] - H[0, 1] * H[1, 0]
            dz = np.array([
                (-H[1, 1] * a_new[0] + H[0, 1] * a_new[1]) / det,
                (-H[0, 0] * a_new[1] + H[1, 0] * a_new[0]) / det,
            ])
            return dz, np.zeros(0)
        return np.linalg.solve(H, -a_new), np.zeros(0)
    AW = A[work]
    m = len(work)
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = H
    kkt[:n, n:] = AW.T
    kkt[n:, :n] = AW
    rhs = np.zeros(n + m)
    rhs[:n] = -a_new
    if n + m == 3:
        sol = _solve3(kkt, rhs)
    elif n + m <= 5:
        sol = _solve_dense_small(kkt, rhs)
    else:
        sol = np.linalg.solve(kkt, rhs)
    return sol[:n], sol[n:]


def solve_active_set(p: QpProblem, max_iter: int = 100) -> QpSolution:
    """Dual active-set iteration for small dense problems.

    Starts at the unconstrained optimum and repeatedly makes the most
    violated row feasible (ties: lowest row index), taking partial steps
    that keep the working-set multipliers non-negative and dropping the
    blocking row at each partial step (ties: lowest row index). The dual
    objective increases monotonically, so the iteration cannot cycle; the
    cap is a defensive limit. Infeasible row sets are detected with a
    certificate row combination (non-negative weights whose combined row
    is unsatisfiable).
    """
    n = p.dim
    A, b = p.row_matrix()
    k = len(p.rows)
    add_eps = _EPS_ADD * (1.0 + np.abs(b))
    work: list[int] = []
    mu_w: list[float] = []
    z, _ = _eqp(p.H, p.F, A, b, work, n)
    iterations = 0
    took_partial_step = False

    def _finish(status: str, extra: dict | None = None) -> QpSolution:
        lam = np.zeros(k)
        for pos, idx in enumerate(work):
            lam[idx] = -mu_w[pos]
        info = _kkt_residuals(p.H, p.F, A, b, z, lam)
        if extra:
            info.update(extra)
        if status == "optimal":
            scale = 1.0 + float(np.max(np.abs(z)))
            ok = (
                info["stationarity"] <= TOL_STATIONARITY * scale * 10
                and info["primal"] <= TOL_PRIMAL * scale
                and info["dual"] <= TOL_DUAL
                and info["complementarity"] <= TOL_DUAL * scale
            )
            if not ok:
                status = "degenerate"
                info["reason"] = "KKT residual check failed"
        return QpSolution(
            z=z,
            multipliers=lam,
            active_set=tuple(sorted(work)),
            status=status,
            iterations=iterations,
            info=info,
        )

    if k == 0:
        return _finish("optimal")

    while iterations < max_iter:
        iterations += 1

        viol = A @ z - b
        cand = -1
        best = 0.0
        for i in range(k):
            v = viol[i]
            if v > add_eps[i] and (cand < 0 or v > best):
                if i not in work:
                    cand = i  # first occurrence of the max = lowest index
                    best = v
        if cand < 0:
            if took_partial_step:
                # Full steps land exactly on working-set optima; partial
                # (blocking) steps accumulate roundoff, so re-solve once.
                z_p, mu_p = _eqp(p.H, p.F, A, b, work, n)
                if not work or mu_p.min() >= -_EPS_DROP:
                    z = z_p
                    mu_w = list(mu_p)
            return _finish("optimal")

        a_new = A[cand]
        mu_new = 0.0
        while iterations < max_iter:
            iterations += 1
            dz, dmu = _direction(p.H, A, work, a_new, n)
            curvature = -float(a_new @ dz)  # = dz' H dz >= 0

            # Dual blocking step: first working multiplier to hit zero.
            t_dual = np.inf
            block = -1
            for pos in range(len(work)):
                if dmu[pos] < -_EPS_DROP:
                    t = -mu_w[pos] / dmu[pos]
                    if t < t_dual - 1e-15 or (
                        abs(t - t_dual) <= 1e-15 and work[pos] < work[block]
                    ):
                        t_dual = t
                        block = pos
            # Primal step: incoming row becomes tight.
            r0 = float(a_new @ z - b[cand])
            t_primal = r0 / curvature if curvature > _EPS_DEP else np.inf

            if not np.isfinite(min(t_dual, t_primal)):
                # No curvature and nothing blocks: the row cannot be
                # satisfied. Stationarity gives a_new + sum(dmu_j a_j) = 0
                # with every dmu_j >= 0, a non-negative row combination
                # that certifies infeasibility.
                cert = {int(work[pos]): float(max(dmu[pos], 0.0))
                        for pos in range(len(work))}
                cert[int(cand)] = 1.0
                return _finish(
                    "infeasible",
                    {"certificate": cert, "violated_row": int(cand)},
                )

            if t_dual < t_primal:
                took_partial_step = True
                z = z + t_dual * dz
                for pos in range(len(work)):
                    mu_w[pos] += t_dual * dmu[pos]
                mu_new += t_dual
                work.pop(block)
                mu_w.pop(block)
                continue
            z = z + t_primal * dz
            for pos in range(len(work)):
                mu_w[pos] += t_primal * dmu[pos]
            mu_w.append(mu_new + t_primal)
            work.append(cand)
            break

    return _finish(
        "degenerate",
        {"reason": f"iteration cap {max_iter} exceeded", "working_set": list(work)},
    )
