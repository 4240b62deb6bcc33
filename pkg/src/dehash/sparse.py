"""Solvers for coefficient recovery over difference dictionaries.

Two routes from a residual sub-vector back to word counts:

* :func:`solve_nn_lasso` - non-negative L1-regularized least squares,
  minimizing ``||v - D h||_2^2 + lam * ||h||_1`` over ``h >= 0``.  Note the
  quadratic term carries no 1/2 factor, so the per-coordinate threshold is
  ``lam / 2`` for a unit-norm column; regularization weights are calibrated
  to this convention.  The default method follows the exact piecewise-linear
  solution path in ``lam`` (homotopy); vocabulary dictionaries are far too
  coherent for plain coordinate descent, which stalls swapping mass between
  near-parallel columns at small ``lam``.  ``method="cd"`` selects cyclic
  coordinate descent with zero-clipped soft-thresholding for reference.
* :func:`solve_tikhonov` - closed-form L2-regularized solve against a prior,
  evaluated through a (dim x dim) system rather than the (T x T) normal
  equations, so cost scales with the feature dimension and not the
  vocabulary width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LASSO_TOL = 1e-6
LASSO_MAX_ITER = 1000


@dataclass(frozen=True)
class Dictionary:
    """Per-center difference dictionary: column t = leaf_center_t - vlad_center."""

    columns: np.ndarray  # (dim, T) float64
    column_ids: np.ndarray  # (T,) int64, leaf ids aligned with columns
    vlad_id: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "columns", np.asarray(self.columns, dtype=np.float64))
        object.__setattr__(self, "column_ids", np.asarray(self.column_ids, dtype=np.int64))
        if self.columns.ndim != 2:
            raise ValueError("columns must be a (dim, T) matrix")
        if self.columns.shape[1] != self.column_ids.shape[0]:
            raise ValueError("one id per column required")
        if np.unique(self.column_ids).size != self.column_ids.size:
            raise ValueError("duplicate column ids")

    @property
    def width(self) -> int:
        return self.columns.shape[1]

    @property
    def dim(self) -> int:
        return self.columns.shape[0]

    def zero_column_mask(self) -> np.ndarray:
        """Columns whose leaf coincides with the coarse center (unrecoverable)."""
        return ~np.any(self.columns != 0.0, axis=0)


@dataclass
class LassoResult:
    coeffs: np.ndarray  # (T,) non-negative
    converged: bool
    sweeps: int
    objective: float


def lasso_objective(dictionary: Dictionary, v: np.ndarray, lam: float, h: np.ndarray) -> float:
    r = v - dictionary.columns @ h
    return float(r @ r + lam * np.sum(h))


def _validate_lasso_inputs(dictionary: Dictionary, v: np.ndarray, lam: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (dictionary.dim,):
        raise ValueError(f"v must have shape ({dictionary.dim},)")
    if not np.all(np.isfinite(v)) or not np.all(np.isfinite(dictionary.columns)):
        raise ValueError("inputs must be finite")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return v


def _segment_solution(gram, corr, active):
    """Per-segment path coefficients: h_A(lam) = a - lam * b on the active set."""
    g = gram[np.ix_(active, active)]
    rhs = np.column_stack([corr[active], np.full(len(active), 0.5)])
    try:
        sol = np.linalg.solve(g, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(g, rhs, rcond=None)
    return sol[:, 0], sol[:, 1]


def _homotopy_nn_lasso(
    dictionary: Dictionary, v: np.ndarray, lam: float, tol: float, max_iter: int
) -> LassoResult:
    """Exact regularization-path solve, from the all-zero end down to ``lam``.

    The optimum is piecewise linear in the weight: on each segment the active
    coefficients follow ``a - lam * b``.  Walking segment events (a
    coefficient hitting zero, or an inactive correlation catching up with the
    threshold) keeps every iterate exactly optimal for its own weight, which
    is what coherent, overcomplete dictionaries need.
    """
    cols = dictionary.columns
    width = dictionary.width
    corr = cols.T @ v
    scale = max(1.0, float(np.max(np.abs(corr)) if width else 1.0))
    event_tol = 1e-12 * scale

    h = np.zeros(width, dtype=np.float64)
    lam_cur = 2.0 * float(np.max(corr)) if width else 0.0
    if width == 0 or lam >= lam_cur:
        return LassoResult(h, True, 0, lasso_objective(dictionary, v, lam, h))

    gram = cols.T @ cols
    active = [int(np.argmax(corr))]
    events = 0
    converged = False
    sq = np.diag(gram)

    while events < max_iter:
        events += 1
        a, b = _segment_solution(gram, corr, active)

        # Deletion events: an active coefficient dropping to zero (it shrinks
        # as the weight decreases exactly when b < 0).
        candidates: list[tuple[float, str, int]] = []
        for i, t in enumerate(active):
            if b[i] < -1e-15:
                lam_star = a[i] / b[i]
                if lam + event_tol < lam_star < lam_cur - event_tol:
                    candidates.append((float(lam_star), "del", t))
        # Insertion events: an inactive correlation reaching the threshold.
        inactive = [t for t in range(width) if t not in active and sq[t] > 0.0]
        if inactive:
            ia = np.asarray(inactive)
            p = 2.0 * (corr[ia] - gram[np.ix_(ia, active)] @ a)
            q = 2.0 * (gram[np.ix_(ia, active)] @ b)
            for p_t, q_t, t in zip(p, q, ia):
                denom = 1.0 - q_t
                if denom > 1e-15:
                    lam_star = p_t / denom
                    if lam + event_tol < lam_star < lam_cur - event_tol:
                        candidates.append((float(lam_star), "add", int(t)))

        if not candidates:
            h[:] = 0.0
            final = np.clip(a - lam * b, 0.0, None)
            for i, t in enumerate(active):
                h[t] = final[i]
            converged = True
            break

        lam_star, kind, t = max(candidates, key=lambda c: c[0])
        # Keep a valid iterate for this segment in case the event cap hits.
        h[:] = 0.0
        at_event = np.clip(a - lam_star * b, 0.0, None)
        for i, u in enumerate(active):
            h[u] = at_event[i]
        lam_cur = lam_star
        if kind == "del":
            idx = active.index(t)
            active.pop(idx)
            if not active:
                # Re-seed with the best correlation at this weight.
                resid_corr = 2.0 * corr
                best = int(np.argmax(resid_corr))
                if resid_corr[best] > lam_cur:
                    active = [best]
                else:
                    h[:] = 0.0
                    converged = True
                    break
        else:
            active.append(t)

    stationarity, violation = lasso_kkt_residuals(dictionary, v, lam, h)
    kkt_tol = max(tol, 1e-7 * scale)
    converged = converged and stationarity <= kkt_tol and violation <= kkt_tol
    return LassoResult(h, converged, events, lasso_objective(dictionary, v, lam, h))


def _cd_nn_lasso(
    dictionary: Dictionary, v: np.ndarray, lam: float, tol: float, max_iter: int
) -> LassoResult:
    """Cyclic coordinate descent with zero-clipped soft-thresholding.

    Each coordinate is minimized exactly, so the objective never increases.
    Stops when the objective drop over a full sweep falls below ``tol``; if
    ``max_iter`` sweeps pass first, the best iterate is returned with
    ``converged=False``.
    """
    cols = dictionary.columns
    sq = np.sum(cols * cols, axis=0)
    live = np.flatnonzero(sq > 0.0)  # zero columns stay at coefficient 0
    h = np.zeros(dictionary.width, dtype=np.float64)
    r = v.copy()
    obj = lasso_objective(dictionary, v, lam, h)
    converged = False
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        for t in live:
            col = cols[:, t]
            old = h[t]
            rho = col @ r + sq[t] * old
            new = (rho - 0.5 * lam) / sq[t]
            if new < 0.0:
                new = 0.0
            if new != old:
                r -= col * (new - old)
                h[t] = new
        r = v - cols @ h  # refresh residual; guards against drift
        new_obj = float(r @ r + lam * np.sum(h))
        if obj - new_obj < tol:
            obj = min(obj, new_obj)
            converged = True
            break
        obj = new_obj
    return LassoResult(coeffs=h, converged=converged, sweeps=sweeps, objective=obj)


def solve_nn_lasso(
    dictionary: Dictionary,
    v: np.ndarray,
    lam: float,
    tol: float = LASSO_TOL,
    max_iter: int = LASSO_MAX_ITER,
    method: str = "homotopy",
) -> LassoResult:
    """Minimize ``||v - D h||^2 + lam * sum(h)`` over ``h >= 0``.

    ``method="homotopy"`` (default) walks the exact solution path and is the
    one that holds up on real vocabulary dictionaries; ``method="cd"`` is
    plain cyclic coordinate descent.  ``max_iter`` caps path events or full
    sweeps respectively; the best iterate is returned with ``converged=False``
    when the cap is hit first.
    """
    v = _validate_lasso_inputs(dictionary, v, lam)
    if method == "homotopy":
        return _homotopy_nn_lasso(dictionary, v, lam, tol, max_iter)
    if method == "cd":
        return _cd_nn_lasso(dictionary, v, lam, tol, max_iter)
    raise ValueError(f"unknown method {method!r}")


def lasso_kkt_residuals(
    dictionary: Dictionary, v: np.ndarray, lam: float, h: np.ndarray
) -> tuple[float, float]:
    """Optimality residuals at h: (max |gradient| on the support,
    max violation of gradient >= 0 off the support).  Both are 0 at the optimum.
    """
    cols = dictionary.columns
    grad = -2.0 * (cols.T @ (np.asarray(v, dtype=np.float64) - cols @ h)) + lam
    active = h > 0
    stationarity = float(np.max(np.abs(grad[active]))) if active.any() else 0.0
    inactive = ~active
    violation = float(max(0.0, -np.min(grad[inactive]))) if inactive.any() else 0.0
    return stationarity, violation


def solve_tikhonov(
    dictionary: Dictionary,
    v: np.ndarray,
    h0: np.ndarray,
    alpha: float,
    n1: float | None = None,
    n2: float | None = None,
) -> np.ndarray:
    """Closed-form solve of the prior-anchored least-squares blend.

    Minimizes ``alpha * ||v - D h||^2 / n1 + (1 - alpha) * ||h - h0||^2 / n2``
    where the normalizers default to ``||v||^2`` and ``||h0||^2``.  With
    ``a1 = alpha/n1`` and ``a2 = (1-alpha)/n2`` the unique solution is

        h* = a1 * D^T (a1 D D^T + a2 I)^{-1} (v - D h0) + h0

    which only ever inverts a (dim x dim) matrix.  Callers solving several
    blocks of one larger problem can pass shared ``n1``/``n2``.
    """
    v = np.asarray(v, dtype=np.float64)
    h0 = np.asarray(h0, dtype=np.float64)
    if v.shape != (dictionary.dim,):
        raise ValueError(f"v must have shape ({dictionary.dim},)")
    if h0.shape != (dictionary.width,):
        raise ValueError(f"h0 must have shape ({dictionary.width},)")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly inside (0, 1)")
    if n1 is None:
        n1 = float(v @ v)
    if n2 is None:
        n2 = float(h0 @ h0)
    if n1 <= 0 or n2 <= 0:
        raise ValueError("normalizers must be positive (zero v or h0)")

    a1 = alpha / n1
    a2 = (1.0 - alpha) / n2
    cols = dictionary.columns
    system = a1 * (cols @ cols.T) + a2 * np.eye(dictionary.dim)
    z = np.linalg.solve(system, v - cols @ h0)
    return a1 * (cols.T @ z) + h0


def solve_tikhonov_direct(
    dictionary: Dictionary,
    v: np.ndarray,
    h0: np.ndarray,
    alpha: float,
    n1: float | None = None,
    n2: float | None = None,
) -> np.ndarray:
    """Same blend solved through the (T x T) normal equations.

    Kept as the independent cross-check of :func:`solve_tikhonov`; only
    sensible for narrow dictionaries.
    """
    v = np.asarray(v, dtype=np.float64)
    h0 = np.asarray(h0, dtype=np.float64)
    if n1 is None:
        n1 = float(v @ v)
    if n2 is None:
        n2 = float(h0 @ h0)
    if n1 <= 0 or n2 <= 0:
        raise ValueError("normalizers must be positive (zero v or h0)")
    a1 = alpha / n1
    a2 = (1.0 - alpha) / n2
    cols = dictionary.columns
    system = a1 * (cols.T @ cols) + a2 * np.eye(dictionary.width)
    return np.linalg.solve(system, a1 * (cols.T @ v) + a2 * h0)
