"""
Preconditioned LASSO outlier detection.

With y = Phi beta + eps + gamma, profiling out beta leaves a LASSO in gamma
alone over the kernel space of the design:

    min_gamma  1/2 ||U2^T y - U2^T gamma||^2 + lambda ||gamma||_1

which shares its Gram matrix (I - H) and correlation (I - H) y with the
(I - H)-design form. Instances whose gamma turns nonzero earliest along the
regularization path are the most outlier-like.

Features:
- SVD preconditioner with hat matrix / leverage access and closed-form beta
- Exact homotopy path (join and drop events) with KKT certification per knot
- Cyclic coordinate-descent LASSO used as an independent oracle
- Outlier ranking by activation lambda, count(k) and cross-validated selection
- IPOD hard-thresholding refinement seeded from the path
- Path export as JSON breakpoints or long-format CSV
"""

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg
from sklearn.model_selection import StratifiedKFold

from src.errors import ConfigError, DataShapeError, NoKernelSpaceError, PathError

logger = logging.getLogger('RobustLasso.PLasso')

# Inactive coordinates may exceed lambda by this relative slack and still pass KKT
KKT_INACTIVE_SLACK = 1e-8


# ---------------------------------------------------------------------------
# Preconditioner
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Preconditioner:
    """
    Full SVD of the design, split at the numerical rank.

    Attributes:
        U1: n x r orthonormal basis of the column space
        U2: n x (n - r) orthonormal basis of its complement (the kernel space)
        singular_values: the r retained singular values
        V: p x r right singular vectors
        rank: numerical rank r
        rank_tolerance: relative cutoff used to pick r
    """
    U1: np.ndarray
    U2: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray
    rank: int
    rank_tolerance: float

    @property
    def n_samples(self) -> int:
        return self.U1.shape[0]

    @property
    def n_features(self) -> int:
        return self.V.shape[0]

    @property
    def effective_observations(self) -> int:
        return self.n_samples - self.rank

    def project_out(self, v: np.ndarray) -> np.ndarray:
        """(I - H) v without forming H."""
        return v - self.U1 @ (self.U1.T @ v)


def design_matrix(features: np.ndarray, intercept: bool = True) -> np.ndarray:
    """Feature matrix with an optional leading column of ones."""
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features.reshape(-1, 1)
    if not intercept:
        return features
    return np.hstack([np.ones((features.shape[0], 1)), features])


def precondition(phi: np.ndarray, rank_tolerance: float = 1e-10,
                 require_kernel: bool = True) -> Preconditioner:
    """
    Compute the SVD preconditioner of a design matrix.

    Args:
        phi: n x p design
        rank_tolerance: singular values <= rank_tolerance * max are treated as zero
        require_kernel: raise when the design leaves no effective observations;
            with False the factors are returned and the failure surfaces in lasso_path

    Raises:
        DataShapeError: n < 2 or a non-finite entry
        NoKernelSpaceError: n - r == 0 and require_kernel
    """
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2:
        raise DataShapeError(f"design must be a 2-D matrix, got {phi.ndim}-D")
    n, p = phi.shape
    if n < 2:
        raise DataShapeError(f"need at least 2 instances, got {n}")
    if not np.all(np.isfinite(phi)):
        raise DataShapeError("design contains non-finite entries")

    U, s, Vt = scipy.linalg.svd(phi, full_matrices=True)
    cutoff = rank_tolerance * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > cutoff))

    pre = Preconditioner(
        U1=U[:, :rank],
        U2=U[:, rank:],
        singular_values=s[:rank],
        V=Vt[:rank].T if rank else np.zeros((p, 0)),
        rank=rank,
        rank_tolerance=rank_tolerance,
    )
    logger.debug(f"Preconditioner: n={n}, p={p}, rank={rank}, "
                 f"effective observations={pre.effective_observations}")
    if require_kernel and pre.effective_observations == 0:
        raise NoKernelSpaceError(n, rank)
    return pre


def hat_matrix(pre: Preconditioner) -> np.ndarray:
    return pre.U1 @ pre.U1.T


def leverage(pre: Preconditioner) -> np.ndarray:
    """Diagonal of the hat matrix."""
    return np.einsum('ij,ij->i', pre.U1, pre.U1)


def solve_beta(design: Union[Preconditioner, np.ndarray], y, gamma) -> np.ndarray:
    """
    Least-squares coefficients on the outlier-corrected labels.

    beta = pinv(Phi) (y - gamma) = V diag(1/s) U1^T (y - gamma), computed from
    the SVD factors; no explicit inverse is formed.
    """
    pre = design if isinstance(design, Preconditioner) else precondition(design, require_kernel=False)
    y = np.asarray(y, dtype=float).ravel()
    gamma = np.asarray(gamma, dtype=float).ravel()
    if y.shape[0] != pre.n_samples or gamma.shape[0] != pre.n_samples:
        raise DataShapeError(
            f"design has {pre.n_samples} rows but y has {y.shape[0]} and gamma {gamma.shape[0]}"
        )
    return pre.V @ ((pre.U1.T @ (y - gamma)) / pre.singular_values)


# ---------------------------------------------------------------------------
# LASSO objective, KKT and the coordinate-descent oracle
# ---------------------------------------------------------------------------

def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_objective(design: np.ndarray, target: np.ndarray, gamma: np.ndarray, lam: float) -> float:
    r = target - design @ gamma
    return 0.5 * float(r @ r) + lam * float(np.abs(gamma).sum())


def _correlation(pre: Preconditioner, residual: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    # X^T (y~ - X gamma) with X = I - H reduces to (I - H)(y - gamma)
    return residual - gamma + pre.U1 @ (pre.U1.T @ gamma)


def kkt_violation(pre: Preconditioner, y, gamma, lam: float) -> float:
    """
    Largest violation of the LASSO optimality conditions at lambda.

    Active coordinates need correlation == lambda * sign(gamma); inactive ones
    need |correlation| <= lambda (1 + 1e-8).
    """
    y = np.asarray(y, dtype=float).ravel()
    gamma = np.asarray(gamma, dtype=float).ravel()
    c = _correlation(pre, pre.project_out(y), gamma)
    active = gamma != 0
    worst = 0.0
    if active.any():
        worst = float(np.max(np.abs(c[active] - lam * np.sign(gamma[active]))))
    if (~active).any():
        excess = np.abs(c[~active]) - lam * (1 + KKT_INACTIVE_SLACK)
        worst = max(worst, float(np.max(excess)), 0.0)
    return worst


def coordinate_descent_lasso(design: np.ndarray, target: np.ndarray, lam: float,
                             tol: float = 1e-12, max_sweeps: int = 100000,
                             init: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Cyclic coordinate descent on 1/2 ||target - design g||^2 + lam ||g||_1.

    Works on the Gram form (Q = A^T A, b = A^T t) and stops when no coordinate
    moves by more than tol in a full sweep.
    """
    design = np.asarray(design, dtype=float)
    target = np.asarray(target, dtype=float).ravel()
    if design.shape[0] != target.shape[0]:
        raise DataShapeError(f"design has {design.shape[0]} rows, target has {target.shape[0]}")
    Q = design.T @ design
    b = design.T @ target
    m = Q.shape[0]
    gamma = np.zeros(m) if init is None else np.array(init, dtype=float)
    q = Q @ gamma

    for sweep in range(max_sweeps):
        biggest = 0.0
        for j in range(m):
            if Q[j, j] <= 0:
                continue
            old = gamma[j]
            rho = b[j] - q[j] + Q[j, j] * old
            new = soft_threshold(rho, lam) / Q[j, j]
            if new != old:
                q += Q[:, j] * (new - old)
                gamma[j] = new
                biggest = max(biggest, abs(new - old))
        if biggest <= tol:
            return gamma
    logger.warning(f"Coordinate descent stopped after {max_sweeps} sweeps at lambda={lam:.3g}")
    return gamma


def equivalence_check(pre: Preconditioner, y, lam: float) -> dict:
    """
    Solve the (I - H)-design and U2^T-design forms at one lambda and compare.

    Both are solved with the coordinate-descent oracle.
    """
    y = np.asarray(y, dtype=float).ravel()
    n = pre.n_samples
    if pre.effective_observations == 0:
        raise NoKernelSpaceError(n, pre.rank)
    residual_design = np.eye(n) - hat_matrix(pre)
    gamma_projected = coordinate_descent_lasso(residual_design, residual_design @ y, lam)
    gamma_kernel = coordinate_descent_lasso(pre.U2.T, pre.U2.T @ y, lam)
    return {
        'gamma_projected': gamma_projected,
        'gamma_kernel': gamma_kernel,
        'max_diff': float(np.max(np.abs(gamma_projected - gamma_kernel))),
    }


# ---------------------------------------------------------------------------
# Homotopy path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Breakpoint:
    """
    One knot of the piecewise-linear path.

    `active` lists the instances with nonzero gamma at this lambda (so it is
    empty at lambda_max); `entering` lists instances whose coefficient starts
    moving away from zero here, with their |d gamma / d(-lambda)|.
    """
    lam: float
    active: tuple = ()
    signs: tuple = ()
    gamma_values: tuple = ()
    entering: tuple = ()
    entering_slopes: tuple = ()
    leaving: tuple = ()
    kkt_violation: float = 0.0

    def gamma(self, n: int) -> np.ndarray:
        dense = np.zeros(n)
        if self.active:
            dense[list(self.active)] = self.gamma_values
        return dense


@dataclass(frozen=True)
class RegularizationPath:
    """
    Ordered breakpoints of gamma(lambda), lambda strictly decreasing.

    terminated is one of 'lambda_min', 'max_active' or 'zero_residual'.
    """
    breakpoints: tuple
    lambda_max: float
    n_samples: int
    lambda_min: float = 0.0
    terminated: str = 'lambda_min'

    def __len__(self):
        return len(self.breakpoints)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([bp.lam for bp in self.breakpoints])

    def gamma_at(self, lam: float) -> np.ndarray:
        return path_gamma_at(self, lam)


def path_gamma_at(path: RegularizationPath, lam: float) -> np.ndarray:
    """gamma(lambda) by affine interpolation between neighbouring breakpoints."""
    n = path.n_samples
    if not path.breakpoints or lam >= path.lambda_max:
        return np.zeros(n)
    lambdas = path.lambdas
    if lam <= lambdas[-1]:
        return path.breakpoints[-1].gamma(n)
    # lambdas descend, so search on the negated sequence
    j = int(np.searchsorted(-lambdas, -lam, side='right')) - 1
    upper, lower = path.breakpoints[j], path.breakpoints[j + 1]
    w = (upper.lam - lam) / (upper.lam - lower.lam)
    return (1 - w) * upper.gamma(n) + w * lower.gamma(n)


class _ActiveSetSolver:
    """Solves with G_WW = I - U1[W] U1[W]^T through the r x r Woodbury system."""

    def __init__(self, pre: Preconditioner):
        self.U1 = pre.U1
        self.r = pre.rank

    def solve(self, W: Sequence[int], v: np.ndarray) -> np.ndarray:
        if self.r == 0:
            return np.array(v, dtype=float)
        M = self.U1[list(W)]
        A = np.eye(self.r) - M.T @ M
        x = scipy.linalg.solve(A, M.T @ v, assume_a='sym')
        return v + M @ x


def lasso_path(pre: Preconditioner, y, lambda_min_ratio: float = 1e-6,
               max_active: Optional[int] = None, kkt_tol: float = 1e-6,
               max_steps: Optional[int] = None) -> RegularizationPath:
    """
    Exact homotopy path of the preconditioned LASSO.

    Starts at lambda_max = ||(I - H) y||_inf with gamma = 0 and follows the
    piecewise-linear solution down to lambda_min_ratio * lambda_max, adding
    coordinates when their correlation reaches lambda and removing them when
    their coefficient crosses zero. Coefficients at each knot come from the
    closed form gamma_W = G_WW^{-1} (r_W - lambda s_W), so no error accumulates
    along the path.

    Args:
        pre: preconditioner of the design
        y: real-encoded labels
        lambda_min_ratio: stop at this fraction of lambda_max
        max_active: stop once this many coordinates are active (default n - r)
        kkt_tol: KKT violation that aborts the path (scaled by max(1, lambda_max))
        max_steps: event budget (default 20 n)

    Raises:
        NoKernelSpaceError: the design has no effective observations
        PathError: a step fails or breaks KKT; carries the valid prefix
    """
    y = np.asarray(y, dtype=float).ravel()
    n = pre.n_samples
    if y.shape[0] != n:
        raise DataShapeError(f"design has {n} rows but y has {y.shape[0]} entries")
    kernel_dim = pre.effective_observations
    if kernel_dim == 0:
        raise NoKernelSpaceError(n, pre.rank)
    limit = kernel_dim if max_active is None else min(int(max_active), kernel_dim)
    max_steps = max_steps if max_steps is not None else 20 * n

    residual = pre.project_out(y)
    lam = float(np.max(np.abs(residual)))
    if lam <= 1e-12 * max(1.0, float(np.max(np.abs(y)))):
        logger.info("Labels lie in the column space of the design; path is a single knot")
        return RegularizationPath(breakpoints=(Breakpoint(lam=0.0),), lambda_max=0.0,
                                  n_samples=n, terminated='zero_residual')

    lambda_max = lam
    lambda_min = lambda_min_ratio * lambda_max
    tie = 1e-11 * lambda_max
    tiny = 1e-13 * lambda_max
    kkt_limit = kkt_tol * max(1.0, lambda_max)
    solver = _ActiveSetSolver(pre)
    U1 = pre.U1
    breakpoints = []

    def prefix(terminated='failed'):
        return RegularizationPath(tuple(breakpoints), lambda_max, n, lambda_min, terminated)

    def direction(W, s):
        try:
            g = solver.solve(W, s)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
            raise PathError(f"active-set solve failed at lambda={lam:.6g}: {e}", prefix()) from e
        if not np.all(np.isfinite(g)):
            raise PathError(f"non-finite path direction at lambda={lam:.6g}", prefix())
        return g

    def closed_form(W, s, at):
        W = list(W)
        return solver.solve(W, residual[W] - at * s)

    # First knot: the largest residuals enter
    entering = np.flatnonzero(np.abs(residual) >= lambda_max - tie)
    W = [int(j) for j in entering][:limit]
    s = np.sign(residual[W])
    g = direction(W, s)
    gamma = np.zeros(n)
    breakpoints.append(Breakpoint(
        lam=lambda_max,
        entering=tuple(W),
        entering_slopes=tuple(float(abs(v)) for v in g),
    ))
    just_dropped = set()
    terminated = 'lambda_min'

    for step in range(max_steps):
        if len(W) >= limit and limit < kernel_dim:
            terminated = 'max_active'
            break

        g_full = np.zeros(n)
        g_full[W] = g
        a = g_full - U1 @ (U1[W].T @ g) if W else np.zeros(n)
        c = _correlation(pre, residual, gamma)

        # Joins: |c_j - t a_j| reaches lambda - t
        t_join = np.full(n, np.inf)
        if len(W) < kernel_dim:
            with np.errstate(divide='ignore', invalid='ignore'):
                up = np.where(1 - a > 1e-12, (lam - c) / (1 - a), np.inf)
                down = np.where(1 + a > 1e-12, (lam + c) / (1 + a), np.inf)
            t_join = np.minimum(np.where(up > tiny, up, np.inf), np.where(down > tiny, down, np.inf))
            t_join[W] = np.inf
            for j in just_dropped:
                t_join[j] = np.inf

        # Drops: gamma_j + t g_j crosses zero
        t_drop = np.full(len(W), np.inf)
        gW = gamma[W]
        moving_in = (gW != 0) & (gW * g < 0)
        t_drop[moving_in] = -gW[moving_in] / g[moving_in]

        t_min = min(float(t_join.min()), float(t_drop.min()) if len(W) else np.inf)

        if not np.isfinite(t_min) or lam - t_min <= lambda_min:
            lam_next = lambda_min
            gamma_next = np.zeros(n)
            if W:
                gamma_next[W] = closed_form(W, s, lam_next)
            violation = kkt_violation(pre, y, gamma_next, lam_next)
            active = [j for j in W if gamma_next[j] != 0]
            breakpoints.append(Breakpoint(
                lam=lam_next,
                active=tuple(sorted(active)),
                signs=tuple(float(np.sign(gamma_next[j])) for j in sorted(active)),
                gamma_values=tuple(float(gamma_next[j]) for j in sorted(active)),
                kkt_violation=violation,
            ))
            if violation > kkt_limit:
                raise PathError(f"KKT violated at terminal knot: {violation:.3g}", prefix())
            terminated = 'lambda_min'
            break

        lam_next = lam - t_min
        gamma_next = np.zeros(n)
        if W:
            gamma_next[W] = closed_form(W, s, lam_next)

        leaving = [W[i] for i in np.flatnonzero(t_drop <= t_min + tie)]
        for j in leaving:
            gamma_next[j] = 0.0
        joining = [int(j) for j in np.flatnonzero(t_join <= t_min + tie)]
        joining = joining[:max(0, kernel_dim - (len(W) - len(leaving)))]

        c_next = _correlation(pre, residual, gamma_next)
        violation = kkt_violation(pre, y, gamma_next, lam_next)
        active = sorted(j for j in W if j not in leaving)

        keep = [i for i, j in enumerate(W) if j not in leaving]
        W = [W[i] for i in keep] + joining
        s = np.concatenate([s[keep], np.sign(c_next[joining])])
        lam = lam_next
        g = direction(W, s)
        slope = dict(zip(W, np.abs(g)))

        breakpoints.append(Breakpoint(
            lam=lam_next,
            active=tuple(active),
            signs=tuple(float(np.sign(gamma_next[j])) for j in active),
            gamma_values=tuple(float(gamma_next[j]) for j in active),
            entering=tuple(joining),
            entering_slopes=tuple(float(slope[j]) for j in joining),
            leaving=tuple(sorted(leaving)),
            kkt_violation=violation,
        ))
        if violation > kkt_limit:
            raise PathError(f"KKT violated at lambda={lam_next:.6g}: {violation:.3g}", prefix())
        logger.debug(f"knot {len(breakpoints) - 1}: lambda={lam_next:.6g} "
                     f"+{joining} -{leaving} |W|={len(W)}")

        gamma = gamma_next
        just_dropped = set(leaving)
    else:
        raise PathError(f"path did not reach lambda_min within {max_steps} events", prefix())

    path = RegularizationPath(tuple(breakpoints), lambda_max, n, lambda_min, terminated)
    logger.info(f"Path: {len(path)} knots, lambda {lambda_max:.4g} -> {path.breakpoints[-1].lam:.3g}, "
                f"{len(path.breakpoints[-1].active)} active ({terminated})")
    return path


# ---------------------------------------------------------------------------
# Outlier selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OutlierReport:
    """
    Instances ordered by how early they activate, plus the chosen outliers.

    selection_rule is 'none', 'count(k)', 'cv(folds)' or 'ipod(k)'.
    """
    ranking: tuple
    activation_lambdas: tuple
    selected: tuple = ()
    selection_rule: str = 'none'
    cv_trace: Optional[tuple] = None
    converged: bool = True

    def to_dict(self) -> dict:
        doc = {
            'ranking': list(self.ranking),
            'activation_lambdas': list(self.activation_lambdas),
            'selected': list(self.selected),
            'selection_rule': self.selection_rule,
            'converged': self.converged,
        }
        if self.cv_trace is not None:
            doc['cv_trace'] = [{'lambda': lam, 'accuracy': acc, 'removed': removed}
                               for lam, acc, removed in self.cv_trace]
        return doc


def order_by_activation(path: RegularizationPath) -> OutlierReport:
    """
    Rank instances by the largest lambda at which they enter the path.

    Instances entering at the same knot are ordered by |slope| descending,
    then by index. Instances that never enter are left out.
    """
    if not path.breakpoints:
        raise PathError("cannot order an empty path", path)
    first = {}
    for bp in path.breakpoints:
        for j, slope in zip(bp.entering, bp.entering_slopes):
            if j not in first:
                first[j] = (bp.lam, abs(slope))
    ranking = sorted(first, key=lambda j: (-first[j][0], -first[j][1], j))
    return OutlierReport(
        ranking=tuple(int(j) for j in ranking),
        activation_lambdas=tuple(float(first[j][0]) for j in ranking),
    )


def select_outliers_count(path: RegularizationPath, k: int) -> OutlierReport:
    """Take the first k ranked instances as outliers."""
    if k < 0:
        raise ConfigError(f"outlier count must be non-negative, got {k}")
    report = order_by_activation(path)
    if k > len(report.ranking):
        logger.warning(f"Requested {k} outliers but only {len(report.ranking)} instances activate")
    return OutlierReport(
        ranking=report.ranking,
        activation_lambdas=report.activation_lambdas,
        selected=report.ranking[:k],
        selection_rule=f'count({k})',
    )


def _cv_candidates(path: RegularizationPath, max_candidates: Optional[int],
                   max_removed: Optional[int]) -> list:
    """Distinct active sets along the path as (lambda, active) pairs, lambda descending."""
    seen, candidates = set(), []
    for bp in path.breakpoints:
        key = frozenset(bp.active)
        if key in seen:
            continue
        if max_removed is not None and len(bp.active) > max_removed:
            continue
        seen.add(key)
        candidates.append((bp.lam, bp.active))
    if max_candidates is not None and len(candidates) > max_candidates:
        picks = np.unique(np.linspace(0, len(candidates) - 1, max_candidates).round().astype(int))
        candidates = [candidates[i] for i in picks]
    return candidates


def _cv_accuracy(features, class_ids, folds, reg_c, seed, classifier_opts) -> Optional[float]:
    from src.classify import accuracy, predict, train_linear

    values, counts = np.unique(class_ids, return_counts=True)
    if len(values) < 2 or counts.min() < folds:
        return None
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    scores = []
    for train, test in splitter.split(features, class_ids):
        if len(np.unique(class_ids[train])) < 2:
            return None
        model = train_linear(features[train], class_ids[train], reg_c, seed=seed, **classifier_opts)
        scores.append(accuracy(predict(model, features[test]), class_ids[test]))
    return float(np.mean(scores))


def select_outliers_cv(path: RegularizationPath, ds, folds: int = 5, reg_c: float = 1.0,
                       seed: int = 0, max_candidates: Optional[int] = 40,
                       max_removed: Optional[int] = None, workers: int = 1,
                       classifier_opts: Optional[dict] = None) -> OutlierReport:
    """
    Pick the path knot whose removal maximizes cross-validated accuracy.

    For each candidate knot the active instances are removed and a folds-fold
    stratified CV of the linear classifier runs on the rest. Ties go to the
    larger lambda (fewer removals). Knots whose remainder cannot be split into
    folds are skipped.

    Args:
        path: regularization path over the instances of ds
        ds: Dataset supplying features and class ids
        max_candidates: evaluate at most this many evenly spaced distinct
            active sets (the empty set is always included); None evaluates all
        max_removed: skip knots removing more than this many instances
        workers: threads evaluating candidates
    """
    if folds < 2:
        raise ConfigError(f"cross-validation needs at least 2 folds, got {folds}")
    if path.n_samples != ds.n:
        raise DataShapeError(f"path covers {path.n_samples} instances, dataset has {ds.n}")
    report = order_by_activation(path)
    class_ids = np.asarray(ds.classes())
    features = np.asarray(ds.features)
    opts = classifier_opts or {}

    candidates = _cv_candidates(path, max_candidates, max_removed)

    def evaluate(candidate):
        lam, removed = candidate
        keep = np.setdiff1d(np.arange(ds.n), np.asarray(removed, dtype=int))
        if len(keep) < folds:
            return None
        return _cv_accuracy(features[keep], class_ids[keep], folds, reg_c, seed, opts)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        scores = list(pool.map(evaluate, candidates))

    trace, best = [], None
    for (lam, removed), score in zip(candidates, scores):
        if score is None:
            logger.debug(f"CV: skipped lambda={lam:.4g} ({len(removed)} removed)")
            continue
        trace.append((float(lam), score, len(removed)))
        if best is None or score > best[1]:
            best = (removed, score)
    if best is None:
        raise ConfigError("no path knot leaves enough instances per class for cross-validation")

    position = {j: i for i, j in enumerate(report.ranking)}
    selected = tuple(sorted(best[0], key=lambda j: position.get(j, len(position))))
    logger.info(f"CV selection: {len(selected)} outliers, accuracy {best[1]:.4f} "
                f"over {len(trace)} candidates")
    return OutlierReport(
        ranking=report.ranking,
        activation_lambdas=report.activation_lambdas,
        selected=selected,
        selection_rule=f'cv({folds})',
        cv_trace=tuple(trace),
    )


# ---------------------------------------------------------------------------
# IPOD refinement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IpodResult:
    support: tuple
    gamma: np.ndarray = field(repr=False)
    iterations: int
    converged: bool


def ipod_refine(pre: Preconditioner, y, init_support: Sequence[int],
                max_iter: int = 100) -> IpodResult:
    """
    Hard-thresholding refinement of an outlier support.

    Alternates beta = solve_beta(y - gamma), r = y - Phi beta and keeps the
    |init_support| largest |r_i| as the new gamma. Stops when the support
    repeats or after max_iter rounds (converged=False, with a warning).
    """
    y = np.asarray(y, dtype=float).ravel()
    n = pre.n_samples
    if y.shape[0] != n:
        raise DataShapeError(f"design has {n} rows but y has {y.shape[0]} entries")
    k = len(set(int(j) for j in init_support))
    if k == 0:
        return IpodResult(support=(), gamma=np.zeros(n), iterations=0, converged=True)

    def top_k(r):
        return tuple(sorted(np.argsort(-np.abs(r), kind='stable')[:k].tolist()))

    # Start from the least-squares residuals on the initial support
    r = y - pre.U1 @ (pre.U1.T @ y)
    support = tuple(sorted(set(int(j) for j in init_support)))
    gamma = np.zeros(n)
    gamma[list(support)] = r[list(support)]

    for it in range(1, max_iter + 1):
        fitted = pre.U1 @ (pre.U1.T @ (y - gamma))
        r = y - fitted
        new_support = top_k(r)
        gamma = np.zeros(n)
        gamma[list(new_support)] = r[list(new_support)]
        if new_support == support:
            logger.debug(f"IPOD converged after {it} iterations")
            return IpodResult(support=new_support, gamma=gamma, iterations=it, converged=True)
        support = new_support

    logger.warning(f"IPOD support still changing after {max_iter} iterations")
    return IpodResult(support=support, gamma=gamma, iterations=max_iter, converged=False)


def select_outliers_ipod(path: RegularizationPath, pre: Preconditioner, y, k: int,
                         max_iter: int = 100) -> OutlierReport:
    """IPOD seeded with the first k instances to activate on the path."""
    seed = select_outliers_count(path, k)
    result = ipod_refine(pre, y, seed.selected, max_iter=max_iter)
    return OutlierReport(
        ranking=seed.ranking,
        activation_lambdas=seed.activation_lambdas,
        selected=result.support,
        selection_rule=f'ipod({k})',
        converged=result.converged,
    )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def path_to_json(path: RegularizationPath) -> list:
    """Breakpoints as plain dicts: lambda, active, signs, gamma_sparse."""
    return [
        {
            'lambda': bp.lam,
            'active': list(bp.active),
            'signs': [int(v) for v in bp.signs],
            'gamma_sparse': {str(j): v for j, v in zip(bp.active, bp.gamma_values)},
        }
        for bp in path.breakpoints
    ]


def path_to_long_csv(path: RegularizationPath, outlier_mask=None) -> str:
    """
    Long-format path table, one row per (knot, nonzero coefficient).

    Columns: lambda, instance, gamma, plus is_outlier when a mask is given.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    header = ['lambda', 'instance', 'gamma']
    if outlier_mask is not None:
        header.append('is_outlier')
    writer.writerow(header)
    for bp in path.breakpoints:
        for j, value in zip(bp.active, bp.gamma_values):
            row = ['%.17g' % bp.lam, str(j), '%.17g' % value]
            if outlier_mask is not None:
                row.append('1' if outlier_mask[j] else '0')
            writer.writerow(row)
    return buf.getvalue()
