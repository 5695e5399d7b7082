"""
Transductive diffusion component analysis (TDCA).

Builds a kNN similarity graph over all instances (training and test
together), runs a lazy random walk from every node to its stationary
diffusion state, and compresses the states into low-dimensional node (x)
and context (w) vectors whose softmax reconstructs them.

Features:
- kNN graph with the squared-inner-product similarity exp(<a,b>^2 / delta)
  or the heat kernel exp(-||a-b||^2 / delta), delta = median over kNN pairs
- Row-stochastic sparse transition matrix (scipy.sparse CSR)
- Lazy random walk with per-row convergence, parallel over row blocks
- Dense resolvent oracle for small graphs
- KL objective with analytic gradients, fitted by L-BFGS
- CSV export of embeddings and edge lists
"""

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse
from scipy.special import logsumexp, softmax, xlogy
from sklearn.metrics import pairwise_distances
from sklearn.preprocessing import normalize

from src.errors import ConfigError, DataShapeError, EmbeddingError

logger = logging.getLogger('RobustLasso.TDCA')

SIMILARITIES = ('inner', 'heat')

# The dense resolvent is O(n^3); refuse anything bigger
ORACLE_MAX_NODES = 500


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiffusionGraph:
    """
    Directed kNN graph with its transition matrix.

    Attributes:
        n_nodes: number of instances
        neighbors: per-node neighbor indices (excluding the node itself)
        weights: per-edge similarity weights aligned with neighbors, scaled so
            each row's largest weight is 1
        transition: row-stochastic CSR matrix, P[k, l] > 0 only for l in neighbors[k]
        delta: bandwidth (NaN for graphs built from an explicit transition)
        similarity: 'inner', 'heat' or 'explicit'
    """
    n_nodes: int
    neighbors: tuple
    weights: tuple
    transition: scipy.sparse.csr_matrix = field(repr=False)
    delta: float = float('nan')
    similarity: str = 'inner'

    @property
    def n_edges(self) -> int:
        return int(self.transition.nnz)

    @classmethod
    def from_transition(cls, P) -> 'DiffusionGraph':
        """Wrap an explicit row-stochastic matrix (dense or sparse)."""
        P = scipy.sparse.csr_matrix(P, dtype=float)
        n, m = P.shape
        if n != m:
            raise DataShapeError(f"transition matrix must be square, got {n}x{m}")
        if P.nnz and P.data.min() < 0:
            raise ConfigError("transition matrix has negative entries")
        sums = np.asarray(P.sum(axis=1)).ravel()
        if np.max(np.abs(sums - 1)) > 1e-8:
            raise ConfigError("transition matrix rows must sum to 1")
        P.eliminate_zeros()
        P.sort_indices()
        neighbors = tuple(P.indices[P.indptr[k]:P.indptr[k + 1]].copy() for k in range(n))
        weights = tuple(P.data[P.indptr[k]:P.indptr[k + 1]].copy() for k in range(n))
        return cls(n_nodes=n, neighbors=neighbors, weights=weights, transition=P,
                   similarity='explicit')


def build_graph(features: np.ndarray, k: int = 10, similarity: str = 'inner',
                normalize_rows: bool = True) -> DiffusionGraph:
    """
    Build the kNN similarity graph and its transition matrix.

    Args:
        features: n x p instance features (training and test rows together)
        k: neighbors per node; k >= n gives a fully connected graph
        similarity: 'inner' for exp(<a,b>^2 / delta), 'heat' for exp(-||a-b||^2 / delta)
        normalize_rows: L2-normalize rows first

    Returns:
        DiffusionGraph with P[k, l] = w_kl / sum_m w_km over the kNN set
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise DataShapeError(f"features must be a 2-D matrix, got {features.ndim}-D")
    n = features.shape[0]
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if n < 2:
        raise DataShapeError(f"need at least 2 instances to build a graph, got {n}")
    if similarity not in SIMILARITIES:
        raise ConfigError(f"unknown similarity {similarity!r} (expected one of {SIMILARITIES})")
    if k >= n:
        logger.debug(f"k={k} >= n={n}: using a fully connected graph")
        k = n - 1

    if normalize_rows:
        features = normalize(features, norm='l2', axis=1)

    if similarity == 'inner':
        score = (features @ features.T) ** 2
    else:
        score = -pairwise_distances(features, metric='sqeuclidean')
    np.fill_diagonal(score, -np.inf)

    neighbors = np.argsort(-score, axis=1, kind='stable')[:, :k]
    rows = np.repeat(np.arange(n), k)
    picked = score[rows, neighbors.ravel()].reshape(n, k)

    delta = float(np.median(np.abs(picked)))
    if delta == 0.0:
        logger.warning("Similarity bandwidth is zero (all pair scores vanish); using uniform weights")
        log_weights = np.zeros((n, k))
    else:
        log_weights = picked / delta

    probs = softmax(log_weights, axis=1)
    # scaled so each row's strongest edge has weight 1
    weights = np.exp(log_weights - log_weights.max(axis=1, keepdims=True))

    P = scipy.sparse.csr_matrix((probs.ravel(), (rows, neighbors.ravel())), shape=(n, n))
    P.sort_indices()
    logger.info(f"Graph: n={n}, k={k}, similarity={similarity}, delta={delta:.4g}")
    return DiffusionGraph(
        n_nodes=n,
        neighbors=tuple(neighbors),
        weights=tuple(weights),
        transition=P,
        delta=delta,
        similarity=similarity,
    )


# ---------------------------------------------------------------------------
# Diffusion states
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiffusionStates:
    """
    Stationary lazy-random-walk distributions, one row per start node.

    residual is the largest last-update size max_k ||s_k - ((1 - p) s_k P + p e_k)||_inf.
    """
    S: np.ndarray = field(repr=False)
    restart_prob: float
    residual: float
    iterations: int = 0
    converged: bool = True


def _walk_block(P_T, rows: np.ndarray, n: int, restart_prob: float,
                tol: float, max_iter: int):
    """Iterate the rows in `rows` independently until each one settles."""
    b = len(rows)
    start = np.zeros((b, n))
    start[np.arange(b), rows] = 1.0
    S = start.copy()
    residual = np.full(b, np.inf)
    moving = np.ones(b, dtype=bool)
    iterations = 0
    for it in range(1, max_iter + 1):
        idx = np.flatnonzero(moving)
        if idx.size == 0:
            break
        nxt = (1 - restart_prob) * (P_T @ S[idx].T).T + restart_prob * start[idx]
        step = np.max(np.abs(nxt - S[idx]), axis=1)
        S[idx] = nxt
        residual[idx] = step
        moving[idx[step <= tol]] = False
        iterations = it
    return S, residual, iterations


def lazy_random_walk(g: DiffusionGraph, restart_prob: float = 0.5, tol: float = 1e-10,
                     max_iter: int = 10000, workers: int = 1) -> DiffusionStates:
    """
    Run s <- (1 - p) s P + p e_k from s = e_k for every node k.

    Each row stops on its own once an update moves it by at most tol, so the
    result does not depend on how rows are split across workers.
    """
    if not 0 < restart_prob <= 1:
        raise ConfigError(f"restart probability must be in (0, 1], got {restart_prob}")
    n = g.n_nodes
    P_T = g.transition.T.tocsr()
    blocks = np.array_split(np.arange(n), max(1, min(workers, n)))

    def run(rows):
        return _walk_block(P_T, rows, n, restart_prob, tol, max_iter)

    with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
        parts = list(pool.map(run, blocks))

    S = np.vstack([part[0] for part in parts])
    residual = float(max(part[1].max() for part in parts))
    iterations = max(part[2] for part in parts)
    converged = residual <= tol
    if not converged:
        logger.warning(f"Lazy random walk not converged after {max_iter} iterations "
                       f"(residual {residual:.3g})")
    else:
        logger.debug(f"Lazy random walk converged in {iterations} iterations")
    return DiffusionStates(S=S, restart_prob=restart_prob, residual=residual,
                           iterations=iterations, converged=converged)


def stationary_oracle(g: DiffusionGraph, restart_prob: float = 0.5) -> DiffusionStates:
    """Exact states S = p (I - (1 - p) P)^{-1} from a dense solve (n <= 500)."""
    n = g.n_nodes
    if n > ORACLE_MAX_NODES:
        raise ConfigError(f"stationary oracle refuses n={n} > {ORACLE_MAX_NODES} nodes")
    if not 0 < restart_prob <= 1:
        raise ConfigError(f"restart probability must be in (0, 1], got {restart_prob}")
    P = g.transition.toarray()
    A = np.eye(n) - (1 - restart_prob) * P
    S = scipy.linalg.solve(A, restart_prob * np.eye(n))
    residual = float(np.max(np.abs(S - ((1 - restart_prob) * S @ P + restart_prob * np.eye(n)))))
    return DiffusionStates(S=S, restart_prob=restart_prob, residual=residual)


def truncate_states(states: DiffusionStates, threshold: float = 1e-6) -> DiffusionStates:
    """Drop entries below threshold and renormalize each row."""
    S = np.where(states.S < threshold, 0.0, states.S)
    S = S / S.sum(axis=1, keepdims=True)
    return DiffusionStates(S=S, restart_prob=states.restart_prob, residual=states.residual,
                           iterations=states.iterations, converged=states.converged)


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------

def kl_objective_and_gradient(X: np.ndarray, W: np.ndarray, S: np.ndarray):
    """
    Mean KL divergence between diffusion states and their softmax reconstruction.

    s_hat[k, l] = exp(w_k . x_l) / sum_l' exp(w_k . x_l')

    Returns:
        (value, grad_X, grad_W)
    """
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    S = np.asarray(S, dtype=float)
    n = S.shape[0]
    if S.shape != (n, n) or X.shape[0] != n or W.shape != X.shape:
        raise DataShapeError(f"shape mismatch: S {S.shape}, X {X.shape}, W {W.shape}")
    if np.any(S < 0):
        raise EmbeddingError("diffusion states contain negative entries")

    Z = W @ X.T
    log_s_hat = Z - logsumexp(Z, axis=1, keepdims=True)
    row_mass = S.sum(axis=1, keepdims=True)
    value = (xlogy(S, S).sum() - (S * log_s_hat).sum()) / n

    G = (np.exp(log_s_hat) * row_mass - S) / n
    return float(value), G.T @ W, G @ X


@dataclass(frozen=True)
class EmbeddingOptions:
    dim: int = 8
    init_std: float = 0.1
    memory: int = 10
    gtol: float = 1e-6
    max_iter: int = 500
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Embedding:
    """
    Node vectors X and context vectors W (both n x d).

    trace holds the objective after each accepted L-BFGS step, starting
    with the value at the initial point.
    """
    X: np.ndarray = field(repr=False)
    W: np.ndarray = field(repr=False)
    dim: int
    final_kl: float
    initial_kl: float
    trace: tuple = ()
    iterations: int = 0
    message: str = ''


class _NonFiniteObjective(Exception):
    pass


def _fit_once(S: np.ndarray, opts: EmbeddingOptions, init_std: float) -> Embedding:
    n, d = S.shape[0], opts.dim
    rng = np.random.default_rng(opts.seed)
    theta0 = rng.normal(0.0, init_std, size=2 * n * d)

    def unpack(theta):
        return theta[:n * d].reshape(n, d), theta[n * d:].reshape(n, d)

    def objective(theta):
        X, W = unpack(theta)
        value, grad_X, grad_W = kl_objective_and_gradient(X, W, S)
        if not np.isfinite(value) or not (np.all(np.isfinite(grad_X)) and np.all(np.isfinite(grad_W))):
            raise _NonFiniteObjective()
        return value, np.concatenate([grad_X.ravel(), grad_W.ravel()])

    initial = objective(theta0)[0]
    trace = [initial]

    def record(xk):
        trace.append(objective(xk)[0])

    result = scipy.optimize.minimize(
        objective, theta0, jac=True, method='L-BFGS-B', callback=record,
        options={'maxcor': opts.memory, 'gtol': opts.gtol, 'maxiter': opts.max_iter},
    )
    X, W = unpack(result.x)
    final = float(result.fun)
    if final > initial:
        X, W = unpack(theta0)
        final = initial
    return Embedding(X=X.copy(), W=W.copy(), dim=d, final_kl=max(final, 0.0), initial_kl=initial,
                     trace=tuple(trace), iterations=int(result.nit), message=str(result.message))


def fit_embedding(S: Union[np.ndarray, DiffusionStates], d: Optional[int] = None,
                  opts: Optional[EmbeddingOptions] = None) -> Embedding:
    """
    Fit node and context vectors to diffusion states by L-BFGS.

    A non-finite objective triggers one restart with a tenfold smaller
    initialization; a second failure raises EmbeddingError.
    """
    if isinstance(S, DiffusionStates):
        S = S.S
    S = np.asarray(S, dtype=float)
    opts = opts or EmbeddingOptions()
    if d is not None:
        opts = EmbeddingOptions(dim=d, init_std=opts.init_std, memory=opts.memory,
                                gtol=opts.gtol, max_iter=opts.max_iter, seed=opts.seed)
    n = S.shape[0]
    if S.ndim != 2 or S.shape[1] != n:
        raise DataShapeError(f"diffusion states must be square, got {S.shape}")
    if not 1 <= opts.dim < n:
        raise ConfigError(f"embedding dimension must satisfy 1 <= d < n={n}, got {opts.dim}")

    try:
        emb = _fit_once(S, opts, opts.init_std)
    except _NonFiniteObjective:
        logger.warning(f"Non-finite objective; restarting with init std {opts.init_std / 10:g}")
        try:
            emb = _fit_once(S, opts, opts.init_std / 10)
        except _NonFiniteObjective:
            raise EmbeddingError("embedding objective became non-finite after restart") from None

    logger.info(f"Embedding: d={emb.dim}, KL {emb.initial_kl:.4f} -> {emb.final_kl:.4f} "
                f"in {emb.iterations} iterations")
    return emb


def reconstruct_states(emb: Embedding) -> np.ndarray:
    """Softmax reconstruction s_hat[k, l] = exp(w_k . x_l) / sum_l' exp(w_k . x_l'); rows sum to 1."""
    return softmax(emb.W @ emb.X.T, axis=1)


def reduced_features(emb: Embedding) -> np.ndarray:
    """Node vectors X, the reduced design used for outlier detection."""
    return emb.X.copy()


def concat_features(emb: Embedding) -> np.ndarray:
    """[W | X] rows used as classifier input."""
    return np.hstack([emb.W, emb.X])


def run_tdca(features: np.ndarray, k: int = 10, similarity: str = 'inner',
             normalize_rows: bool = True, restart_prob: float = 0.5, tol: float = 1e-10,
             max_iter: int = 10000, opts: Optional[EmbeddingOptions] = None,
             truncate_above: int = 10000, truncate_threshold: float = 1e-6,
             workers: int = 1):
    """
    Graph, walk and embedding in one call.

    States are truncated before fitting when the graph has more than
    truncate_above nodes.

    Returns:
        (graph, states, embedding)
    """
    g = build_graph(features, k=k, similarity=similarity, normalize_rows=normalize_rows)
    states = lazy_random_walk(g, restart_prob=restart_prob, tol=tol, max_iter=max_iter,
                              workers=workers)
    if g.n_nodes > truncate_above:
        states = truncate_states(states, truncate_threshold)
    return g, states, fit_embedding(states, opts=opts)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def embedding_to_csv(emb: Embedding, ids=None) -> str:
    """Columns: id, x_1..x_d, w_1..w_d."""
    n = emb.X.shape[0]
    ids = np.arange(n) if ids is None else np.asarray(ids)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(['id'] + [f'x_{j + 1}' for j in range(emb.dim)]
                    + [f'w_{j + 1}' for j in range(emb.dim)])
    for i in range(n):
        writer.writerow([str(ids[i])] + ['%.17g' % v for v in emb.X[i]]
                        + ['%.17g' % v for v in emb.W[i]])
    return buf.getvalue()


def graph_to_edge_csv(g: DiffusionGraph) -> str:
    """Edge list with columns src, dst, weight, prob."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(['src', 'dst', 'weight', 'prob'])
    P = g.transition
    for src in range(g.n_nodes):
        probs = dict(zip(P.indices[P.indptr[src]:P.indptr[src + 1]],
                         P.data[P.indptr[src]:P.indptr[src + 1]]))
        for dst, weight in zip(g.neighbors[src], g.weights[src]):
            writer.writerow([src, int(dst), '%.17g' % weight, '%.17g' % probs.get(dst, 0.0)])
    return buf.getvalue()
