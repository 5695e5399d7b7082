"""
Final-stage classifiers.

Features:
- One-vs-rest linear SVM (hinge loss, seeded dual coordinate descent)
- Internal feature standardization folded back into the stored weights
- Lazy-random-walk label propagation from seed nodes
- JSON model export
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn import svm
from sklearn.exceptions import ConvergenceWarning

from src.errors import ConfigError, DataShapeError
from src.tdca import DiffusionGraph, DiffusionStates, lazy_random_walk

logger = logging.getLogger('RobustLasso.Classify')

UNLABELED = -1


@dataclass(frozen=True, eq=False)
class LinearModel:
    """
    One weight row per class; the last column is the bias.

    Weights act on raw (unstandardized) features.
    """
    weights: np.ndarray = field(repr=False)
    classes: tuple
    reg_c: float
    n_features: int

    def __post_init__(self):
        if self.weights.shape != (len(self.classes), self.n_features + 1):
            raise DataShapeError(
                f"weights {self.weights.shape} do not match {len(self.classes)} classes "
                f"x {self.n_features + 1} columns"
            )
        if not np.all(np.isfinite(self.weights)):
            raise DataShapeError("model weights must be finite")


def _binary_svm(Z: np.ndarray, targets: np.ndarray, reg_c: float, max_iter: int,
                seed: int) -> np.ndarray:
    """Hinge-loss linear SVM for one class against the rest; returns [w, b]."""
    svc = svm.LinearSVC(loss='hinge', dual=True, C=reg_c, max_iter=max_iter,
                        random_state=seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always', ConvergenceWarning)
        svc.fit(Z, targets)
    if any(issubclass(w.category, ConvergenceWarning) for w in caught):
        logger.warning(f"Linear SVM stopped at max_iter={max_iter} before converging")
    return np.concatenate([svc.coef_.ravel(), svc.intercept_])


def train_linear(features, class_ids, reg_c: float = 1.0, max_iter: int = 1000,
                 seed: int = 0) -> LinearModel:
    """
    Train a one-vs-rest linear SVM with L2-regularized hinge loss.

    Each class model is solved by seeded dual coordinate descent (at most
    max_iter passes over the data), so training is deterministic.

    Raises:
        ConfigError: reg_c <= 0, max_iter < 1 or fewer than two classes
        DataShapeError: features and class ids disagree in length
    """
    features = np.asarray(features, dtype=float)
    class_ids = np.asarray(class_ids).ravel()
    if features.ndim != 2:
        raise DataShapeError(f"features must be a 2-D matrix, got {features.ndim}-D")
    if features.shape[0] != class_ids.shape[0]:
        raise DataShapeError(f"{features.shape[0]} feature rows but {class_ids.shape[0]} class ids")
    if reg_c <= 0:
        raise ConfigError("regularization must be positive")
    if max_iter < 1:
        raise ConfigError(f"max_iter must be at least 1, got {max_iter}")
    classes = np.unique(class_ids)
    if len(classes) < 2:
        raise ConfigError(f"need at least two classes to train, got {len(classes)}")

    n, p = features.shape
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (features - mu) / sd

    rows = []
    for c in classes:
        targets = np.where(class_ids == c, 1, -1)
        w = _binary_svm(Z, targets, reg_c, max_iter, seed)
        scaled = w[:p] / sd
        rows.append(np.concatenate([scaled, [w[p] - scaled @ mu]]))

    logger.debug(f"Trained linear model: {len(classes)} classes, n={n}, p={p}, C={reg_c}")
    return LinearModel(weights=np.vstack(rows), classes=tuple(classes.tolist()),
                       reg_c=float(reg_c), n_features=p)


def class_scores(model: LinearModel, features) -> np.ndarray:
    """n x K matrix of per-class decision values."""
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features.reshape(1, -1)
    if features.shape[1] != model.n_features:
        raise DataShapeError(f"model expects {model.n_features} features, got {features.shape[1]}")
    return features @ model.weights[:, :-1].T + model.weights[:, -1]


def predict(model: LinearModel, features) -> np.ndarray:
    """Highest-scoring class; ties go to the lowest class id."""
    scores = class_scores(model, features)
    return np.asarray(model.classes)[np.argmax(scores, axis=1)]


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise DataShapeError(f"{pred.shape[0]} predictions for {truth.shape[0]} labels")
    if pred.size == 0:
        raise DataShapeError("accuracy of an empty prediction set is undefined")
    return float(np.mean(pred == truth))


def lrw_propagate(g: DiffusionGraph, seed_labels, restart_prob: float = 0.5,
                  states: DiffusionStates = None, tol: float = 1e-10,
                  max_iter: int = 10000) -> np.ndarray:
    """
    Label every node by lazy-random-walk mass on each class's seeds.

    score(k, c) = sum of s_k over seeds of class c, divided by the number of
    such seeds. Seeded nodes keep their own label.

    Args:
        g: graph over all nodes
        seed_labels: class id per node, UNLABELED (-1) for unseeded nodes
        states: precomputed diffusion states (computed from g when None)
    """
    seed_labels = np.asarray(seed_labels).ravel()
    if seed_labels.shape[0] != g.n_nodes:
        raise DataShapeError(f"graph has {g.n_nodes} nodes but {seed_labels.shape[0]} seed labels")
    seeded = seed_labels != UNLABELED
    if not seeded.any():
        raise ConfigError("label propagation needs at least one seed")
    if states is None:
        states = lazy_random_walk(g, restart_prob=restart_prob, tol=tol, max_iter=max_iter)

    classes = np.unique(seed_labels[seeded])
    scores = np.zeros((g.n_nodes, len(classes)))
    for i, c in enumerate(classes):
        members = np.flatnonzero(seed_labels == c)
        scores[:, i] = states.S[:, members].sum(axis=1) / len(members)

    labels = classes[np.argmax(scores, axis=1)]
    labels[seeded] = seed_labels[seeded]
    return labels


def model_to_json(model: LinearModel) -> dict:
    return {
        'classes': list(model.classes),
        'weights': model.weights.tolist(),
        'reg_c': model.reg_c,
        'n_features': model.n_features,
    }


def model_from_json(doc: dict) -> LinearModel:
    try:
        weights = np.asarray(doc['weights'], dtype=float)
        return LinearModel(weights=weights, classes=tuple(doc['classes']),
                           reg_c=float(doc['reg_c']),
                           n_features=int(doc.get('n_features', weights.shape[1] - 1)))
    except KeyError as e:
        raise ConfigError(f"model document is missing {e.args[0]!r}") from None
