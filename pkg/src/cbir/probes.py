"""Embedding-space probes: kNN classification and a linear softmax probe.

Both probes consume the same normalized vectors the retrieval index stores.
kNN predicts by unweighted majority over the top-k neighbors (ties: larger
summed similarity, then lower class id), so with k=1 its accuracy is
exactly top-1 retrieval precision. The linear probe is a single dense
layer trained from scratch with softmax cross-entropy and AdamW (decoupled
weight decay, never applied to the bias), early-stopped on validation
loss. Scoring is F1 and average precision, micro and macro.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import batch_top_n, top_n
from .errors import (
    DimensionMismatch,
    EmptyValidationSet,
    KTooLarge,
    LengthMismatch,
    NonFiniteLoss,
    NoPositives,
    SingleClass,
)
from .store import VectorIndex

DEFAULT_K_GRID = (1, 3, 5, 11, 21, 51, 101)


@dataclass(frozen=True)
class KnnConfig:
    k_grid: tuple[int, ...] = DEFAULT_K_GRID

    def __post_init__(self):
        grid = tuple(int(k) for k in self.k_grid)
        if not grid:
            raise ValueError("k_grid must be non-empty")
        if grid[0] < 1:
            raise ValueError("k values must be >= 1")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError(f"k_grid must be strictly increasing, got {grid}")
        object.__setattr__(self, "k_grid", grid)


@dataclass(frozen=True)
class LinearProbeConfig:
    epochs: int = 100
    early_stopping_patience: int = 20
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.early_stopping_patience < self.epochs:
            raise ValueError("early_stopping_patience must be in [0, epochs)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay >= 0")


@dataclass
class TrainingHistory:
    """Per-epoch losses; epoch numbers are 1-based in serialized form."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def rows(self) -> list[tuple[int, float, float]]:
        return [
            (i + 1, t, v)
            for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss))
        ]


@dataclass(frozen=True)
class ProbeScores:
    f1_micro: float
    f1_macro: float
    auprc_micro: float
    auprc_macro: float

    def as_dict(self) -> dict:
        return {
            "f1_micro": self.f1_micro,
            "f1_macro": self.f1_macro,
            "auprc_micro": self.auprc_micro,
            "auprc_macro": self.auprc_macro,
        }


@dataclass(frozen=True)
class ProbeReport:
    knn_best_k: int
    knn: ProbeScores
    linear: ProbeScores
    history: TrainingHistory

    def as_dict(self) -> dict:
        return {
            "knn": {"best_k": self.knn_best_k, **self.knn.as_dict()},
            "linear": {
                **self.linear.as_dict(),
                "best_epoch": self.history.best_epoch,
                "stopped_epoch": self.history.stopped_epoch,
            },
        }


def _vote(
    labels: np.ndarray, sims: np.ndarray, n_classes: int
) -> tuple[int, np.ndarray]:
    """Majority vote over one query's neighbors.

    Returns the winning class id and the per-class score vector (summed
    similarity share, the AUPRC ranking signal).
    """
    counts = np.bincount(labels, minlength=n_classes)
    sums = np.bincount(labels, weights=sims, minlength=n_classes)
    top = counts.max()
    tied = np.flatnonzero(counts == top)
    if tied.size > 1:
        best_sum = sums[tied].max()
        tied = tied[sums[tied] == best_sum]
    pred = int(tied[0])
    total = sums.sum()
    scores = sums / total if abs(total) > 1e-12 else np.zeros_like(sums)
    return pred, scores


def knn_classify(
    query, index: VectorIndex, k: int
) -> tuple[int, np.ndarray]:
    """Predict one query's class from its k nearest index entries.

    Raises:
        KTooLarge: k exceeds the index size.
        EmptyIndex, DimensionMismatch, NormViolation: from the search.
    """
    if k > index.count:
        raise KTooLarge(f"k={k} exceeds index count {index.count}")
    result = top_n(query, index, k)
    pos = np.array([index.position_of(h.record_id) for h in result.hits])
    labels = index.labels[pos]
    sims = np.array([h.similarity for h in result.hits], dtype=np.float64)
    return _vote(labels, sims, len(index.class_table))


def _neighbor_arrays(
    queries: np.ndarray, index: VectorIndex, k: int, workers: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Labels and similarities of the top-k neighbors for every query row."""
    pairs = [(i, q) for i, q in enumerate(queries)]
    results = batch_top_n(pairs, index, k, exclude_self=False, workers=workers)
    labels = np.empty((len(results), k), dtype=np.int64)
    sims = np.empty((len(results), k), dtype=np.float64)
    for i, res in enumerate(results):
        for j, hit in enumerate(res.hits):
            labels[i, j] = index.label_of(hit.record_id)
            sims[i, j] = hit.similarity
    return labels, sims


def knn_predict_batch(
    queries, index: VectorIndex, k: int, workers: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized knn_classify: (predictions, per-class score matrix)."""
    queries = np.ascontiguousarray(queries, dtype=np.float32)
    if k > index.count:
        raise KTooLarge(f"k={k} exceeds index count {index.count}")
    labels, sims = _neighbor_arrays(queries, index, k, workers)
    n_classes = len(index.class_table)
    preds = np.empty(queries.shape[0], dtype=np.int64)
    scores = np.empty((queries.shape[0], n_classes), dtype=np.float64)
    for i in range(queries.shape[0]):
        preds[i], scores[i] = _vote(labels[i], sims[i], n_classes)
    return preds, scores


def select_k(
    index: VectorIndex,
    val_queries,
    val_labels,
    config: KnnConfig = KnnConfig(),
    workers: int = 1,
) -> int:
    """The k from the grid with the best macro F1 on the validation set.

    Retrieves top-max(k_grid) once per query and votes on prefixes, which
    matches separate per-k searches because top-k lists are prefixes of
    top-(k+1) lists. Ties go to the smaller k.

    Raises:
        EmptyValidationSet, KTooLarge.
    """
    val_queries = np.ascontiguousarray(val_queries, dtype=np.float32)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    if val_queries.shape[0] == 0:
        raise EmptyValidationSet("select_k needs at least one validation query")
    if val_labels.shape[0] != val_queries.shape[0]:
        raise LengthMismatch("val_queries and val_labels must have equal length")
    k_max = config.k_grid[-1]
    if k_max > index.count:
        raise KTooLarge(f"k={k_max} exceeds index count {index.count}")
    labels, sims = _neighbor_arrays(val_queries, index, k_max, workers)
    n_classes = len(index.class_table)
    best_k, best_f1 = config.k_grid[0], -1.0
    for k in config.k_grid:
        preds = np.empty(val_labels.shape[0], dtype=np.int64)
        for i in range(val_labels.shape[0]):
            preds[i], _ = _vote(labels[i, :k], sims[i, :k], n_classes)
        _, macro = f1_scores(preds, val_labels)
        if macro > best_f1:
            best_k, best_f1 = k, macro
    return best_k


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


def _ce_loss_and_grad(
    weights: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy and its analytic gradient (no decay term)."""
    logits = x @ weights.T + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(y.size), y]))
    probs = _softmax(logits)
    probs[np.arange(y.size), y] -= 1.0
    probs /= y.size
    return loss, probs.T @ x, probs.sum(axis=0)


def _adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    config: LinearProbeConfig,
    decay: bool,
) -> None:
    """One in-place AdamW update; decay is decoupled from the moments."""
    lr, b1, b2 = config.learning_rate, config.beta1, config.beta2
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * np.square(grad)
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    if decay and config.weight_decay:
        param -= lr * config.weight_decay * param
    param -= lr * m_hat / (np.sqrt(v_hat) + config.eps)


def _mean_ce(weights, bias, x, y) -> float:
    logits = x @ weights.T + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_z - shifted[np.arange(y.size), y]))


def train_linear_probe(
    train_x,
    train_y,
    val_x,
    val_y,
    config: LinearProbeConfig = LinearProbeConfig(),
    n_classes: int | None = None,
) -> tuple[np.ndarray, np.ndarray, TrainingHistory]:
    """Fit the probe and return the best-validation-epoch weights and bias.

    Mini-batch order reshuffles every epoch from the config seed, so a run
    is reproducible end to end. Training stops early once validation loss
    has not improved for early_stopping_patience consecutive epochs.

    Raises:
        SingleClass: fewer than two classes in train_y.
        EmptyValidationSet: empty val set (the stopping monitor needs one).
        NonFiniteLoss: loss diverged; the partial history rides along.
    """
    train_x = np.ascontiguousarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    val_x = np.ascontiguousarray(val_x, dtype=np.float64)
    val_y = np.asarray(val_y, dtype=np.int64)
    if train_x.shape[0] != train_y.shape[0] or val_x.shape[0] != val_y.shape[0]:
        raise LengthMismatch("vectors and labels must have equal length")
    if val_x.shape[0] == 0:
        raise EmptyValidationSet("early stopping needs a validation set")
    if np.unique(train_y).size < 2:
        raise SingleClass("linear probe needs at least two classes in train")
    if n_classes is None:
        n_classes = int(max(train_y.max(), val_y.max())) + 1

    dim = train_x.shape[1]
    weights = np.zeros((n_classes, dim))
    bias = np.zeros(n_classes)
    m_w, v_w = np.zeros_like(weights), np.zeros_like(weights)
    m_b, v_b = np.zeros_like(bias), np.zeros_like(bias)
    rng = np.random.default_rng(config.seed)
    history = TrainingHistory()
    best = (np.inf, weights.copy(), bias.copy())
    since_best = 0
    step = 0

    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(train_x.shape[0])
        epoch_loss = 0.0
        for start in range(0, perm.size, config.batch_size):
            batch = perm[start : start + config.batch_size]
            loss, g_w, g_b = _ce_loss_and_grad(
                weights, bias, train_x[batch], train_y[batch]
            )
            if not np.isfinite(loss):
                history.stopped_epoch = epoch
                raise NonFiniteLoss(
                    f"training loss became non-finite at epoch {epoch}",
                    history=history,
                )
            epoch_loss += loss * batch.size
            step += 1
            _adamw_step(weights, g_w, m_w, v_w, step, config, decay=True)
            _adamw_step(bias, g_b, m_b, v_b, step, config, decay=False)
        val_loss = _mean_ce(weights, bias, val_x, val_y)
        if not np.isfinite(val_loss):
            history.stopped_epoch = epoch
            raise NonFiniteLoss(
                f"validation loss became non-finite at epoch {epoch}",
                history=history,
            )
        history.train_loss.append(epoch_loss / perm.size)
        history.val_loss.append(val_loss)
        if val_loss < best[0]:
            best = (val_loss, weights.copy(), bias.copy())
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > config.early_stopping_patience:
                break
    history.stopped_epoch = len(history.val_loss)
    return best[1], best[2], history


def linear_predict(weights, bias, vectors) -> np.ndarray:
    """Softmax class probabilities, one row per input vector.

    Raises:
        DimensionMismatch.
    """
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vectors.shape[1] != weights.shape[1]:
        raise DimensionMismatch(
            f"vector dimension {vectors.shape[1]} != probe dimension {weights.shape[1]}"
        )
    return _softmax(vectors @ weights.T + bias)


def f1_scores(predictions, truths, n_classes: int | None = None) -> tuple[float, float]:
    """(micro F1, macro F1) for single-label multi-class predictions.

    Macro averages per-class F1 over classes appearing in either array,
    with empty-class 0/0 scored as 0. Micro aggregates TP/FP/FN globally,
    which for single-label data collapses to plain accuracy.

    Raises:
        LengthMismatch.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if predictions.shape != truths.shape or predictions.ndim != 1:
        raise LengthMismatch(
            f"predictions {predictions.shape} and truths {truths.shape} must be "
            "equal-length 1-D arrays"
        )
    if predictions.size == 0:
        raise LengthMismatch("cannot score empty prediction arrays")
    classes = np.union1d(predictions, truths)
    if n_classes is not None and classes.max(initial=0) >= n_classes:
        raise ValueError("class id out of range")
    tp_total = fp_total = fn_total = 0
    per_class: list[float] = []
    for c in classes:
        tp = int(np.sum((predictions == c) & (truths == c)))
        fp = int(np.sum((predictions == c) & (truths != c)))
        fn = int(np.sum((predictions != c) & (truths == c)))
        tp_total += tp
        fp_total += fp
        fn_total += fn
        denom = 2 * tp + fp + fn
        per_class.append(2 * tp / denom if denom else 0.0)
    micro_denom = 2 * tp_total + fp_total + fn_total
    micro = 2 * tp_total / micro_denom if micro_denom else 0.0
    return micro, float(np.mean(per_class))


def _average_precision(positives: np.ndarray, scores: np.ndarray) -> float | None:
    """Step-wise AP: mean precision at each positive's rank; None if no positives.

    Ranking sorts by descending score with ties resolved by ascending
    sample index (stable sort on the negated scores).
    """
    if not positives.any():
        return None
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.cumsum(hits)[ranks - 1] / ranks
    return float(np.mean(precision))


def auprc_scores(scores, truths, n_classes: int | None = None) -> tuple[float, float]:
    """(micro AUPRC, macro AUPRC) from a per-class score matrix.

    Macro: one-vs-rest AP per class with at least one positive, averaged
    without weights. Micro: AP over all (sample, class) pairs flattened in
    sample-major order.

    Raises:
        LengthMismatch, NoPositives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != truths.shape[0]:
        raise LengthMismatch(
            f"score matrix {scores.shape} does not align with {truths.shape[0]} truths"
        )
    if n_classes is not None and scores.shape[1] != n_classes:
        raise ValueError(f"expected {n_classes} score columns, got {scores.shape[1]}")
    width = scores.shape[1]
    if truths.size and (truths.min() < 0 or truths.max() >= width):
        raise ValueError("truth label out of range for the score matrix")
    aps = [
        ap
        for c in range(width)
        if (ap := _average_precision(truths == c, scores[:, c])) is not None
    ]
    if not aps:
        raise NoPositives("no class has a positive sample; AUPRC is undefined")
    onehot = np.zeros_like(scores, dtype=bool)
    onehot[np.arange(truths.size), truths] = True
    micro = _average_precision(onehot.ravel(), scores.ravel())
    return float(micro), float(np.mean(aps))


def run_probe_suite(
    index: VectorIndex,
    val_queries,
    val_labels,
    test_queries,
    test_labels,
    knn_config: KnnConfig = KnnConfig(),
    probe_config: LinearProbeConfig = LinearProbeConfig(),
    workers: int = 1,
) -> ProbeReport:
    """Full probe pass: tune k, score kNN on test, train and score the probe.

    The probe trains on the index vectors (the retrieval train split) and
    early-stops on the validation queries, so both probes see exactly the
    data the retrieval experiments use.
    """
    test_queries = np.ascontiguousarray(test_queries, dtype=np.float32)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    n_classes = len(index.class_table)

    best_k = select_k(index, val_queries, val_labels, knn_config, workers)
    knn_preds, knn_scores = knn_predict_batch(test_queries, index, best_k, workers)
    knn_f1_micro, knn_f1_macro = f1_scores(knn_preds, test_labels, n_classes)
    knn_ap_micro, knn_ap_macro = auprc_scores(knn_scores, test_labels, n_classes)

    weights, bias, history = train_linear_probe(
        index.vectors,
        index.labels,
        val_queries,
        val_labels,
        probe_config,
        n_classes=n_classes,
    )
    probs = linear_predict(weights, bias, test_queries)
    lin_preds = probs.argmax(axis=1)
    lin_f1_micro, lin_f1_macro = f1_scores(lin_preds, test_labels, n_classes)
    lin_ap_micro, lin_ap_macro = auprc_scores(probs, test_labels, n_classes)

    return ProbeReport(
        knn_best_k=best_k,
        knn=ProbeScores(knn_f1_micro, knn_f1_macro, knn_ap_micro, knn_ap_macro),
        linear=ProbeScores(lin_f1_micro, lin_f1_macro, lin_ap_micro, lin_ap_macro),
        history=history,
    )
