"""Frozen-encoder probe protocol and the metric suite.

The encoder is never updated here: features are extracted once, a probe
is trained on them with class-weighted cross-entropy, and the epoch with
the best validation macro F1 wins (ties go to the earliest). Metrics are
computed in float64. The severity-ordering score quantifies what the
method is supposed to produce geometrically: cosine distance to the
normal-class anchor should grow with severity, measured by Spearman rank
correlation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import DataSplits, Dataset
from .losses import estimate_class_weights, weighted_cross_entropy
from .model import ModelParams, ProbeConfig, ProbeParams
from .optim import SgdMomentum
from .rng import Xoshiro256, derive_seed

_POWER_TOL = 1e-9
_POWER_MAX_ITERS = 10_000


def encoder_features(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Frozen forward through the encoder only: [N, D] -> [N, Z]."""
    if features.shape[0] == 0:
        return np.empty((0, params.dims.embed_dim), dtype=np.float32)
    return params.encode(Tensor(features)).data.copy()


@dataclass(frozen=True)
class ProbeTrainConfig:
    kind: str = "linear"
    hidden_dim: int = 64
    dropout: float = 0.1
    epochs: int = 60
    lr: float = 1e-2
    batch_size: int = 16
    momentum: float = 0.9
    seed: int = 2

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("probe epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("probe batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("probe lr must be >= 0")


@dataclass
class ProbeResult:
    probe: ProbeParams
    best_epoch: int  # 1-based
    val_f1_history: list[float]


def train_probe(
    params: ModelParams, train_ds: Dataset, val_ds: Dataset, cfg: ProbeTrainConfig
) -> ProbeResult:
    """Train a severity classifier on frozen encoder features.

    Class weights come from the train split and require every class to be
    present there. Model selection: highest validation macro F1, earliest
    epoch on ties.
    """
    if train_ds.n_samples == 0 or val_ds.n_samples == 0:
        raise ValueError("probe training needs nonempty train and val splits")
    n_classes = train_ds.n_classes
    labels = train_ds.severities.astype(np.int64)
    weights = estimate_class_weights(labels, n_classes)
    feats_train = encoder_features(params, train_ds.features)
    feats_val = encoder_features(params, val_ds.features)
    val_labels = val_ds.severities.astype(np.int64)

    probe = ProbeParams(
        in_dim=feats_train.shape[1],
        n_classes=n_classes,
        config=ProbeConfig(kind=cfg.kind, hidden_dim=cfg.hidden_dim, dropout=cfg.dropout),
        seed=cfg.seed,
    )
    opt = SgdMomentum(probe.tensors, cfg.lr, cfg.momentum)
    dropout_rng = Xoshiro256(derive_seed(cfg.seed, "probe-dropout"))

    best_f1 = -1.0
    best_epoch = 0
    best_state: dict[str, np.ndarray] = {}
    history: list[float] = []
    n = feats_train.shape[0]
    for epoch in range(cfg.epochs):
        order = list(range(n))
        Xoshiro256(derive_seed(cfg.seed, "probe-shuffle", epoch)).shuffle(order)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            logits = probe.forward(Tensor(feats_train[idx]), train=True, rng=dropout_rng)
            loss = weighted_cross_entropy(logits, labels[idx], weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
        preds = predict(probe, feats_val)
        f1 = macro_f1(confusion_matrix(val_labels, preds, n_classes))
        history.append(f1)
        if f1 > best_f1:
            best_f1 = f1
            best_epoch = epoch + 1
            best_state = {k: t.data.copy() for k, t in probe.tensors.items()}
    for name, arr in best_state.items():
        probe.tensors[name].data = arr
    return ProbeResult(probe=probe, best_epoch=best_epoch, val_f1_history=history)


def predict(probe: ProbeParams, features: np.ndarray) -> np.ndarray:
    logits = probe.forward(Tensor(features), train=False).data
    return np.argmax(logits, axis=1).astype(np.int64)


# -- metrics ---------------------------------------------------------------------


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> np.ndarray:
    """counts[t][p] = number of samples with true label t predicted as p."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("prediction and label arrays differ in length")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    if y_true.size == 0:
        return counts
    if y_true.min() < 0 or y_true.max() >= n_classes:
        raise ValueError("true label out of range")
    if y_pred.min() < 0 or y_pred.max() >= n_classes:
        raise ValueError("predicted label out of range")
    np.add.at(counts, (y_true, y_pred), 1)
    return counts


def _per_class_stats(confusion: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    conf = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(conf)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    precision = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    recall = np.divide(tp, tp + fn, out=np.zeros_like(tp), where=(tp + fn) > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def macro_f1(confusion: np.ndarray) -> float:
    """Unweighted mean of per-class F1; a class with no true and no
    predicted samples contributes 0."""
    _, _, f1 = _per_class_stats(confusion)
    return float(f1.mean())


def macro_recall(confusion: np.ndarray) -> float:
    _, recall, _ = _per_class_stats(confusion)
    return float(recall.mean())


def mae(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.size == 0:
        raise ValueError("mae of an empty prediction set")
    return float(np.abs(y_true - y_pred).mean())


def maee(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Mean exponential absolute error: mean of e^|y - yhat|; 1.0 iff perfect."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.size == 0:
        raise ValueError("maee of an empty prediction set")
    return float(np.exp(np.abs(y_true - y_pred)).mean())


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    sorted_v = v[order]
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Rank correlation with average-rank ties.

    Returns (rho, degenerate); rho is defined as 0 when either side has
    zero rank variance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("spearman_rho expects two equal-length 1-D arrays")
    if a.size < 2:
        raise ValueError("spearman_rho needs at least 2 observations")
    ra = average_ranks(a)
    rb = average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0.0:
        return 0.0, True
    return float((ra * rb).sum() / denom), False


def cosine_distances_to(rows: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Float64 cosine distances from each row to a single anchor vector."""
    rows = np.asarray(rows, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64).reshape(-1)
    anchor_norm = np.linalg.norm(anchor)
    row_norms = np.linalg.norm(rows, axis=1)
    if anchor_norm == 0.0 or np.any(row_norms == 0.0):
        raise ValueError("zero-norm vector; cosine distance undefined")
    return 1.0 - (rows @ anchor) / (row_norms * anchor_norm)


def normal_anchor(embeddings: np.ndarray, severities: np.ndarray) -> np.ndarray:
    """Evaluation anchor: mean embedding of every normal sample given."""
    mask = np.asarray(severities) == 0
    if not mask.any():
        raise ValueError("no normal samples to anchor on")
    return np.asarray(embeddings, dtype=np.float64)[mask].mean(axis=0)


def ordering_score(
    embeddings: np.ndarray, severities: np.ndarray, anchor: np.ndarray
) -> tuple[float, bool]:
    """Spearman correlation between severity and distance-to-anchor.

    The claim under test: a well-shaped space puts higher severities
    farther from normality. Degenerate distance sets yield (0, True).
    """
    severities = np.asarray(severities, dtype=np.int64)
    if np.unique(severities).size < 2:
        raise ValueError("ordering score needs >= 2 distinct severity levels")
    distances = cosine_distances_to(embeddings, anchor)
    return spearman_rho(severities.astype(np.float64), distances)


# -- 2-D projection ----------------------------------------------------------------


def _orthogonal_unit(v: np.ndarray) -> np.ndarray:
    for i in range(v.size):
        candidate = np.zeros_like(v)
        candidate[i] = 1.0
        candidate -= (candidate @ v) * v
        norm = np.linalg.norm(candidate)
        if norm > 1e-12:
            return candidate / norm
    raise ValueError("could not construct an orthogonal direction")


def _power_iterate(cov: np.ndarray, previous: list[np.ndarray]) -> tuple[np.ndarray, float]:
    d = cov.shape[0]
    v = np.full(d, 1.0 / np.sqrt(d), dtype=np.float64)
    for _ in range(_POWER_MAX_ITERS):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm < 1e-30:
            # Remaining spectrum is numerically zero; any orthogonal
            # direction completes the basis with eigenvalue 0.
            v = _orthogonal_unit(previous[0]) if previous else v
            return v, 0.0
        w /= norm
        if w @ v < 0:
            w = -w
        if np.linalg.norm(w - v) < _POWER_TOL:
            v = w
            break
        v = w
    eigenvalue = float(v @ cov @ v)
    return v, max(eigenvalue, 0.0)


def pca_project2d(embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean-centered projection onto the top-2 principal directions.

    Power iteration with deflation; each direction is sign-fixed so its
    first nonzero loading is positive. Returns (coords [N,2],
    explained-variance fractions [2]).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("pca_project2d needs >= 3 points")
    if x.shape[1] < 2:
        raise ValueError("pca_project2d needs dimension >= 2")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    total = float(np.trace(cov))
    if total <= 0.0:
        raise ValueError("rank-0 data: all points identical")
    directions: list[np.ndarray] = []
    eigenvalues: list[float] = []
    work = cov.copy()
    for _ in range(2):
        v, lam = _power_iterate(work, directions)
        nonzero = np.flatnonzero(v != 0.0)
        if nonzero.size and v[nonzero[0]] < 0:
            v = -v
        directions.append(v)
        eigenvalues.append(lam)
        work = work - lam * np.outer(v, v)
    basis = np.stack(directions, axis=1)
    coords = centered @ basis
    explained = np.array(eigenvalues, dtype=np.float64) / total
    return coords, explained


# -- orchestration -----------------------------------------------------------------


@dataclass
class MetricsReport:
    macro_f1: float
    recall: float
    mae: float
    maee: float
    ordering_rho: float
    ordering_degenerate: bool
    confusion: np.ndarray
    probe_best_epoch: int
    probe_val_f1: list[float]

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("macro_f1", self.macro_f1),
            ("recall", self.recall),
            ("mae", self.mae),
            ("maee", self.maee),
            ("ordering_rho", self.ordering_rho),
        ]


def evaluate_model(params: ModelParams, splits: DataSplits, probe_cfg: ProbeTrainConfig) -> MetricsReport:
    """Full protocol: probe with validation selection, then test metrics."""
    if splits.test.n_samples == 0:
        raise ValueError("test split is empty")
    result = train_probe(params, splits.train, splits.val, probe_cfg)
    test = splits.test
    feats = encoder_features(params, test.features)
    labels = test.severities.astype(np.int64)
    preds = predict(result.probe, feats)
    conf = confusion_matrix(labels, preds, test.n_classes)

    anchor = normal_anchor(feats, test.severities)
    abnormal = test.severities > 0
    if np.unique(test.severities[abnormal]).size >= 2:
        rho, degenerate = ordering_score(feats[abnormal], test.severities[abnormal], anchor)
    else:
        rho, degenerate = float("nan"), True
    return MetricsReport(
        macro_f1=macro_f1(conf),
        recall=macro_recall(conf),
        mae=mae(labels, preds),
        maee=maee(labels, preds),
        ordering_rho=rho,
        ordering_degenerate=degenerate,
        confusion=conf,
        probe_best_epoch=result.best_epoch,
        probe_val_f1=result.val_f1_history,
    )


@dataclass
class EmbeddingTable:
    """Rows behind the embedding export and the scatter plot."""

    subject_ids: np.ndarray
    severities: np.ndarray
    dist_to_anchor: np.ndarray
    coords: np.ndarray  # [N, 2]
    embeddings: np.ndarray  # [N, Z]
    explained: np.ndarray  # [2]


def embedding_table(params: ModelParams, test: Dataset) -> EmbeddingTable:
    if test.n_samples < 3:
        raise ValueError("embedding export needs >= 3 test samples")
    feats = encoder_features(params, test.features)
    anchor = normal_anchor(feats, test.severities)
    dists = cosine_distances_to(feats, anchor)
    coords, explained = pca_project2d(feats)
    return EmbeddingTable(
        subject_ids=test.subject_ids.copy(),
        severities=test.severities.copy(),
        dist_to_anchor=dists,
        coords=coords,
        embeddings=feats,
        explained=explained,
    )
