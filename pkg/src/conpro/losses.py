"""Objectives: margin contrastive, anchored preference ranking, weighted CE.

Everything here builds graphs out of the core op vocabulary so a single
backward() covers the whole model. Distances are cosine distances,
d(a, b) = 1 - cos_sim(a, b), which live in [0, 2]; that boundedness is
what makes the log/sigmoid compositions below numerically safe.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, reciprocal_pos


class ZeroNormError(ValueError):
    """Cosine distance is undefined for a zero-length vector."""


def _rowwise_norms(x: Tensor) -> Tensor:
    norms = x.l2norm(axis=1)
    if np.any(norms.data == 0.0):
        raise ZeroNormError("zero-norm row; cosine distance undefined")
    return norms


def cosine_distance_rows(a: Tensor, b: Tensor) -> Tensor:
    """Per-row 1 - cos_sim between a [B,C] and b [B,C] or [1,C]."""
    dot = (a * b).sum(axis=1)
    denom = _rowwise_norms(a) * _rowwise_norms(b)
    sim = dot * reciprocal_pos(denom)
    return Tensor(1.0) - sim


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """Scalar cosine distance between two 1-D vectors."""
    dot = (a * b).sum()
    na = a.l2norm()
    nb = b.l2norm()
    if na.data == 0.0 or nb.data == 0.0:
        raise ZeroNormError("zero-norm vector; cosine distance undefined")
    return Tensor(1.0) - dot * reciprocal_pos(na * nb)


def margin_contrastive_loss(
    emb_a: Tensor,
    emb_b: Tensor,
    same_class: np.ndarray,
    margin: float = 2.0,
) -> Tensor:
    """Mean over pairs of: d if same class, else max(0, margin - d).

    `same_class` is a boolean/0-1 vector over the batch; with cosine
    distance capped at 2, margin 2 pushes cross-class pairs toward
    antipodal embeddings.
    """
    if not 0.0 < margin <= 2.0:
        raise ValueError(f"margin must be in (0, 2], got {margin}")
    same = np.asarray(same_class, dtype=np.float32).reshape(-1)
    if same.shape[0] != emb_a.shape[0]:
        raise ValueError(f"label count {same.shape[0]} != batch size {emb_a.shape[0]}")
    if not np.all((same == 0.0) | (same == 1.0)):
        raise ValueError("same_class entries must be 0 or 1")
    d = cosine_distance_rows(emb_a, emb_b)
    push = (Tensor(np.full(d.shape, margin, dtype=np.float32)) - d).relu()
    terms = Tensor(same) * d + Tensor(1.0 - same) * push
    return terms.mean()


def preference_logits(
    pref_emb: Tensor,
    disp_emb: Tensor,
    anchor: Tensor,
) -> Tensor:
    """Per-pair score d(dispreferred, anchor) - d(preferred, anchor).

    Positive means the pair is ranked correctly: the less severe member
    sits closer to the normal anchor.
    """
    d_pref = cosine_distance_rows(pref_emb, anchor)
    d_disp = cosine_distance_rows(disp_emb, anchor)
    return d_disp - d_pref


def preference_nll_loss(pref_emb: Tensor, disp_emb: Tensor, anchor: Tensor) -> Tensor:
    """Mean negative log-likelihood -log sigmoid(logit) over pairs.

    Logits are differences of cosine distances, so they stay in [-2, 2]
    and sigmoid never saturates to 0; log is safe.
    """
    p = preference_logits(pref_emb, disp_emb, anchor).sigmoid()
    return -(p.log().mean())


def preference_accuracy(pref_emb: Tensor, disp_emb: Tensor, anchor: Tensor) -> float:
    """Fraction of pairs already ordered correctly (telemetry, no grad)."""
    logits = preference_logits(pref_emb, disp_emb, anchor)
    return float(np.mean(logits.data > 0.0))


def estimate_class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Inverse-frequency weights, renormalized to mean 1.

    Raises if any of the n_classes labels is absent: a class the probe
    never sees cannot be weighted into existence.
    """
    labels = np.asarray(labels)
    if n_classes < 2:
        raise ValueError(f"need >= 2 classes, got {n_classes}")
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    if counts.shape[0] > n_classes:
        raise ValueError(f"label {labels.max()} out of range for {n_classes} classes")
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValueError(f"classes absent from training labels: {missing.tolist()}")
    w = labels.shape[0] / (n_classes * counts)
    w *= n_classes / w.sum()
    return w.astype(np.float32)


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray, class_weights: np.ndarray) -> Tensor:
    """Mean over the batch of w[y_i] * (-log softmax(logits)_i[y_i]).

    The log-softmax subtracts each row's max as a detached constant;
    the shift cancels exactly in exact arithmetic, so the gradient is
    untouched while exp stays in range.
    """
    labels = np.asarray(labels)
    batch, n_classes = logits.shape
    if labels.shape[0] != batch:
        raise ValueError(f"label count {labels.shape[0]} != batch size {batch}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label out of range")

    row_max = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = logits - row_max
    # Row sums via a constant ones column keep the result 2-D for broadcasting.
    sum_exp = shifted.exp() @ Tensor(np.ones((n_classes, 1), dtype=np.float32))
    log_probs = shifted - sum_exp.log()

    onehot = np.zeros((batch, n_classes), dtype=np.float32)
    onehot[np.arange(batch), labels] = 1.0
    picked = (log_probs * Tensor(onehot)).sum(axis=1)
    w = np.asarray(class_weights, dtype=np.float32)[labels]
    return -((Tensor(w) * picked).mean())
