"""Probe protocol and metric arithmetic, with hand-worked and library oracles."""

import math

import numpy as np
import pytest

from conpro.data import DataSplits, Dataset, GenConfig, SplitSpec, generate_synthetic, split_by_subject
from conpro.evaluation import (
    EmbeddingTable,
    ProbeTrainConfig,
    average_ranks,
    confusion_matrix,
    cosine_distances_to,
    embedding_table,
    encoder_features,
    evaluate_model,
    macro_f1,
    macro_recall,
    mae,
    maee,
    normal_anchor,
    ordering_score,
    pca_project2d,
    spearman_rho,
    train_probe,
)
from conpro.model import ModelDims, ModelParams


@pytest.fixture(scope="module")
def splits():
    return split_by_subject(generate_synthetic(GenConfig()), SplitSpec(seed=2))


@pytest.fixture(scope="module")
def params():
    return ModelParams(ModelDims(), seed=2)


# --- confusion and f1 ---

def test_confusion_matrix_counts():
    conf = confusion_matrix([0, 0, 1, 2], [0, 1, 1, 2], 3)
    assert np.array_equal(conf, [[1, 1, 0], [0, 1, 0], [0, 0, 1]])
    assert np.array_equal(confusion_matrix([], [], 2), np.zeros((2, 2)))


def test_confusion_matrix_validation():
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(ValueError, match="true label"):
        confusion_matrix([0, 5], [0, 1], 2)
    with pytest.raises(ValueError, match="predicted"):
        confusion_matrix([0, 1], [0, 5], 2)


def test_macro_f1_hand_oracle():
    # per-class F1: 4/5, 2/3, 1 -> mean 37/45
    conf = np.asarray([[2, 0, 0], [1, 1, 0], [0, 0, 2]])
    assert abs(macro_f1(conf) - 37.0 / 45.0) <= 1e-9
    assert abs(macro_recall(conf) - 5.0 / 6.0) <= 1e-9


def test_macro_f1_perfect_and_empty_class():
    assert macro_f1(np.diag([3, 1, 2])) == 1.0
    # class 1 never occurs and is never predicted: contributes 0
    assert abs(macro_f1(np.asarray([[4, 0], [0, 0]])) - 0.5) <= 1e-12
    assert macro_f1(np.zeros((3, 3))) == 0.0


# --- regression-style errors ---

def test_mae_and_maee_oracles():
    assert mae([1, 2, 3], [1, 2, 3]) == 0.0
    assert maee([1, 2, 3], [1, 2, 3]) == 1.0
    assert abs(maee([0, 1, 2], [1, 2, 3]) - math.e) <= 1e-12
    assert abs(maee([0, 3], [0, 0]) - (1.0 + math.e**3) / 2.0) <= 1e-9
    assert mae([0, 3], [0, 0]) == 1.5
    with pytest.raises(ValueError):
        mae([], [])
    with pytest.raises(ValueError):
        maee([], [])


def test_maee_dominates_exp_of_mae():
    # Jensen: mean(e^|d|) >= e^mean(|d|)
    rng = np.random.default_rng(0)
    for _ in range(100):
        y = rng.integers(0, 6, size=20)
        p = rng.integers(0, 6, size=20)
        assert maee(y, p) >= math.exp(mae(y, p)) - 1e-12


# --- rank correlation ---

def test_average_ranks():
    assert np.array_equal(average_ranks([10.0, 20.0, 30.0]), [1.0, 2.0, 3.0])
    assert np.array_equal(average_ranks([1.0, 1.0, 2.0]), [1.5, 1.5, 3.0])
    assert np.array_equal(average_ranks([5.0, 5.0, 5.0, 5.0]), [2.5, 2.5, 2.5, 2.5])


def test_spearman_hand_oracle_with_tie():
    # ranks [1.5, 1.5, 3] vs [1, 2, 3]: rho = 1.5 / sqrt(3)
    rho, degenerate = spearman_rho(np.asarray([1.0, 1.0, 2.0]), np.asarray([0.1, 0.2, 0.3]))
    assert not degenerate
    assert abs(rho - 1.5 / math.sqrt(3.0)) <= 1e-12


def test_spearman_endpoints_and_degenerate():
    a = np.asarray([1.0, 2.0, 3.0, 4.0])
    assert spearman_rho(a, a * 10.0) == (1.0, False)
    assert spearman_rho(a, -a) == (-1.0, False)
    assert spearman_rho(a, np.ones(4)) == (0.0, True)
    with pytest.raises(ValueError):
        spearman_rho(a, a[:2])
    with pytest.raises(ValueError):
        spearman_rho(np.asarray([1.0]), np.asarray([2.0]))


def test_spearman_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 5, size=30)
    b = rng.uniform(0, 5, size=30)
    base, _ = spearman_rho(a, b)
    warped, _ = spearman_rho(a, np.exp(b))
    assert abs(base - warped) <= 1e-12


def test_spearman_matches_scipy_with_ties():
    stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = rng.integers(0, 4, size=25).astype(np.float64)
        b = rng.uniform(0, 1, size=25) + a * rng.uniform(0, 0.5)
        ours, _ = spearman_rho(a, b)
        theirs = stats.spearmanr(a, b).statistic
        assert abs(ours - theirs) <= 1e-10


# --- anchor geometry ---

def test_cosine_distances_to_oracle():
    rows = np.asarray([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    d = cosine_distances_to(rows, np.asarray([1.0, 0.0]))
    assert np.allclose(d, [0.0, 1.0, 2.0], atol=1e-12)
    with pytest.raises(ValueError):
        cosine_distances_to(np.zeros((1, 2)), np.asarray([1.0, 0.0]))
    with pytest.raises(ValueError):
        cosine_distances_to(rows, np.zeros(2))


def test_normal_anchor_means_only_normals():
    emb = np.asarray([[1.0, 0.0], [3.0, 0.0], [100.0, 100.0]])
    sev = np.asarray([0, 0, 2])
    assert np.array_equal(normal_anchor(emb, sev), [2.0, 0.0])
    with pytest.raises(ValueError, match="no normal"):
        normal_anchor(emb, np.asarray([1, 1, 2]))


def test_ordering_score_on_clean_geometry():
    # severity grows with angle from the anchor: perfect ordering
    angles = {1: 0.3, 2: 0.6, 3: 0.9}
    emb, sev = [], []
    for s, ang in angles.items():
        for jitter in (-0.02, 0.02):
            emb.append([math.cos(ang + jitter), math.sin(ang + jitter)])
            sev.append(s)
    rho, degenerate = ordering_score(np.asarray(emb), np.asarray(sev), np.asarray([1.0, 0.0]))
    assert not degenerate
    assert rho > 0.9


def test_ordering_score_degenerate_distances():
    emb = np.tile([0.6, 0.8], (4, 1))
    rho, degenerate = ordering_score(emb, np.asarray([1, 1, 2, 2]), np.asarray([1.0, 0.0]))
    assert degenerate and rho == 0.0
    with pytest.raises(ValueError, match="distinct severity"):
        ordering_score(emb, np.asarray([1, 1, 1, 1]), np.asarray([1.0, 0.0]))


# --- pca ---

def test_pca_recovers_dominant_axis():
    rng = np.random.default_rng(3)
    t = rng.uniform(-3, 3, size=40)
    u = np.asarray([1.0, 1.0, 0.0, 0.0]) / math.sqrt(2.0)
    x = np.outer(t, u) + rng.normal(0, 1e-3, size=(40, 4))
    coords, explained = pca_project2d(x)
    assert coords.shape == (40, 2)
    assert explained[0] > 0.999
    assert abs(abs(np.corrcoef(coords[:, 0], t)[0, 1]) - 1.0) <= 1e-4


def test_pca_matches_eigh_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(50, 6)) @ np.diag([3.0, 2.0, 1.0, 0.5, 0.2, 0.1])
    coords, explained = pca_project2d(x)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    top = evals[::-1][:2]
    assert np.allclose(explained, top / evals.sum(), atol=1e-8)
    for k in range(2):
        ref = centered @ evecs[:, ::-1][:, k]
        assert np.allclose(np.abs(coords[:, k]), np.abs(ref), atol=1e-6)


def test_pca_explained_is_a_fraction_pair():
    rng = np.random.default_rng(5)
    coords, explained = pca_project2d(rng.normal(size=(30, 5)))
    assert explained[0] >= explained[1] >= 0.0
    assert explained.sum() <= 1.0 + 1e-12


def test_pca_degenerate_second_axis():
    # strictly 1-D data; second direction has zero variance
    t = np.linspace(-1, 1, 10)
    x = np.outer(t, [2.0, 0.0, 0.0])
    coords, explained = pca_project2d(x)
    assert abs(explained[0] - 1.0) <= 1e-12
    assert abs(explained[1]) <= 1e-12
    assert np.allclose(coords[:, 1], 0.0, atol=1e-9)


def test_pca_validation():
    with pytest.raises(ValueError):
        pca_project2d(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        pca_project2d(np.zeros((5, 1)))
    with pytest.raises(ValueError, match="rank-0"):
        pca_project2d(np.ones((5, 3)))


# --- probe protocol ---

def test_probe_leaves_encoder_untouched(splits, params):
    before = {k: v.data.copy() for k, v in params.tensors.items()}
    train_probe(params, splits.train, splits.val, ProbeTrainConfig(epochs=2))
    for name, arr in before.items():
        assert np.array_equal(params[name].data, arr), name


def test_probe_selects_earliest_best_epoch(splits, params):
    result = train_probe(params, splits.train, splits.val, ProbeTrainConfig(epochs=8))
    history = result.val_f1_history
    assert len(history) == 8
    assert result.best_epoch == 1 + history.index(max(history))


def test_probe_is_deterministic(splits, params):
    cfg = ProbeTrainConfig(kind="mlp", epochs=3)
    a = train_probe(params, splits.train, splits.val, cfg)
    b = train_probe(params, splits.train, splits.val, cfg)
    assert a.val_f1_history == b.val_f1_history
    for name in a.probe.tensors:
        assert np.array_equal(a.probe.tensors[name].data, b.probe.tensors[name].data)


def test_probe_requires_every_class_in_train(params):
    rng = np.random.default_rng(6)
    partial = Dataset(
        features=rng.uniform(-1, 1, size=(8, 32)).astype(np.float32),
        severities=np.asarray([0, 0, 1, 1, 1, 2, 2, 2], dtype=np.uint8),
        subject_ids=np.arange(8, dtype=np.uint32),
        max_severity=5,  # classes 3..5 unrepresented
    )
    with pytest.raises(ValueError, match="absent"):
        train_probe(params, partial, partial, ProbeTrainConfig(epochs=1))


def test_probe_config_validation():
    with pytest.raises(ValueError):
        ProbeTrainConfig(epochs=0)
    with pytest.raises(ValueError):
        ProbeTrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        ProbeTrainConfig(lr=-1.0)


# --- full report ---

def test_evaluate_model_report_shape(splits, params):
    report = evaluate_model(params, splits, ProbeTrainConfig(epochs=4))
    names = [name for name, _ in report.rows()]
    assert names == ["macro_f1", "recall", "mae", "maee", "ordering_rho"]
    assert 0.0 <= report.macro_f1 <= 1.0
    assert 0.0 <= report.recall <= 1.0
    assert report.maee >= 1.0
    assert report.confusion.shape == (6, 6)
    assert int(report.confusion.sum()) == splits.test.n_samples
    assert report.probe_best_epoch >= 1
    assert not report.ordering_degenerate
    assert -1.0 <= report.ordering_rho <= 1.0


def test_evaluate_model_rejects_empty_test(splits, params):
    empty = Dataset(
        features=np.zeros((0, 32), dtype=np.float32),
        severities=np.zeros(0, dtype=np.uint8),
        subject_ids=np.zeros(0, dtype=np.uint32),
        max_severity=5,
    )
    broken = DataSplits(train=splits.train, val=splits.val, test=empty)
    with pytest.raises(ValueError, match="test split"):
        evaluate_model(params, broken, ProbeTrainConfig(epochs=1))


def test_embedding_table_rows(splits, params):
    table = embedding_table(params, splits.test)
    n = splits.test.n_samples
    assert isinstance(table, EmbeddingTable)
    assert table.coords.shape == (n, 2)
    assert table.embeddings.shape == (n, 64)
    assert table.dist_to_anchor.shape == (n,)
    assert np.all(table.dist_to_anchor >= -1e-12)
    assert np.array_equal(table.severities, splits.test.severities)


def test_embedding_table_needs_three_samples(params):
    tiny = Dataset(
        features=np.random.default_rng(7).uniform(-1, 1, size=(2, 32)).astype(np.float32),
        severities=np.asarray([0, 1], dtype=np.uint8),
        subject_ids=np.asarray([0, 1], dtype=np.uint32),
        max_severity=5,
    )
    with pytest.raises(ValueError, match=">= 3"):
        embedding_table(params, tiny)


def test_encoder_features_empty_input(params):
    out = encoder_features(params, np.zeros((0, 32), dtype=np.float32))
    assert out.shape == (0, 64)
