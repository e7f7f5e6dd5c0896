"""Acceptance gate: nine checks, each printing one PASS/FAIL line.

The slow checks share one training matrix: three method variants plus two
fixed-anchor ablation arms, each trained and evaluated on five seeds of
the default synthetic dataset.
"""

import math
import time

import numpy as np
import pytest

from conpro.autodiff import Tensor, finite_difference_grad
from conpro.data import (
    AnchorConfig,
    DatasetFormatError,
    GenConfig,
    SplitSpec,
    dataset_digest,
    datasets_equal,
    export_csv,
    generate_synthetic,
    import_csv,
    load_dataset,
    save_dataset,
    split_by_subject,
)
from conpro.evaluation import ProbeTrainConfig, evaluate_model, macro_f1, maee, mae, train_probe
from conpro.losses import (
    cosine_distance,
    margin_contrastive_loss,
    preference_nll_loss,
    weighted_cross_entropy,
)
from conpro.model import ModelDims, ModelParams
from conpro.rng import Xoshiro256
from conpro.trainer import (
    CheckpointFormatError,
    TrainConfig,
    Trainer,
    checkpoints_equal,
    load_checkpoint,
    save_checkpoint,
    train,
)

SEEDS = (2, 3, 4, 5, 6)

_VARIANTS = {
    "conpro": dict(mode="conpro"),
    "supcon2": dict(mode="supcon2"),
    "supconN": dict(mode="supconN"),
    "fixed-n1": dict(mode="conpro", anchor=AnchorConfig(1, resample_per_pair=False)),
    "fixed-n20": dict(mode="conpro", anchor=AnchorConfig(20, resample_per_pair=False)),
}


def _line(n: int, ok: bool, detail: str) -> bool:
    print(f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


@pytest.fixture(scope="module")
def matrix():
    """reports[(variant, seed)] plus wall times and one normal-embedding pool."""
    reports = {}
    walls = {}
    extras = {}
    for variant, kw in _VARIANTS.items():
        for seed in SEEDS:
            ds = generate_synthetic(GenConfig(seed=seed))
            cfg = TrainConfig(seed=seed, **kw)
            started = time.perf_counter()
            trainer = Trainer(cfg, ds, SplitSpec(seed=seed))
            trainer.train()
            report = evaluate_model(trainer.params, trainer.splits, ProbeTrainConfig(seed=seed))
            walls[(variant, seed)] = time.perf_counter() - started
            reports[(variant, seed)] = report
            if variant == "conpro" and seed == SEEDS[0]:
                normals = trainer.splits.train.normal_indices()
                rows = trainer.splits.train.features[normals]
                proj = trainer.params.project(trainer.params.encode(Tensor(rows)))
                extras["normal_proj"] = proj.data.astype(np.float64)
    return {"reports": reports, "walls": walls, **extras}


def _median(matrix, variant: str, field: str) -> float:
    vals = [getattr(matrix["reports"][(variant, s)], field) for s in SEEDS]
    return float(np.median(vals))


def _rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def test_1_gradients_match_finite_differences():
    started = time.perf_counter()
    worst = 0.0
    checked = 0
    # 5e-3 ~ cbrt(float32 eps): balances truncation against rounding; a
    # smaller step drowns low-magnitude gradients in subtraction noise
    epsilon = 5e-3
    for trial in range(21):
        rng = np.random.default_rng(100 + trial)
        batch = int(rng.integers(1, 5))
        dim = int(rng.integers(2, 17))
        kind = ("con", "pro", "wce")[trial % 3]
        if kind == "con":
            a = Tensor.param(rng.uniform(0.2, 1.0, size=(batch, dim)).astype(np.float32), "a")
            b = Tensor.param(rng.uniform(0.2, 1.0, size=(batch, dim)).astype(np.float32), "b")
            flags = rng.integers(0, 2, size=batch)
            params = {"a": a, "b": b}
            build = lambda: margin_contrastive_loss(a, b, flags)
        elif kind == "pro":
            pref = Tensor.param(rng.uniform(0.2, 1.0, size=(batch, dim)).astype(np.float32), "pref")
            disp = Tensor.param(rng.uniform(0.2, 1.0, size=(batch, dim)).astype(np.float32), "disp")
            anchor = Tensor.param(rng.uniform(0.2, 1.0, size=(1, dim)).astype(np.float32), "anchor")
            params = {"pref": pref, "disp": disp, "anchor": anchor}
            build = lambda: preference_nll_loss(pref, disp, anchor)
        else:
            classes = int(rng.integers(2, 7))
            logits = Tensor.param(
                rng.uniform(-1.0, 1.0, size=(batch, classes)).astype(np.float32), "logits"
            )
            labels = rng.integers(0, classes, size=batch)
            weights = rng.uniform(0.5, 2.0, size=classes)
            params = {"logits": logits}
            build = lambda: weighted_cross_entropy(logits, labels, weights)
        loss = build()
        loss.backward()
        analytic = {name: p.grad.copy() for name, p in params.items()}
        numeric = finite_difference_grad(lambda: build().item(), params, epsilon=epsilon)
        for name in params:
            worst = max(worst, _rel_err(analytic[name], numeric[name]))
        checked += 1
    elapsed = time.perf_counter() - started
    ok = checked >= 20 and worst <= 1e-3 and elapsed < 10.0
    assert _line(1, ok, f"{checked} random configs, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_2_loss_unit_values():
    x = Tensor(np.asarray([[0.0, 1.0]], dtype=np.float32))
    anchor = Tensor(np.asarray([[1.0, 0.0]], dtype=np.float32))
    nll0 = preference_nll_loss(x, x, anchor).item()

    e1 = Tensor(np.asarray([[1.0, 0.0]], dtype=np.float32))
    branch_same = margin_contrastive_loss(
        e1, Tensor(np.asarray([[0.6, 0.8]], dtype=np.float32)), [1]
    ).item()
    branch_far = margin_contrastive_loss(
        e1, Tensor(np.asarray([[-1.0, 0.0]], dtype=np.float32)), [0]
    ).item()
    branch_near = margin_contrastive_loss(
        e1, Tensor(np.asarray([[0.5, math.sqrt(0.75)]], dtype=np.float32)), [0]
    ).item()

    v = Tensor(np.asarray([1.0, 0.0], dtype=np.float32))
    d_same = cosine_distance(v, Tensor(np.asarray([2.0, 0.0], dtype=np.float32))).item()
    d_orth = cosine_distance(v, Tensor(np.asarray([0.0, 3.0], dtype=np.float32))).item()
    d_anti = cosine_distance(v, Tensor(np.asarray([-1.0, 0.0], dtype=np.float32))).item()

    checks = [
        abs(nll0 - math.log(2.0)) <= 1e-6,
        abs(branch_same - 0.4) <= 1e-6,
        abs(branch_far) <= 1e-6,
        abs(branch_near - 1.5) <= 1e-6,
        abs(d_same) <= 1e-6,
        abs(d_orth - 1.0) <= 1e-6,
        abs(d_anti - 2.0) <= 1e-6,
    ]
    ok = all(checks)
    assert _line(
        2, ok,
        f"-log sigmoid(0)={nll0:.7f}, margin branches ({branch_same:.6f}, "
        f"{branch_far:.6f}, {branch_near:.6f}), distances ({d_same:.1e}, {d_orth:.6f}, {d_anti:.6f})",
    )


def test_3_metric_oracles():
    perfect = maee([0, 1, 2, 3], [0, 1, 2, 3])
    off_by_one = maee([0, 1, 2, 3], [1, 2, 3, 4])
    f1 = macro_f1(np.asarray([[2, 0, 0], [1, 1, 0], [0, 0, 2]]))

    rng = np.random.default_rng(0)
    jensen_ok = True
    for _ in range(100):
        y = rng.integers(0, 6, size=15)
        p = rng.integers(0, 6, size=15)
        if maee(y, p) < math.exp(mae(y, p)) - 1e-12:
            jensen_ok = False
    ok = (
        perfect == 1.0
        and abs(off_by_one - math.e) <= 1e-6
        and jensen_ok
        and abs(f1 - 37.0 / 45.0) <= 1e-9
    )
    assert _line(
        3, ok,
        f"maee(perfect)={perfect}, maee(off-by-one)={off_by_one:.7f}, "
        f"jensen holds on 100 sets: {jensen_ok}, macro f1={f1:.12f} vs 37/45",
    )


def test_4_ordering_recovery(matrix):
    rhos = [matrix["reports"][("conpro", s)].ordering_rho for s in SEEDS]
    wins = sum(
        matrix["reports"][("conpro", s)].ordering_rho
        > matrix["reports"][("supcon2", s)].ordering_rho
        for s in SEEDS
    )
    slowest = max(matrix["walls"][("conpro", s)] for s in SEEDS)
    ok = all(r >= 0.8 for r in rhos) and wins >= 4 and slowest < 300.0
    assert _line(
        4, ok,
        f"rho per seed {[round(r, 3) for r in rhos]} (all >= 0.8), "
        f"beats two-class contrastive on {wins}/5 seeds, slowest run {slowest:.0f}s",
    )


def test_5_classification_direction(matrix):
    f1_con = _median(matrix, "conpro", "macro_f1")
    f1_sup2 = _median(matrix, "supcon2", "macro_f1")
    f1_supn = _median(matrix, "supconN", "macro_f1")
    maee_con = _median(matrix, "conpro", "maee")
    maee_supn = _median(matrix, "supconN", "maee")
    ok = f1_con >= f1_sup2 and f1_con >= f1_supn and maee_con <= maee_supn
    assert _line(
        5, ok,
        f"median f1 {f1_con:.4f} vs two-class {f1_sup2:.4f} and per-level {f1_supn:.4f}; "
        f"median maee {maee_con:.4f} vs per-level {maee_supn:.4f}",
    )


def test_6_anchor_ablation(matrix):
    # (a) Monte Carlo: mean-of-10 anchors scatter far less than single draws
    pool = matrix["normal_proj"]
    rng = Xoshiro256(20260816)
    indices = list(range(pool.shape[0]))

    def estimator_spread(n: int) -> float:
        anchors = np.empty((1000, pool.shape[1]))
        for k in range(1000):
            anchors[k] = pool[rng.sample(indices, n)].mean(axis=0)
        return float(np.linalg.norm(anchors.std(axis=0)))

    spread1 = estimator_spread(1)
    spread10 = estimator_spread(10)
    ratio = spread1 / spread10

    # (b) direction on the end metric with a fixed anchor per run
    maee_n1 = _median(matrix, "fixed-n1", "maee")
    maee_n20 = _median(matrix, "fixed-n20", "maee")

    ok = ratio >= 2.5 and maee_n20 <= maee_n1
    assert _line(
        6, ok,
        f"anchor std ratio n1/n10 = {ratio:.2f} over 1000 redraws (>= 2.5); "
        f"median maee n=20 {maee_n20:.4f} <= n=1 {maee_n1:.4f}",
    )


def test_7_determinism_and_resume(tmp_path):
    ds = generate_synthetic(GenConfig())
    spec = SplitSpec(seed=2)

    # identical config and seed: byte-identical checkpoint and log
    cfg = TrainConfig(seed=2, epochs_con=5, epochs_pro=5, pairs_train=2000, pairs_eval=500)
    ckpt_a, rec_a = train(cfg, ds, spec)
    ckpt_b, rec_b = train(cfg, ds, spec)
    pa, pb = tmp_path / "a.cpk", tmp_path / "b.cpk"
    save_checkpoint(pa, ckpt_a)
    save_checkpoint(pb, ckpt_b)
    same_bytes = pa.read_bytes() == pb.read_bytes()
    log_a = [(r.phase, r.epoch, r.loss, r.pref_acc) for r in rec_a]
    log_b = [(r.phase, r.epoch, r.loss, r.pref_acc) for r in rec_b]
    same_log = log_a == log_b

    # ten epochs straight == five, snapshot, five more (mid-phase cut)
    cfg10 = TrainConfig(seed=2, epochs_con=10, epochs_pro=0, pairs_train=2000, pairs_eval=500)
    straight, _ = train(cfg10, ds, spec)
    first = Trainer(cfg10, ds, spec)
    first.run_con_step(max_epochs=5)
    resumed, _ = train(cfg10, ds, spec, resume=first.snapshot())
    split_equal = checkpoints_equal(straight, resumed)

    # and the same across the phase boundary
    boundary = Trainer(cfg, ds, spec)
    boundary.run_con_step()
    resumed2, _ = train(cfg, ds, spec, resume=boundary.snapshot())
    boundary_equal = checkpoints_equal(ckpt_a, resumed2)

    ok = same_bytes and same_log and split_equal and boundary_equal
    assert _line(
        7, ok,
        f"rerun checkpoint bytes equal: {same_bytes}, logs equal: {same_log}, "
        f"5+5 resume bitwise equal: {split_equal}, phase-boundary resume: {boundary_equal}",
    )


def test_8_protocol_integrity(tmp_path):
    ds = generate_synthetic(GenConfig())
    spec = SplitSpec(seed=2)
    splits = split_by_subject(ds, spec)

    # probe training never writes to the encoder
    params = ModelParams(ModelDims(), seed=2)
    before = {k: t.data.tobytes() for k, t in params.tensors.items()}
    train_probe(params, splits.train, splits.val, ProbeTrainConfig(epochs=3))
    frozen = all(params[k].data.tobytes() == before[k] for k in before)

    # two-class contrastive mode is exactly the no-preference schedule
    a, _ = train(TrainConfig(mode="supcon2", seed=2, epochs_con=4, epochs_pro=9,
                             pairs_train=400, pairs_eval=100), ds, spec)
    b, _ = train(TrainConfig(mode="conpro", seed=2, epochs_con=4, epochs_pro=0,
                             pairs_train=400, pairs_eval=100), ds, spec)
    pa, pb = tmp_path / "a.cpk", tmp_path / "b.cpk"
    save_checkpoint(pa, a)
    save_checkpoint(pb, b)
    modes_equal = checkpoints_equal(a, b) and pa.read_bytes() == pb.read_bytes()

    # the contrastive phase leaves the preference head at init
    init = ModelParams(ModelDims(), seed=2)
    head_untouched = (
        np.array_equal(a.tensors["pref.w"], init["pref.w"].data)
        and np.array_equal(a.tensors["pref.b"], init["pref.b"].data)
        and not np.any(a.tensors["vel.pref.w"])
    )

    ok = frozen and modes_equal and head_untouched
    assert _line(
        8, ok,
        f"encoder frozen under probe: {frozen}, mode equivalence bitwise: {modes_equal}, "
        f"preference head untouched by contrastive phase: {head_untouched}",
    )


def test_9_format_round_trips(tmp_path):
    ds = generate_synthetic(GenConfig(subjects_per_class=3))

    ds_path = tmp_path / "d.cpds"
    save_dataset(ds, ds_path)
    ds_back = load_dataset(ds_path)
    ds_exact = datasets_equal(ds, ds_back) and dataset_digest(ds) == dataset_digest(ds_back)

    full = generate_synthetic(GenConfig())
    ckpt, _ = train(
        TrainConfig(seed=2, epochs_con=2, epochs_pro=2, pairs_train=200, pairs_eval=50),
        full, SplitSpec(seed=2),
    )
    ck_path = tmp_path / "c.cpk"
    save_checkpoint(ck_path, ckpt)
    ck_exact = checkpoints_equal(ckpt, load_checkpoint(ck_path))

    bad_ds = tmp_path / "bad.cpds"
    bad_ds.write_bytes(b"XXXX" + ds_path.read_bytes()[4:])
    bad_ck = tmp_path / "bad.cpk"
    bad_ck.write_bytes(b"XXXX" + ck_path.read_bytes()[4:])
    rejects = 0
    try:
        load_dataset(bad_ds)
    except DatasetFormatError:
        rejects += 1
    try:
        load_checkpoint(bad_ck)
    except CheckpointFormatError:
        rejects += 1

    csv_path = tmp_path / "d.csv"
    export_csv(ds, csv_path)
    csv_exact = datasets_equal(import_csv(csv_path, max_severity=ds.max_severity), ds)

    ok = ds_exact and ck_exact and rejects == 2 and csv_exact
    assert _line(
        9, ok,
        f"dataset round trip exact: {ds_exact}, checkpoint round trip exact: {ck_exact}, "
        f"corrupted magics rejected: {rejects}/2, csv round trip exact: {csv_exact}",
    )
