"""Two-phase training orchestration, checkpointing, per-epoch telemetry.

Phase one ("con") trains encoder + projection on a margin contrastive
objective over sampled pairs; phase two ("pro") trains encoder,
projection, and preference head on the anchored ranking objective.
Baseline modes stop after phase one: supcon2 uses the same binary pairs,
supconN switches the sampler to full severity classes.

Determinism contract: every stochastic choice is derived statelessly from
the config seed (pair lists per epoch from (seed, phase, epoch); the
telemetry pair set from (seed, "pref-eval")), so a resumed run replays
the exact epochs an uninterrupted run would have executed. The trainer
also owns a progress stream that advances once per executed epoch; its
state rides along in checkpoints, tying a checkpoint to a position in
the schedule.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .data import (
    AnchorConfig,
    DataSplits,
    Dataset,
    PreferencePairs,
    SplitSpec,
    compute_anchor_batch,
    dataset_digest,
    sample_contrastive_pairs,
    sample_preference_pairs,
    split_by_subject,
)
from .losses import margin_contrastive_loss, preference_nll_loss
from .model import ModelDims, ModelParams
from .optim import SgdMomentum
from .rng import Xoshiro256, derive_seed

_CPK_MAGIC = b"CPRO"
_CPK_VERSION = 1
_VELOCITY_PREFIX = "vel."

MODES = ("conpro", "supcon2", "supconN")


class CheckpointFormatError(ValueError):
    """A checkpoint file violates the .cpk layout."""


@dataclass(frozen=True)
class TrainConfig:
    dims: ModelDims = ModelDims()
    mode: str = "conpro"
    epochs_con: int = 30
    epochs_pro: int = 30
    batch_size: int = 16
    lr_encoder: float = 1e-3
    lr_heads: float = 1e-2
    momentum: float = 0.9
    margin: float = 2.0
    pairs_train: int = 20000
    pairs_eval: int = 2000
    anchor: AnchorConfig = AnchorConfig()
    anchor_stop_gradient: bool = False
    seed: int = 2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs_con < 0 or self.epochs_pro < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_encoder < 0 or self.lr_heads < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 < self.margin <= 2.0:
            raise ValueError("margin must be in (0, 2]")
        if self.pairs_train < 1:
            raise ValueError("pairs_train must be >= 1")
        if self.pairs_eval < 0:
            raise ValueError("pairs_eval must be >= 0")

    @property
    def pair_mode(self) -> str:
        return "multiclass" if self.mode == "supconN" else "binary"

    @property
    def effective_epochs_pro(self) -> int:
        """Preference epochs the schedule will actually run."""
        return self.epochs_pro if self.mode == "conpro" else 0


@dataclass
class TrainRecord:
    phase: str  # "con" or "pro"
    epoch: int  # 1-based within the phase
    loss: float
    pref_acc: float  # nan when telemetry pairs are unavailable
    wall_time: float


@dataclass
class Checkpoint:
    config: dict[str, str]  # key -> canonical value string
    rng_state: tuple[int, int, int, int]
    tensors: dict[str, np.ndarray]  # parameters plus "vel."-prefixed velocities

    @property
    def done_epochs_con(self) -> int:
        return int(self.config["done_epochs_con"])

    @property
    def done_epochs_pro(self) -> int:
        return int(self.config["done_epochs_pro"])

    def dims(self) -> ModelDims:
        c = self.config
        return ModelDims(
            input_dim=int(c["input_dim"]),
            encoder_hidden=tuple(int(h) for h in c["encoder_hidden"].split(",") if h),
            embed_dim=int(c["embed_dim"]),
            project_dim=int(c["project_dim"]),
            head_activation=c["head_activation"],
        )


def _bool_str(v: bool) -> str:
    return "true" if v else "false"


def _config_entries(cfg: TrainConfig, data_hash: str, done_con: int, done_pro: int) -> dict[str, str]:
    """Canonical key=value snapshot of everything that shapes the run.

    The surface mode name is intentionally absent: what matters is the
    pair mode and the effective schedule, which makes a con-only conpro
    run and a supcon2 run byte-equal, as they are behaviorally.
    """
    d = cfg.dims
    return {
        "anchor_n": str(cfg.anchor.n_reference_vectors),
        "anchor_resample_per_pair": _bool_str(cfg.anchor.resample_per_pair),
        "anchor_stop_gradient": _bool_str(cfg.anchor_stop_gradient),
        "batch_size": str(cfg.batch_size),
        "data_digest": data_hash,
        "done_epochs_con": str(done_con),
        "done_epochs_pro": str(done_pro),
        "embed_dim": str(d.embed_dim),
        "encoder_hidden": ",".join(str(h) for h in d.encoder_hidden),
        "epochs_con": str(cfg.epochs_con),
        "epochs_pro": str(cfg.effective_epochs_pro),
        "head_activation": d.head_activation,
        "input_dim": str(d.input_dim),
        "lr_encoder": repr(cfg.lr_encoder),
        "lr_heads": repr(cfg.lr_heads),
        "margin": repr(cfg.margin),
        "momentum": repr(cfg.momentum),
        "pair_mode": cfg.pair_mode,
        "pairs_eval": str(cfg.pairs_eval),
        "pairs_train": str(cfg.pairs_train),
        "project_dim": str(d.project_dim),
        "seed": str(cfg.seed),
    }


# Keys a resume invocation may legitimately change: progress counters and
# the schedule targets being extended.
_RESUME_MUTABLE_KEYS = {"done_epochs_con", "done_epochs_pro", "epochs_con", "epochs_pro"}


def _per_epoch_pairs(total: int, epochs: int) -> int:
    return (total + epochs - 1) // epochs


class Trainer:
    """Runs the schedule for one (config, dataset, split) triple."""

    def __init__(
        self,
        cfg: TrainConfig,
        dataset: Dataset,
        split_spec: SplitSpec,
        resume: Checkpoint | None = None,
    ):
        if dataset.n_features != cfg.dims.input_dim:
            raise ValueError(
                f"dataset feature dim {dataset.n_features} != model input_dim {cfg.dims.input_dim}"
            )
        self.cfg = cfg
        self.splits: DataSplits = split_by_subject(dataset, split_spec)
        self.data_hash = dataset_digest(dataset)
        self.params = ModelParams(cfg.dims, cfg.seed)
        self.stream = Xoshiro256(derive_seed(cfg.seed, "train"))
        self.done_con = 0
        self.done_pro = 0
        self.records: list[TrainRecord] = []
        # Velocity store covering every parameter; phases sync their
        # optimizer state back here so checkpoints always carry a full set.
        self.velocities: dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in self.params.tensors.items()
        }
        if resume is not None:
            self._restore(resume)
        self._eval_pairs = self._sample_eval_pairs()

    # -- resume ---------------------------------------------------------------

    def _restore(self, ckpt: Checkpoint) -> None:
        current = _config_entries(self.cfg, self.data_hash, 0, 0)
        for key, value in current.items():
            if key in _RESUME_MUTABLE_KEYS:
                continue
            stored = ckpt.config.get(key)
            if stored != value:
                raise ValueError(
                    f"resume config mismatch on {key!r}: checkpoint has {stored!r}, "
                    f"current run has {value!r}"
                )
        self.done_con = ckpt.done_epochs_con
        self.done_pro = ckpt.done_epochs_pro
        if self.done_con > self.cfg.epochs_con or self.done_pro > self.cfg.effective_epochs_pro:
            raise ValueError(
                f"checkpoint progress ({self.done_con} con, {self.done_pro} pro) exceeds "
                f"the requested schedule ({self.cfg.epochs_con}, {self.cfg.effective_epochs_pro})"
            )
        param_state = {
            k: v for k, v in ckpt.tensors.items() if not k.startswith(_VELOCITY_PREFIX)
        }
        self.params.load_state(param_state)
        for name in self.velocities:
            key = _VELOCITY_PREFIX + name
            if key not in ckpt.tensors:
                raise ValueError(f"checkpoint is missing velocity tensor {key!r}")
            self.velocities[name] = np.asarray(ckpt.tensors[key], dtype=np.float32).copy()
        self.stream = Xoshiro256.from_state(ckpt.rng_state)

    # -- shared pieces ----------------------------------------------------------

    def _sample_eval_pairs(self) -> PreferencePairs | None:
        if self.cfg.pairs_eval == 0:
            return None
        try:
            return sample_preference_pairs(
                self.splits.test,
                self.cfg.pairs_eval,
                self.cfg.anchor,
                derive_seed(self.cfg.seed, "pref-eval"),
            )
        except ValueError:
            # Test split cannot support preference pairs (degenerate
            # severity composition); telemetry reports nan instead.
            return None

    def _phase_optimizer(self, phase: str) -> SgdMomentum:
        if phase == "con":
            tensors = {**self.params.group("enc."), **self.params.group("proj.")}
        else:
            tensors = dict(self.params.tensors)
        lr_map = {
            name: self.cfg.lr_encoder if name.startswith("enc.") else self.cfg.lr_heads
            for name in tensors
        }
        return SgdMomentum(tensors, lr_map, self.cfg.momentum)

    def _sync_velocities(self, opt: SgdMomentum) -> None:
        for name, v in opt.velocities.items():
            self.velocities[name] = v.copy()

    def _embed(self, rows: np.ndarray) -> Tensor:
        return self.params.project(self.params.encode(Tensor(rows)))

    def _telemetry_pref_acc(self) -> float:
        """Fraction of held-out pairs the current model orders correctly.

        Pure telemetry (no gradients): reference embeddings are computed
        once per unique sample and gathered, then everything proceeds in
        float64 numpy.
        """
        pairs = self._eval_pairs
        if pairs is None:
            return float("nan")
        feats = self.splits.test.features
        unique_idx, inverse = np.unique(pairs.anchor_indices, return_inverse=True)
        ref_emb = self._embed(feats[unique_idx]).data.astype(np.float64)
        per_pair = ref_emb[inverse.reshape(pairs.anchor_indices.shape)]
        anchors = per_pair.mean(axis=1)
        v_pref = self.params.prefer(self._embed(feats[pairs.preferred])).data.astype(np.float64)
        v_disp = self.params.prefer(self._embed(feats[pairs.dispreferred])).data.astype(np.float64)

        def dist(rows: np.ndarray) -> np.ndarray:
            num = (rows * anchors).sum(axis=1)
            den = np.linalg.norm(rows, axis=1) * np.linalg.norm(anchors, axis=1)
            if np.any(den == 0.0):
                raise ValueError("zero-norm embedding in telemetry distance")
            return 1.0 - num / den

        return float(np.mean(dist(v_disp) > dist(v_pref)))

    # -- phases -----------------------------------------------------------------

    def run_con_step(
        self,
        lr_map: Mapping[str, float] | None = None,
        max_epochs: int | None = None,
    ) -> list[TrainRecord]:
        """Contrastive epochs from the current counter up to the target.

        Updates encoder and projection only; the preference head is not
        part of the graph. `lr_map` overrides per-parameter rates (test
        hook for freeze ablations); `max_epochs` stops early after that
        many additional epochs, leaving a resumable state.
        """
        cfg = self.cfg
        target = cfg.epochs_con
        if max_epochs is not None:
            target = min(target, self.done_con + max_epochs)
        if self.done_con >= target:
            return []
        opt = self._phase_optimizer("con")
        if lr_map is not None:
            opt = SgdMomentum(opt.params, dict(lr_map), cfg.momentum)
        if self.done_con > 0:
            opt.load_velocities({n: self.velocities[n] for n in opt.params})
        per_epoch = _per_epoch_pairs(cfg.pairs_train, cfg.epochs_con)
        train = self.splits.train
        out: list[TrainRecord] = []
        for epoch in range(self.done_con, target):
            started = time.perf_counter()
            pairs = sample_contrastive_pairs(
                train, per_epoch, cfg.pair_mode, derive_seed(cfg.seed, "con-pairs", epoch)
            )
            total = 0.0
            for lo in range(0, len(pairs), cfg.batch_size):
                sl = slice(lo, min(lo + cfg.batch_size, len(pairs)))
                emb_a = self._embed(train.features[pairs.first[sl]])
                emb_b = self._embed(train.features[pairs.second[sl]])
                loss = margin_contrastive_loss(
                    emb_a, emb_b, pairs.same_class[sl], cfg.margin
                )
                opt.zero_grad()
                loss.backward()
                opt.step()
                # loss.item() is the batch mean; weight by batch size so the
                # short final batch contributes proportionally.
                total += loss.item() * (sl.stop - sl.start)
            record = TrainRecord(
                phase="con",
                epoch=epoch + 1,
                loss=total / len(pairs),
                pref_acc=self._telemetry_pref_acc(),
                wall_time=time.perf_counter() - started,
            )
            out.append(record)
            self.records.append(record)
            self.stream.next_u64()
            self.done_con = epoch + 1
        self._sync_velocities(opt)
        return out

    def run_pro_step(
        self,
        lr_map: Mapping[str, float] | None = None,
        max_epochs: int | None = None,
    ) -> list[TrainRecord]:
        """Preference epochs; updates encoder, projection, and preference head.

        Each batch embeds both pair members and the pair's reference
        samples through the current encoder+projection, averages the
        references into per-pair anchors (in-graph unless
        anchor_stop_gradient), and takes one SGD step on the ranking NLL.
        """
        cfg = self.cfg
        target = cfg.effective_epochs_pro
        if max_epochs is not None:
            target = min(target, self.done_pro + max_epochs)
        if self.done_pro >= target:
            return []
        opt = self._phase_optimizer("pro")
        if lr_map is not None:
            opt = SgdMomentum(opt.params, dict(lr_map), cfg.momentum)
        if self.done_pro > 0:
            opt.load_velocities({n: self.velocities[n] for n in opt.params})
        per_epoch = _per_epoch_pairs(cfg.pairs_train, cfg.effective_epochs_pro)
        train = self.splits.train
        n_ref = cfg.anchor.n_reference_vectors
        out: list[TrainRecord] = []
        for epoch in range(self.done_pro, target):
            started = time.perf_counter()
            pairs = sample_preference_pairs(
                train, per_epoch, cfg.anchor, derive_seed(cfg.seed, "pro-pairs", epoch)
            )
            total = 0.0
            for lo in range(0, len(pairs), cfg.batch_size):
                sl = slice(lo, min(lo + cfg.batch_size, len(pairs)))
                b = sl.stop - sl.start
                v_pref = self.params.prefer(self._embed(train.features[pairs.preferred[sl]]))
                v_disp = self.params.prefer(self._embed(train.features[pairs.dispreferred[sl]]))
                ref_rows = train.features[pairs.anchor_indices[sl].reshape(-1)]
                anchors = compute_anchor_batch(self._embed(ref_rows), b, n_ref)
                if cfg.anchor_stop_gradient:
                    anchors = anchors.detach()
                loss = preference_nll_loss(v_pref, v_disp, anchors)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * b
            record = TrainRecord(
                phase="pro",
                epoch=epoch + 1,
                loss=total / len(pairs),
                pref_acc=self._telemetry_pref_acc(),
                wall_time=time.perf_counter() - started,
            )
            out.append(record)
            self.records.append(record)
            self.stream.next_u64()
            self.done_pro = epoch + 1
        self._sync_velocities(opt)
        return out

    # -- entry point -------------------------------------------------------------

    def train(self) -> tuple[Checkpoint, list[TrainRecord]]:
        self.run_con_step()
        self.run_pro_step()
        return self.snapshot(), list(self.records)

    def snapshot(self) -> Checkpoint:
        tensors: dict[str, np.ndarray] = {}
        for name, t in self.params.tensors.items():
            tensors[name] = t.data.copy()
            tensors[_VELOCITY_PREFIX + name] = self.velocities[name].copy()
        return Checkpoint(
            config=_config_entries(self.cfg, self.data_hash, self.done_con, self.done_pro),
            rng_state=self.stream.state,
            tensors=tensors,
        )


def train(cfg: TrainConfig, dataset: Dataset, split_spec: SplitSpec,
          resume: Checkpoint | None = None) -> tuple[Checkpoint, list[TrainRecord]]:
    """One-call schedule run; see Trainer for the mechanics."""
    return Trainer(cfg, dataset, split_spec, resume=resume).train()


def model_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    """Rebuild the network exactly as checkpointed (seed 0 init is overwritten)."""
    params = ModelParams(ckpt.dims(), seed=0)
    params.load_state(
        {k: v for k, v in ckpt.tensors.items() if not k.startswith(_VELOCITY_PREFIX)}
    )
    return params


# -- checkpoint file format -----------------------------------------------------


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blob = "\n".join(f"{k} = {v}" for k, v in sorted(ckpt.config.items())).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CPK_MAGIC)
        fh.write(struct.pack("<I", _CPK_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<4Q", *ckpt.rng_state))
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name in sorted(ckpt.tensors):
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _CPK_MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, expected {_CPK_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _CPK_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        blob = _read_exact(fh, blob_len, "config blob").decode("utf-8")
        config: dict[str, str] = {}
        for line in blob.splitlines():
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointFormatError(f"malformed config line {line!r}")
            config[key.strip()] = value.strip()
        rng_state = struct.unpack("<4Q", _read_exact(fh, 32, "rng state"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, f"tensor {i} name length"))
            name = _read_exact(fh, name_len, f"tensor {i} name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, f"{name} ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, f"{name} dims"))
            n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(fh, 4 * n_items, f"{name} data")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after the declared tensor table")
    return Checkpoint(config=config, rng_state=rng_state, tensors=tensors)


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    """Full bitwise equality: config text, stream state, every tensor."""
    if a.config != b.config or a.rng_state != b.rng_state:
        return False
    if set(a.tensors) != set(b.tensors):
        return False
    return all(
        a.tensors[k].shape == b.tensors[k].shape
        and a.tensors[k].tobytes() == b.tensors[k].tobytes()
        for k in a.tensors
    )
