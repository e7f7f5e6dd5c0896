"""Network definition: encoder, projection head, preference head, probe.

All dense layers are y = x @ W + b with W of shape (fan_in, fan_out).
Weights use Glorot-uniform init drawn from the project PRNG in a fixed
order (encoder layers first, then projection, then preference head), so a
seed pins every parameter bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, apply_dropout
from .rng import Xoshiro256, derive_seed


@dataclass(frozen=True)
class ModelDims:
    """Layer widths for the full stack."""

    input_dim: int = 32
    encoder_hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 64
    project_dim: int = 16
    head_activation: str = "none"

    def __post_init__(self):
        if self.input_dim < 1 or self.embed_dim < 1 or self.project_dim < 1:
            raise ValueError("all layer widths must be >= 1")
        if any(h < 1 for h in self.encoder_hidden):
            raise ValueError("encoder hidden widths must be >= 1")
        if self.head_activation not in ("none", "tanh"):
            raise ValueError(f"head_activation must be 'none' or 'tanh', got {self.head_activation!r}")


def glorot_uniform(rng: Xoshiro256, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform on [-b, b] with b = sqrt(6 / (fan_in + fan_out)), row-major draw order."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    flat = np.empty(fan_in * fan_out, dtype=np.float32)
    for i in range(flat.size):
        flat[i] = np.float32((2.0 * rng.uniform() - 1.0) * bound)
    return flat.reshape(fan_in, fan_out)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


class ModelParams:
    """Holds every trainable tensor, keyed by canonical name.

    Names follow `enc.0.w`, `enc.0.b`, ..., `proj.w`, `proj.b`,
    `pref.w`, `pref.b`; the optimizer and checkpoint code rely on
    this naming to group learning rates and serialize state.
    """

    def __init__(self, dims: ModelDims, seed: int):
        self.dims = dims
        rng = Xoshiro256(derive_seed(seed, "init"))
        self.tensors: dict[str, Tensor] = {}

        widths = [dims.input_dim, *dims.encoder_hidden, dims.embed_dim]
        self.encoder_layers = len(widths) - 1
        for i in range(self.encoder_layers):
            fan_in, fan_out = widths[i], widths[i + 1]
            self.tensors[f"enc.{i}.w"] = Tensor.param(glorot_uniform(rng, fan_in, fan_out), f"enc.{i}.w")
            self.tensors[f"enc.{i}.b"] = Tensor.param(np.zeros(fan_out, dtype=np.float32), f"enc.{i}.b")

        self.tensors["proj.w"] = Tensor.param(
            glorot_uniform(rng, dims.embed_dim, dims.project_dim), "proj.w"
        )
        self.tensors["proj.b"] = Tensor.param(np.zeros(dims.project_dim, dtype=np.float32), "proj.b")

        self.tensors["pref.w"] = Tensor.param(
            glorot_uniform(rng, dims.project_dim, dims.project_dim), "pref.w"
        )
        self.tensors["pref.b"] = Tensor.param(np.zeros(dims.project_dim, dtype=np.float32), "pref.b")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def encode(self, x: Tensor) -> Tensor:
        """Encoder f: input -> embedding, tanh after every layer."""
        h = x
        for i in range(self.encoder_layers):
            h = _linear(h, self.tensors[f"enc.{i}.w"], self.tensors[f"enc.{i}.b"]).tanh()
        return h

    def project(self, z: Tensor) -> Tensor:
        """Projection g: embedding -> contrastive space."""
        out = _linear(z, self.tensors["proj.w"], self.tensors["proj.b"])
        if self.dims.head_activation == "tanh":
            out = out.tanh()
        return out

    def prefer(self, c: Tensor) -> Tensor:
        """Preference head h: square map within the contrastive space."""
        return _linear(c, self.tensors["pref.w"], self.tensors["pref.b"])

    def embed(self, x: Tensor) -> Tensor:
        return self.project(self.encode(x))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.tensors) - set(arrays))
        extra = sorted(set(arrays) - set(self.tensors))
        if missing or extra:
            raise ValueError(f"model state mismatch: missing={missing} unknown={extra}")
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float32)
            if arr.shape != self.tensors[name].data.shape:
                raise ValueError(
                    f"shape for {name!r}: {arr.shape} != {self.tensors[name].data.shape}"
                )
            self.tensors[name].data = arr.copy()


@dataclass
class ProbeConfig:
    kind: str = "linear"
    hidden_dim: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"probe kind must be 'linear' or 'mlp', got {self.kind!r}")
        if self.hidden_dim < 1:
            raise ValueError("probe hidden_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"probe dropout must be in [0, 1), got {self.dropout}")


class ProbeParams:
    """Severity classifier trained on frozen embeddings.

    Either a single linear layer or a 2-layer MLP (relu, inverted dropout
    during training only).
    """

    def __init__(self, in_dim: int, n_classes: int, config: ProbeConfig, seed: int):
        if n_classes < 2:
            raise ValueError(f"probe needs >= 2 classes, got {n_classes}")
        self.config = config
        self.n_classes = n_classes
        rng = Xoshiro256(derive_seed(seed, "probe-init"))
        self.tensors: dict[str, Tensor] = {}
        if config.kind == "linear":
            self.tensors["probe.0.w"] = Tensor.param(glorot_uniform(rng, in_dim, n_classes), "probe.0.w")
            self.tensors["probe.0.b"] = Tensor.param(np.zeros(n_classes, dtype=np.float32), "probe.0.b")
        else:
            h = config.hidden_dim
            self.tensors["probe.0.w"] = Tensor.param(glorot_uniform(rng, in_dim, h), "probe.0.w")
            self.tensors["probe.0.b"] = Tensor.param(np.zeros(h, dtype=np.float32), "probe.0.b")
            self.tensors["probe.1.w"] = Tensor.param(glorot_uniform(rng, h, n_classes), "probe.1.w")
            self.tensors["probe.1.b"] = Tensor.param(np.zeros(n_classes, dtype=np.float32), "probe.1.b")

    def forward(self, x: Tensor, train: bool = False, rng: Xoshiro256 | None = None) -> Tensor:
        """Logits for a batch of embeddings; dropout only when train=True."""
        if self.config.kind == "linear":
            return _linear(x, self.tensors["probe.0.w"], self.tensors["probe.0.b"])
        h = _linear(x, self.tensors["probe.0.w"], self.tensors["probe.0.b"]).relu()
        if train and self.config.dropout > 0.0:
            if rng is None:
                raise ValueError("training forward with dropout needs an rng")
            h = apply_dropout(h, self.config.dropout, rng)
        return _linear(h, self.tensors["probe.1.w"], self.tensors["probe.1.b"])
