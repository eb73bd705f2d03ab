"""Dense autoencoder trained with hand-written backprop and Adam."""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DEFAULT_ARCH = "640-128-128-128-128-8-128-128-128-128-640"
ACTIVATIONS = ("linear", "relu")


class ModelError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class Architecture:
    dims: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    @classmethod
    def parse(cls, text: str, io_dim: int = 640, **kw) -> "Architecture":
        try:
            dims = tuple(int(tok) for tok in text.split("-"))
        except ValueError:
            raise ModelError(f"bad architecture descriptor '{text}'") from None
        arch = cls(dims, **kw)
        arch.check(io_dim)
        return arch

    def check(self, io_dim: int = 640) -> None:
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            raise ModelError(f"bad layer dims {self.dims}")
        if self.dims[0] != io_dim:
            raise ModelError(f"input dim {self.dims[0]} != {io_dim}")
        if self.dims[-1] != io_dim:
            raise ModelError(f"output dim {self.dims[-1]} != {io_dim}")
        for act in (self.hidden_activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ModelError(f"unknown activation '{act}'")

    def __str__(self):
        return "-".join(map(str, self.dims))


@dataclass
class Dense:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray    # (fan_out,)
    activation: str = "linear"


@dataclass
class AutoencoderModel:
    layers: list[Dense]
    feature_fingerprint: str = ""

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0].weight.shape[0],) + tuple(l.weight.shape[1] for l in self.layers)

    @property
    def dim(self) -> int:
        return self.dims[0]

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> "AutoencoderModel":
        return AutoencoderModel([Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
                                self.feature_fingerprint)


def init_model(arch: Architecture | str = DEFAULT_ARCH, seed: int = 0, io_dim: int | None = None,
               dtype=np.float32) -> AutoencoderModel:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    if isinstance(arch, str):
        arch = Architecture.parse(arch, io_dim or int(arch.split("-")[0]))
    arch.check(io_dim or arch.dims[0])
    rng = np.random.default_rng(seed)
    layers = []
    n = len(arch.dims) - 1
    for i, (fan_in, fan_out) in enumerate(zip(arch.dims[:-1], arch.dims[1:])):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)
        act = arch.output_activation if i == n - 1 else arch.hidden_activation
        layers.append(Dense(w, np.zeros(fan_out, dtype=dtype), act))
    return AutoencoderModel(layers)


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    return np.maximum(z, 0) if act == "relu" else z


def _check_input(model: AutoencoderModel, x: np.ndarray) -> None:
    if x.shape[-1] != model.dim:
        raise ModelError(f"input has {x.shape[-1]} columns, model expects {model.dim}")


def forward(model: AutoencoderModel, x: np.ndarray) -> np.ndarray:
    """Reconstruct a single vector or a batch of row vectors.

    Each row goes through its own vector-matrix product, so a row's output
    is bitwise independent of the batch it arrives in (a plain BLAS gemm
    is not).  Training uses the faster batched path in ``backward``.
    """
    x = np.asarray(x)
    _check_input(model, x)
    single = x.ndim == 1
    h = x.reshape(-1, 1, x.shape[-1]).astype(model.dtype, copy=False)
    for layer in model.layers:
        h = _activate(h @ layer.weight + layer.bias, layer.activation)
    h = h[:, 0, :]
    return h[0] if single else h


def mse_loss(x: np.ndarray, r: np.ndarray) -> float:
    x, r = np.asarray(x), np.asarray(r)
    if x.shape != r.shape:
        raise ModelError(f"shape mismatch {x.shape} vs {r.shape}")
    diff = x.astype(np.float64) - r.astype(np.float64)
    return float(np.mean(diff * diff))


def backward(model: AutoencoderModel, x: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Loss and gradients of mse_loss(x, forward(x)); gradients ordered like model.params()."""
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim != 2:
        raise ModelError("backward expects a 2-D batch")
    _check_input(model, x)
    acts = [x]
    for layer in model.layers:
        acts.append(_activate(acts[-1] @ layer.weight + layer.bias, layer.activation))
    diff = acts[-1] - x
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = diff * (2.0 / diff.size)
    grads: list[np.ndarray] = []
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == "relu":
            grad = grad * (acts[i + 1] > 0)
        grads += [grad.sum(axis=0), acts[i].T @ grad]
        if i:
            grad = grad @ layer.weight.T
    grads.reverse()  # now [W0, b0, W1, b1, ...]
    return loss, [g.astype(model.dtype, copy=False) for g in grads]


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ModelError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ModelError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ModelError("lr must be > 0")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0
    seed: int = 0

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


class Adam:
    def __init__(self, params: Sequence[np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        lr_t = c.lr * (1 - c.beta2 ** self.t) ** 0.5 / (1 - c.beta1 ** self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= (lr_t * m / (np.sqrt(v) + c.eps)).astype(p.dtype, copy=False)


def train(model: AutoencoderModel, data: np.ndarray | Sequence[np.ndarray], cfg: TrainConfig,
          on_epoch: Callable[[int, float], None] | None = None) -> tuple[AutoencoderModel, TrainReport]:
    """Minimise reconstruction MSE over all rows (source and target pooled).

    Returns a trained copy; the input model is left untouched.
    """
    if not isinstance(data, np.ndarray):
        data = np.concatenate(list(data), axis=0)
    data = np.asarray(data, dtype=model.dtype)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ModelError("need at least one feature row")
    _check_input(model, data)
    model = model.copy()
    params = model.params()
    opt = Adam(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    n = data.shape[0]
    report = TrainReport(seed=cfg.seed)
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            batch = data[order[lo:lo + cfg.batch_size]]
            loss, grads = backward(model, batch)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            total += loss * batch.shape[0]
            opt.step(params, grads)
        epoch_loss = total / n
        report.epoch_losses.append(epoch_loss)
        if on_epoch:
            on_epoch(epoch, epoch_loss)
    report.seconds = time.perf_counter() - start
    return model, report


# -- model file ------------------------------------------------------------
# "ASDM" | u32 version | u32 layer count | 64-byte ascii feature fingerprint
# per layer: u32 fan_in | u32 fan_out | u8 activation | f32 LE weights (row-major) | f32 LE biases

_MAGIC = b"ASDM"
_VERSION = 1


def save_model(path: str | Path, model: AutoencoderModel) -> None:
    fp = model.feature_fingerprint.encode("ascii").ljust(64, b"\0")[:64]
    out = [_MAGIC, struct.pack("<II", _VERSION, len(model.layers)), fp]
    for layer in model.layers:
        fan_in, fan_out = layer.weight.shape
        out.append(struct.pack("<IIB", fan_in, fan_out, ACTIVATIONS.index(layer.activation)))
        out.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_model(path: str | Path) -> AutoencoderModel:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ModelError(f"{path}: not a model file")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ModelError(f"{path}: unsupported model version {version}")
    fingerprint = data[12:76].rstrip(b"\0").decode("ascii")
    pos = 76
    layers = []
    for _ in range(n_layers):
        fan_in, fan_out, act = struct.unpack_from("<IIB", data, pos)
        pos += 9
        w = np.frombuffer(data, "<f4", fan_in * fan_out, pos).reshape(fan_in, fan_out)
        pos += 4 * fan_in * fan_out
        b = np.frombuffer(data, "<f4", fan_out, pos)
        pos += 4 * fan_out
        layers.append(Dense(w.astype(np.float32), b.astype(np.float32), ACTIVATIONS[act]))
    if pos != len(data):
        raise ModelError(f"{path}: {len(data) - pos} trailing bytes")
    model = AutoencoderModel(layers, fingerprint)
    if any(l1.weight.shape[1] != l2.weight.shape[0] for l1, l2 in zip(layers, layers[1:])):
        raise ModelError(f"{path}: layer dimensions do not chain")
    return model
