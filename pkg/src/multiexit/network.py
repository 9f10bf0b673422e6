"""Multi-exit dense networks.

A model with ``k`` exits is a stack of ``k`` dense+ReLU blocks. Exit ``i``
(numbered from 1) reads the features ``w_i`` of block ``i`` through its own
classifier head, so computing exit ``j`` never touches blocks or heads past
``j``.

With inline subnetwork collaboration (ISC) switched on, the gradient-stopped
logits of exit ``i`` are added to the head output of exit ``i + 1``. Because
exit ``i``'s logits already carry exit ``i - 1``'s, the transfer chains
through every earlier exit.
"""

from __future__ import annotations

import io
import struct
from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

ISC_TRANSFORMS = ("identity", "linear")
ISC_MODES = ("off", "train", "infer")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a multi-exit network.

    ``head_hidden=None`` gives single-affine heads. ``isc_into_last`` controls
    whether the final exit also receives the transferred logits.
    """

    input_dim: int
    num_classes: int
    block_widths: tuple[int, ...]
    head_hidden: int | None = 32
    isc_enabled: bool = False
    isc_transform: str = "identity"
    isc_into_last: bool = True

    def __post_init__(self):
        object.__setattr__(self, "block_widths", tuple(int(w) for w in self.block_widths))
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.block_widths) < 2:
            raise ConfigError("a multi-exit model needs at least 2 exits")
        if min(self.block_widths) < 1:
            raise ConfigError("block widths must be >= 1")
        if self.head_hidden is not None and self.head_hidden < 1:
            raise ConfigError("head_hidden must be >= 1 or None")
        if self.isc_transform not in ISC_TRANSFORMS:
            raise ConfigError(f"isc_transform must be one of {ISC_TRANSFORMS}")

    @property
    def k(self) -> int:
        return len(self.block_widths)

    def has_transfer(self, i: int) -> bool:
        """Whether exit ``i`` (1-based) receives logits from exit ``i - 1``."""
        if not self.isc_enabled or i < 2:
            return False
        return i < self.k or self.isc_into_last

    def to_text(self) -> str:
        """Canonical ``key=value`` lines, sorted by key."""
        lines = []
        for key, value in sorted(asdict(self).items()):
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={'none' if value is None else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        raw = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        return cls(**{f.name: _parse_field(f.name, raw[f.name]) for f in fields(cls) if f.name in raw})


def _parse_field(name: str, value: str):
    value = value.strip()
    if name == "block_widths":
        return tuple(int(v) for v in value.split(","))
    if name == "head_hidden":
        return None if value.lower() == "none" else int(value)
    if name in ("isc_enabled", "isc_into_last"):
        return value.lower() in ("1", "true", "yes", "on")
    if name == "isc_transform":
        return value
    return int(value)


@dataclass
class ForwardOutputs:
    logits: list[Tensor]
    features: list[Tensor]
    cost_prefix: list[int]


class MultiExitModel:
    """Parameters of a multi-exit network, registered under stable names.

    Names use 1-based exit numbers: ``block{i}.weight``, ``head{i}.hidden.bias``,
    ``head{i}.out.weight``, ``isc{i}.weight`` (transfer into exit ``i``) and so on.
    Every parameter read goes through :meth:`param`, which counts accesses.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.access_counts: Counter[str] = Counter()

    @property
    def k(self) -> int:
        return self.cfg.k

    def param(self, name: str) -> Tensor:
        self.access_counts[name] += 1
        return self.params[name]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError("state dict does not match model parameters")
        for name, value in state.items():
            if value.shape != self.params[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            self.params[name].data = np.array(value, dtype=np.float64)

    def copy(self) -> "MultiExitModel":
        return MultiExitModel(self.cfg, {n: Tensor(p.data.copy(), requires_grad=True)
                                         for n, p in self.params.items()})

    def cost_prefix(self) -> list[int]:
        return count_macs(self.cfg)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_model(cfg: ModelConfig, seed: int = 0) -> MultiExitModel:
    """Initialize a model deterministically from ``seed``.

    Weights are drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases are zero.
    Linear ISC transfers start at the identity map; they are drawn from their
    own stream so toggling ISC leaves every other parameter unchanged.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def dense(prefix, n_in, n_out):
        params[f"{prefix}.weight"] = Tensor(_uniform(rng, n_in, (n_in, n_out)), requires_grad=True)
        params[f"{prefix}.bias"] = Tensor(np.zeros(n_out), requires_grad=True)

    n_in = cfg.input_dim
    for i, width in enumerate(cfg.block_widths, start=1):
        dense(f"block{i}", n_in, width)
        n_in = width
    for i, width in enumerate(cfg.block_widths, start=1):
        if cfg.head_hidden is None:
            dense(f"head{i}.out", width, cfg.num_classes)
        else:
            dense(f"head{i}.hidden", width, cfg.head_hidden)
            dense(f"head{i}.out", cfg.head_hidden, cfg.num_classes)
    if cfg.isc_transform == "linear":
        for i in range(2, cfg.k + 1):
            if cfg.has_transfer(i):
                params[f"isc{i}.weight"] = Tensor(np.eye(cfg.num_classes), requires_grad=True)
                params[f"isc{i}.bias"] = Tensor(np.zeros(cfg.num_classes), requires_grad=True)
    return MultiExitModel(cfg, params)


def dense_macs(n_in: int, n_out: int) -> int:
    """Multiply-accumulates of one ``n_in -> n_out`` dense layer (bias is free)."""
    return n_in * n_out


def layer_macs(cfg: ModelConfig) -> dict[str, int]:
    """MAC count of every dense layer, keyed like the parameter prefixes."""
    out = {}
    n_in = cfg.input_dim
    for i, width in enumerate(cfg.block_widths, start=1):
        out[f"block{i}"] = dense_macs(n_in, width)
        n_in = width
    for i, width in enumerate(cfg.block_widths, start=1):
        if cfg.head_hidden is None:
            out[f"head{i}.out"] = dense_macs(width, cfg.num_classes)
        else:
            out[f"head{i}.hidden"] = dense_macs(width, cfg.head_hidden)
            out[f"head{i}.out"] = dense_macs(cfg.head_hidden, cfg.num_classes)
        if cfg.isc_transform == "linear" and cfg.has_transfer(i):
            out[f"isc{i}"] = dense_macs(cfg.num_classes, cfg.num_classes)
    return out


def count_macs(cfg: ModelConfig) -> list[int]:
    """Cost of reaching each exit: entry ``j - 1`` sums every layer of stages ``1..j``.

    All heads up to ``j`` are included because early-exit inference evaluates
    each of them on the way.
    """
    per_layer = layer_macs(cfg)
    out, total = [], 0
    for i in range(1, cfg.k + 1):
        total += sum(v for name, v in per_layer.items()
                     if name.split(".")[0] in (f"block{i}", f"head{i}", f"isc{i}"))
        out.append(total)
    return out


def _dense(model: MultiExitModel, prefix: str, x: Tensor) -> Tensor:
    return ad.matmul(x, model.param(f"{prefix}.weight")) + model.param(f"{prefix}.bias")


def block_forward(model: MultiExitModel, i: int, x: Tensor) -> Tensor:
    return ad.relu(_dense(model, f"block{i}", x))


def head_forward(model: MultiExitModel, i: int, w: Tensor) -> Tensor:
    if model.cfg.head_hidden is not None:
        w = ad.relu(_dense(model, f"head{i}.hidden", w))
    return _dense(model, f"head{i}.out", w)


def transfer(model: MultiExitModel, i: int, prev_logits: Tensor) -> Tensor:
    """Knowledge carried from exit ``i - 1`` into exit ``i``, gradient-stopped."""
    t = ad.stop_gradient(prev_logits)
    if model.cfg.isc_transform == "linear":
        t = _dense(model, f"isc{i}", t)
    return t


def exit_logits(model: MultiExitModel, i: int, w: Tensor, prev_logits: Tensor | None, isc_on: bool) -> Tensor:
    """Head ``i`` output plus, when ISC applies, the transfer from exit ``i - 1``."""
    logits = head_forward(model, i, w)
    if isc_on and prev_logits is not None and model.cfg.has_transfer(i):
        logits = logits + transfer(model, i, prev_logits)
    return logits


def _check_input(model: MultiExitModel, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != model.cfg.input_dim:
        raise ValueError(f"expected input of shape (batch, {model.cfg.input_dim}), got {x.shape}")
    return x


def forward_all(model: MultiExitModel, x, isc_mode: str = "train", ge: bool = False) -> ForwardOutputs:
    """Evaluate every exit.

    ``isc_mode``: ``"off"`` ignores the transfer paths; ``"train"`` records a
    tape; ``"infer"`` computes the same values without one.

    With ``ge=True`` each feature tensor ``w_i`` is split into two
    gradient-rescaled branches: ``1/(k-i+1)`` towards head ``i`` and
    ``(k-i)/(k-i+1)`` towards block ``i+1``. Forward values are unchanged.
    """
    if isc_mode not in ISC_MODES:
        raise ValueError(f"isc_mode must be one of {ISC_MODES}")
    if isc_mode == "infer":
        with ad.no_grad():
            return forward_all(model, x, "train", ge=ge)
    x = _check_input(model, x)
    isc_on = isc_mode != "off"
    k = model.k
    logits, features = [], []
    h, prev = x, None
    for i in range(1, k + 1):
        w = block_forward(model, i, h)
        features.append(w)
        if ge:
            to_head = ad.rescale_gradient(w, 1.0 / (k - i + 1))
            h = ad.rescale_gradient(w, (k - i) / (k - i + 1)) if i < k else None
        else:
            to_head, h = w, w
        prev = exit_logits(model, i, to_head, prev, isc_on)
        logits.append(prev)
    return ForwardOutputs(logits, features, count_macs(model.cfg))


def iter_exits(model: MultiExitModel, x, isc: bool | None = None) -> Iterator[tuple[int, Tensor]]:
    """Lazily yield ``(exit_number, logits)``, computing one block per step."""
    x = _check_input(model, x)
    isc_on = model.cfg.isc_enabled if isc is None else isc
    h, prev = x, None
    for i in range(1, model.k + 1):
        h = block_forward(model, i, h)
        prev = exit_logits(model, i, h, prev, isc_on)
        yield i, prev


def forward_until(model: MultiExitModel, x, j: int, isc: bool | None = None) -> tuple[Tensor, int]:
    """Logits of exit ``j`` (1-based) and the cost of reaching it.

    Only blocks ``1..j`` are computed. Earlier heads are evaluated only when
    ISC feeds them into exit ``j``. The returned cost is ``cost_prefix[j-1]``,
    the early-exit cost of getting to exit ``j``.
    """
    k = model.k
    if not 1 <= j <= k:
        raise ValueError(f"exit index must lie in [1, {k}], got {j}")
    x = _check_input(model, x)
    isc_on = model.cfg.isc_enabled if isc is None else isc
    h, prev = x, None
    for i in range(1, j + 1):
        h = block_forward(model, i, h)
        if i == j or (isc_on and model.cfg.has_transfer(i + 1)):
            prev = exit_logits(model, i, h, prev, isc_on)
    return prev, count_macs(model.cfg)[j - 1]


def last_layer_params(model: MultiExitModel) -> list[str]:
    """Names of the final affine layer of every head.

    Linear ISC transfers feed the output directly, so they count as part of
    the receiving exit's last layer.
    """
    names = []
    for i in range(1, model.k + 1):
        names += [f"head{i}.out.weight", f"head{i}.out.bias"]
        if f"isc{i}.weight" in model.params:
            names += [f"isc{i}.weight", f"isc{i}.bias"]
    return names


def backbone_params(model: MultiExitModel) -> list[str]:
    return [n for n in model.params if n.startswith("block")]


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"MXCK"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: MultiExitModel) -> bytes:
    """Serialize a model.

    Layout (little-endian): magic ``MXCK``, u32 version, u32 config length,
    config text (UTF-8, canonical ``key=value``), u32 parameter count, then per
    parameter: u32 name length, name, u32 ndim, u32 dims, float64 values.
    """
    buf = io.BytesIO()
    cfg_text = model.cfg.to_text().encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_text)))
    buf.write(cfg_text)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(blob: bytes) -> MultiExitModel:
    view = memoryview(blob)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ValueError("not a multiexit checkpoint (bad magic)")
    pos = 4

    def read(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, view, pos)
        pos += struct.calcsize(fmt)
        return vals

    version, cfg_len = read("<II")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig.from_text(bytes(view[pos:pos + cfg_len]).decode())
    pos += cfg_len
    (n_params,) = read("<I")
    params = {}
    for _ in range(n_params):
        (name_len,) = read("<I")
        name = bytes(view[pos:pos + name_len]).decode()
        pos += name_len
        (ndim,) = read("<I")
        shape = read(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(view, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        params[name] = Tensor(values.astype(np.float64), requires_grad=True)
    if pos != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return MultiExitModel(cfg, params)


def save_checkpoint(model: MultiExitModel, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def load_checkpoint(path) -> MultiExitModel:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
