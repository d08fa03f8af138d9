"""CNN-BiLSTM recognizer and its checkpoint format.

Five conv/pool stages turn a 128x32 plane into a 32x1x256 volume, the
singleton axis is dropped, a bidirectional LSTM reads the 32 steps, and a
dense layer projects every step onto the character classes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .tensor import BatchNormState, ShapeError, Tensor

CHECKPOINT_MAGIC = b"HWRC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HwrcnetConfig:
    input_shape: tuple[int, int] = (128, 32)
    maps: tuple[int, ...] = (32, 64, 128, 128, 256)
    kernels: tuple[int, ...] = (5, 5, 3, 3, 3)
    pools: tuple[tuple[int, int], ...] = ((2, 2), (2, 2), (1, 2), (1, 2), (1, 2))
    batchnorm_stage: int | None = 2
    hidden: int = 256
    num_classes: int = 80

    def __post_init__(self):
        # json round trips turn tuples into lists
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "maps", tuple(self.maps))
        object.__setattr__(self, "kernels", tuple(self.kernels))
        object.__setattr__(self, "pools", tuple(tuple(p) for p in self.pools))
        if not (len(self.maps) == len(self.kernels) == len(self.pools)):
            raise ValueError("maps, kernels and pools must have one entry per stage")
        steps, rows = self.input_shape
        for ph, pw in self.pools:
            if steps % ph or rows % pw:
                raise ValueError(f"pool schedule {self.pools} does not tile input {self.input_shape}")
            steps, rows = steps // ph, rows // pw
        if rows != 1:
            raise ValueError(f"pool schedule leaves {rows} rows; the collapse needs exactly 1")

    @property
    def time_steps(self) -> int:
        steps = self.input_shape[0]
        for ph, _ in self.pools:
            steps //= ph
        return steps

    @property
    def feature_size(self) -> int:
        return self.maps[-1]


def tiny_config(num_classes: int = 8) -> HwrcnetConfig:
    """Scaled-down geometry (16x8 input, 8 steps) for gradient checks."""
    return HwrcnetConfig(input_shape=(16, 8), maps=(4, 8, 8, 8, 16),
                         pools=((2, 2), (1, 2), (1, 2), (1, 1), (1, 1)),
                         hidden=16, num_classes=num_classes)


@dataclass
class LstmCell:
    w_input: Tensor
    w_hidden: Tensor
    bias: Tensor

    @property
    def hidden(self) -> int:
        return self.w_hidden.shape[0]


def _truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return (out * std).astype(dtype)


def _glorot_uniform(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, shape).astype(dtype)


INIT_SCHEME = {
    "conv": "truncated_normal(std=sqrt(2/fan_in))",
    "projection": "truncated_normal(std=0.1)",
    "lstm": "glorot_uniform",
    "bias": "zeros",
}


def bilstm_forward(features, fw: LstmCell, bw: LstmCell) -> Tensor:
    """Run ``fw`` left to right and ``bw`` right to left; concatenate outputs.

    ``features`` is [T, F] or [B, T, F]; the result has 2*hidden features.
    """
    features = features if isinstance(features, Tensor) else Tensor(features)
    if features.ndim not in (2, 3) or features.shape[-1] != fw.w_input.shape[0]:
        raise ShapeError(f"bilstm: features {features.shape} do not match "
                         f"input size {fw.w_input.shape[0]}")
    forward = tn.lstm(features, fw.w_input, fw.w_hidden, fw.bias)
    backward = tn.lstm(features, bw.w_input, bw.w_hidden, bw.bias, reverse=True)
    return tn.concat([forward, backward], axis=-1)


class HWRCNet:
    """Parameters and batch-norm state of one recognizer instance."""

    def __init__(self, config: HwrcnetConfig | None = None, seed: int = 0, dtype=None):
        self.config = config or HwrcnetConfig()
        self.seed = seed
        dtype = np.dtype(dtype or tn.get_default_dtype())
        rng = np.random.default_rng(seed)
        cfg = self.config
        self.params: dict[str, Tensor] = {}
        cin = 1
        for s, (cout, k) in enumerate(zip(cfg.maps, cfg.kernels)):
            std = np.sqrt(2.0 / (k * k * cin))  # He scaling for the relu that follows
            self._add(f"conv{s}.kernel", _truncated_normal(rng, (k, k, cin, cout), std, dtype))
            self._add(f"conv{s}.bias", np.zeros(cout, dtype))
            cin = cout
        self.bn = None
        if cfg.batchnorm_stage is not None:
            c = cfg.maps[cfg.batchnorm_stage]
            self._add("bn.gamma", np.ones(c, dtype))
            self._add("bn.beta", np.zeros(c, dtype))
            with tn.precision(dtype):
                self.bn = BatchNormState(c)
        H, F = cfg.hidden, cfg.feature_size
        for d in ("fw", "bw"):
            self._add(f"lstm_{d}.w_input", _glorot_uniform(rng, (F, 4 * H), dtype))
            self._add(f"lstm_{d}.w_hidden", _glorot_uniform(rng, (H, 4 * H), dtype))
            self._add(f"lstm_{d}.bias", np.zeros(4 * H, dtype))
        self._add("proj.weight", _truncated_normal(rng, (2 * H, cfg.num_classes), 0.1, dtype))
        self._add("proj.bias", np.zeros(cfg.num_classes, dtype))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    @property
    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def cell(self, direction: str) -> LstmCell:
        p = self.params
        return LstmCell(p[f"lstm_{direction}.w_input"], p[f"lstm_{direction}.w_hidden"],
                        p[f"lstm_{direction}.bias"])

    def cnn_forward(self, x, training: bool = False) -> Tensor:
        """[B, 128, 32] (or unbatched [128, 32]) planes -> [B, 32, 256] features."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.config
        unbatched = x.ndim == 2
        if unbatched:
            x = tn.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1:] != cfg.input_shape:
            raise ShapeError(f"expected input planes of shape {cfg.input_shape}, got {x.shape}")
        h = tn.reshape(x, x.shape + (1,))
        for s, pool in enumerate(cfg.pools):
            h = tn.conv2d(h, self.params[f"conv{s}.kernel"], self.params[f"conv{s}.bias"])
            h = tn.relu(h)
            h = tn.maxpool2d(h, pool)
            if s == cfg.batchnorm_stage:
                h = tn.batchnorm(h, self.params["bn.gamma"], self.params["bn.beta"], self.bn, training)
        B, T, rows, C = h.shape
        assert rows == 1 and T == cfg.time_steps
        h = tn.reshape(h, (B, T, C))
        return tn.reshape(h, (T, C)) if unbatched else h

    def forward(self, x, training: bool = False) -> Tensor:
        """Per-step class log-probabilities, [B, T, num_classes]."""
        feats = self.cnn_forward(x, training)
        seq = bilstm_forward(feats, self.cell("fw"), self.cell("bw"))
        logits = tn.dense(seq, self.params["proj.weight"], self.params["proj.bias"])
        return tn.log_softmax(logits, axis=-1)

    __call__ = forward

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays: parameters plus batch-norm running statistics."""
        out = {k: v.data for k, v in self.params.items()}
        if self.bn is not None and self.bn.running_mean is not None:
            out["bn.running_mean"] = self.bn.running_mean
            out["bn.running_var"] = self.bn.running_var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint lacks parameter {name}")
            if arrays[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = arrays[name].astype(p.dtype)
        if self.bn is not None and "bn.running_mean" in arrays:
            self.bn.running_mean = arrays["bn.running_mean"].astype(self.params["bn.gamma"].dtype)
            self.bn.running_var = arrays["bn.running_var"].astype(self.params["bn.gamma"].dtype)


def model_forward(x, model: HWRCNet, training: bool = False) -> Tensor:
    return model.forward(x, training)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    model: HWRCNet
    vocab: str
    step: int = 0
    optimizer: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)


def _write_block(buf: io.BufferedIOBase, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write magic, version, a length-prefixed JSON header, then float32 blocks."""
    blocks = dict(ckpt.model.state_arrays())
    if ckpt.optimizer:
        blocks.update({f"adam/{k}": v for k, v in ckpt.optimizer.items()})
    header = {
        "config": asdict(ckpt.model.config),
        "vocab": ckpt.vocab,
        "step": ckpt.step,
        "optimizer_state": bool(ckpt.optimizer),
        "seed": ckpt.model.seed,
        "init": INIT_SCHEME,
        "blocks": len(blocks),
        **ckpt.meta,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<BI", CHECKPOINT_VERSION, len(raw)))
    buf.write(raw)
    for name, arr in blocks.items():
        _write_block(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<BI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 9
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    arrays: dict[str, np.ndarray] = {}
    for _ in range(header["blocks"]):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, "<f4", count, pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    config = HwrcnetConfig(**header.pop("config"))
    model = HWRCNet(config, seed=header.get("seed", 0), dtype=np.float32)
    model.load_arrays(arrays)
    optimizer = {k[5:]: v for k, v in arrays.items() if k.startswith("adam/")} or None
    vocab = header.pop("vocab")
    step = header.pop("step")
    for key in ("optimizer_state", "seed", "init", "blocks"):
        header.pop(key, None)
    return Checkpoint(model, vocab, step, optimizer, header)
