"""Two encoder-decoder segmentation networks of asymmetric capacity.

The lightweight "student" and the larger "teacher" share one architecture
family: single 3x3 conv per encoder level with 2x max pooling between
levels, and a lean decoder (nearest upsample, skip concat, 1x1 reduction,
3x3 refinement except at full resolution). Decoder widths are half the
matching encoder widths, which keeps full-resolution work cheap enough for
CPU training while the encoder carries the capacity difference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import BinaryIO, List, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, ShapeError

CHECKPOINT_MAGIC = "SEGCKPT 1"


@dataclass(frozen=True)
class SegNetSpec:
    """Static description of one network; spatial dims must survive the
    encoder's repeated 2x pooling."""

    name: str
    enc_channels: Tuple[int, ...]
    height: int = 64
    width: int = 64
    in_channels: int = 1
    num_classes: int = 2

    def __post_init__(self):
        if len(self.enc_channels) < 2:
            raise ConfigError(f"{self.name}: need at least two encoder levels")
        down = 2 ** (len(self.enc_channels) - 1)
        if self.height % down or self.width % down:
            raise ConfigError(
                f"{self.name}: input {self.height}x{self.width} not divisible by {down}")

    @property
    def dec_channels(self) -> Tuple[int, ...]:
        return tuple(max(c // 2, 4) for c in self.enc_channels[:-1])

    @property
    def embedding_dim(self) -> int:
        return self.enc_channels[-1]


def student_spec(height: int = 64, width: int = 64) -> SegNetSpec:
    return SegNetSpec("student", (8, 16, 32), height, width)


def teacher_spec(height: int = 64, width: int = 64) -> SegNetSpec:
    # wide enough for a ~10x parameter gap over the student while a full
    # co-training iteration stays CPU-cheap
    return SegNetSpec("teacher", (12, 24, 48, 96), height, width)


class SegNet:
    """Encoder-decoder segmentation network over the autograd engine."""

    def __init__(self, spec: SegNetSpec, seed: int):
        self.spec = spec
        self.seed = int(seed)
        self._params: List[Tuple[str, Tensor]] = []
        rng = np.random.default_rng(self.seed)

        enc = spec.enc_channels
        dec = spec.dec_channels
        self._enc_convs = []
        prev = spec.in_channels
        for i, c in enumerate(enc):
            self._enc_convs.append(self._make_conv(rng, f"enc{i}", prev, c, 3))
            prev = c
        self._dec_reduce = []
        self._dec_refine = []
        prev = enc[-1]
        for i in range(len(enc) - 2, -1, -1):
            self._dec_reduce.append(
                self._make_split_reduce(rng, f"dec{i}_reduce", prev, enc[i], dec[i]))
            # 3x3 refinement only at coarse scales; the two finest levels
            # stay pointwise to keep full/half-resolution work cheap
            if i > 1:
                self._dec_refine.append(
                    self._make_conv(rng, f"dec{i}_refine", dec[i], dec[i], 3))
            else:
                self._dec_refine.append(None)
            prev = dec[i]
        # per-pixel classifier; full-resolution context comes from the level-0
        # skip fused just above
        self._head = self._make_conv(rng, "head", dec[0], spec.num_classes, 1)

    def _make_conv(self, rng, name: str, cin: int, cout: int, k: int):
        bound = np.sqrt(6.0 / (cin * k * k))  # Kaiming-uniform, fan-in
        w = Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)), requires_grad=True)
        b = Tensor(np.zeros(cout), requires_grad=True)
        self._params.append((f"{name}.w", w))
        self._params.append((f"{name}.b", b))
        return w, b

    def _make_split_reduce(self, rng, name: str, c_up: int, c_skip: int, cout: int):
        # 1x1 fusion of upsampled deep features with the skip connection;
        # equivalent to concat followed by one 1x1 conv, minus the concat copy
        bound = np.sqrt(6.0 / (c_up + c_skip))
        wu = Tensor(rng.uniform(-bound, bound, size=(cout, c_up, 1, 1)), requires_grad=True)
        ws = Tensor(rng.uniform(-bound, bound, size=(cout, c_skip, 1, 1)), requires_grad=True)
        b = Tensor(np.zeros(cout), requires_grad=True)
        self._params.append((f"{name}.wu", wu))
        self._params.append((f"{name}.ws", ws))
        self._params.append((f"{name}.b", b))
        return wu, ws, b

    # ------------------------------------------------------------------
    # internals run channels-last; entry/exit permutes keep the public
    # NCHW contract

    def _encode(self, x: Tensor) -> List[Tensor]:
        feats = []
        h = ag.permute(x, (0, 2, 3, 1))
        for i, (w, b) in enumerate(self._enc_convs):
            if i > 0:
                h = ag.max_pool2d(h, 2, channels_last=True)
            h = ag.relu(ag.conv2d(h, w, b, stride=1, pad=1, channels_last=True))
            feats.append(h)
        return feats

    def _decode(self, feats: List[Tensor]) -> Tensor:
        h = feats[-1]
        levels = len(self._enc_convs)
        for j, i in enumerate(range(levels - 2, -1, -1)):
            h = ag.upsample_nearest(h, 2, channels_last=True)
            wu, ws, b = self._dec_reduce[j]
            h = ag.relu(ag.add(
                ag.conv2d(h, wu, b, stride=1, pad=0, channels_last=True),
                ag.conv2d(feats[i], ws, None, stride=1, pad=0, channels_last=True)))
            refine = self._dec_refine[j]
            if refine is not None:
                rw, rb = refine
                h = ag.relu(ag.conv2d(h, rw, rb, stride=1, pad=1, channels_last=True))
        hw, hb = self._head
        logits = ag.conv2d(h, hw, hb, stride=1, pad=0, channels_last=True)
        return ag.permute(logits, (0, 3, 1, 2))

    def _check_input(self, x: Tensor) -> None:
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.in_channels, s.height, s.width):
            raise ShapeError(
                f"{s.name}: expected (B, {s.in_channels}, {s.height}, {s.width}), got {x.shape}")

    def forward(self, x: Tensor) -> Tensor:
        """Logits of shape (B, num_classes, H, W)."""
        self._check_input(x)
        return self._decode(self._encode(x))

    def embed(self, x: Tensor) -> Tensor:
        """Unit-norm bottleneck embedding, one row per batch item."""
        self._check_input(x)
        return self._embed_from(self._encode(x)[-1], x.shape[0])

    def forward_with_embedding(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """Single encoder pass serving both the logits and the embedding."""
        self._check_input(x)
        feats = self._encode(x)
        return self._decode(feats), self._embed_from(feats[-1], x.shape[0])

    def _embed_from(self, bottleneck: Tensor, batch: int) -> Tensor:
        pooled = ag.adaptive_avg_pool2d(bottleneck, 1, channels_last=True)
        flat = ag.reshape(pooled, (batch, self.spec.embedding_dim))
        return ag.l2_normalize(flat, axis=1, eps=1e-8)

    # ------------------------------------------------------------------

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self._params]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self._params)

    def param_count(self) -> int:
        return int(np.sum([t.size for t in self.parameters()]))

    def state_arrays(self) -> List[np.ndarray]:
        return [t.data.copy() for t in self.parameters()]

    def load_state_arrays(self, arrays: List[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ContractError(
                f"{self.spec.name}: state has {len(arrays)} arrays, net has {len(params)}")
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise ContractError(f"{self.spec.name}: shape {a.shape} != param {p.shape}")
            p.data[...] = a

    def clone(self) -> "SegNet":
        """Independent copy with identical weights (read-only inference use)."""
        other = SegNet(self.spec, self.seed)
        other.load_state_arrays(self.state_arrays())
        return other

    # ------------------------------------------------------------------
    # checkpoint: ASCII manifest + tensor blobs in declaration order

    def save_checkpoint(self, f: BinaryIO) -> None:
        s = self.spec
        lines = [
            CHECKPOINT_MAGIC,
            f"name {s.name}",
            f"enc_channels {','.join(map(str, s.enc_channels))}",
            f"input {s.in_channels} {s.height} {s.width}",
            f"classes {s.num_classes}",
            f"seed {self.seed}",
            f"layers {len(self._params)}",
        ]
        lines += [name for name, _ in self._params]
        lines.append("END")
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for _, t in self._params:
            ag.save_tensor(f, t)

    def load_checkpoint(self, f: BinaryIO) -> None:
        manifest = _read_manifest(f)
        s = self.spec
        expect = {
            "name": s.name,
            "enc_channels": ",".join(map(str, s.enc_channels)),
            "input": f"{s.in_channels} {s.height} {s.width}",
            "classes": str(s.num_classes),
        }
        for key, want in expect.items():
            if manifest[key] != want:
                raise ContractError(
                    f"checkpoint {key} mismatch: file has {manifest[key]!r}, net needs {want!r}")
        names = manifest["param_names"]
        ours = [name for name, _ in self._params]
        if names != ours:
            raise ContractError("checkpoint layer list does not match network")
        self.load_state_arrays([ag.load_tensor(f).data for _ in names])


def _read_manifest(f: BinaryIO) -> dict:
    lines = []
    while True:
        line = _read_ascii_line(f)
        if line == "END":
            break
        lines.append(line)
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ContractError(f"bad checkpoint magic: {lines[:1]}")
    kv = {}
    for line in lines[1:7]:
        key, _, val = line.partition(" ")
        kv[key] = val
    kv["param_names"] = lines[7:]
    if len(kv["param_names"]) != int(kv["layers"]):
        raise ContractError("checkpoint manifest layer count mismatch")
    return kv


def _read_ascii_line(f: BinaryIO) -> str:
    buf = bytearray()
    while True:
        c = f.read(1)
        if not c:
            raise ContractError("truncated checkpoint manifest")
        if c == b"\n":
            return buf.decode("ascii")
        buf.extend(c)


class SGD:
    """Stochastic gradient descent with heavyweight-ball momentum.

    Velocity tracks grad plus decoupled-style L2 term: v <- m*v + (g + wd*p),
    then p <- p - lr*v.
    """

    def __init__(self, params: List[Tensor], lr: float = 0.01,
                 momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                raise ContractError("sgd_step: parameter has no gradient")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        ag.zero_grad(self.params)
