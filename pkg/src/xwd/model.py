"""3D squeeze-and-excitation residual encoder with a single-logit head."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .exceptions import CorruptCheckpoint, DimensionMismatch, InvalidConfig, ShapeMismatch
from .windowing import NormStats

CKPT_MAGIC = b"XWCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int = 64
    stage_channels: tuple = (8, 16, 32, 64)
    input_shape: tuple = (1, 8, 64, 64)
    se_reduction: int = 4
    blocks_per_stage: tuple = (1, 1, 1, 1)
    stem_channels: int = 8
    block: str = "basic"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "input_shape", tuple(int(c) for c in self.input_shape))
        object.__setattr__(self, "blocks_per_stage", tuple(int(c) for c in self.blocks_per_stage))
        if not self.stage_channels:
            raise InvalidConfig("at least one stage is required")
        if self.feature_dim != self.stage_channels[-1]:
            raise InvalidConfig(f"feature_dim {self.feature_dim} must equal the final stage width {self.stage_channels[-1]}")
        if len(self.blocks_per_stage) != len(self.stage_channels) or min(self.blocks_per_stage) < 1:
            raise InvalidConfig("blocks_per_stage needs one positive count per stage")
        if len(self.input_shape) != 4 or self.input_shape[0] != 1 or min(self.input_shape) < 1:
            raise InvalidConfig(f"input_shape must be (1, T, H, W), got {self.input_shape}")
        if self.se_reduction < 1 or any(c % self.se_reduction for c in self.stage_channels):
            raise InvalidConfig(f"se_reduction {self.se_reduction} must divide every stage width {self.stage_channels}")
        if self.block not in ("basic", "bottleneck"):
            raise InvalidConfig(f"unknown block type {self.block!r}")
        if self.block == "bottleneck" and any(c % 4 for c in self.stage_channels):
            raise InvalidConfig("bottleneck stages need widths divisible by 4")

    @classmethod
    def tiny(cls, slices=8, height=64, width=64):
        return cls(input_shape=(1, slices, height, width))

    @classmethod
    def se_resnet50(cls, slices=32, height=512, width=512):
        return cls(
            feature_dim=2048,
            stage_channels=(256, 512, 1024, 2048),
            input_shape=(1, slices, height, width),
            se_reduction=16,
            blocks_per_stage=(3, 4, 6, 3),
            stem_channels=64,
            block="bottleneck",
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduction):
        super().__init__()
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gate(self, x):
        s = x.mean(dim=(2, 3, 4))
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gate(x)[:, :, None, None, None]


def _conv_bn(cin, cout, kernel, stride=1):
    pad = tuple(k // 2 for k in kernel) if isinstance(kernel, tuple) else kernel // 2
    return nn.Sequential(nn.Conv3d(cin, cout, kernel, stride, pad, bias=False), nn.BatchNorm3d(cout))


class BasicSEBlock(nn.Module):
    def __init__(self, cin, cout, stride, reduction):
        super().__init__()
        self.conv1 = _conv_bn(cin, cout, 3, stride)
        self.conv2 = _conv_bn(cout, cout, 3)
        self.se = SqueezeExcite(cout, reduction)
        self.shortcut = _conv_bn(cin, cout, 1, stride) if (stride != 1 or cin != cout) else nn.Identity()

    def forward(self, x):
        out = torch.relu(self.conv1(x))
        out = self.se(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class BottleneckSEBlock(nn.Module):
    def __init__(self, cin, cout, stride, reduction):
        super().__init__()
        mid = cout // 4
        self.conv1 = _conv_bn(cin, mid, 1)
        self.conv2 = _conv_bn(mid, mid, 3, stride)
        self.conv3 = _conv_bn(mid, cout, 1)
        self.se = SqueezeExcite(cout, reduction)
        self.shortcut = _conv_bn(cin, cout, 1, stride) if (stride != 1 or cin != cout) else nn.Identity()

    def forward(self, x):
        out = torch.relu(self.conv1(x))
        out = torch.relu(self.conv2(out))
        out = self.se(self.conv3(out))
        return torch.relu(out + self.shortcut(x))


class SEResEncoder(nn.Module):
    """Stem, residual SE stages, global average pool -> ``feature_dim`` vector."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        block = BasicSEBlock if config.block == "basic" else BottleneckSEBlock
        self.stem = nn.Sequential(
            nn.Conv3d(1, config.stem_channels, (3, 7, 7), (1, 2, 2), (1, 3, 3), bias=False),
            nn.BatchNorm3d(config.stem_channels),
            nn.ReLU(),
        )
        cin = config.stem_channels
        for i, (cout, n) in enumerate(zip(config.stage_channels, config.blocks_per_stage)):
            blocks = []
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(block(cin, cout, stride, config.se_reduction))
                cin = cout
            self.add_module(f"stage{i + 1}", nn.Sequential(*blocks))
        self.n_stages = len(config.stage_channels)

    @property
    def layer_names(self):
        return ["stem"] + [f"stage{i + 1}" for i in range(self.n_stages)]

    def forward(self, x):
        x = self.stem(x)
        for i in range(self.n_stages):
            x = getattr(self, f"stage{i + 1}")(x)
        return x.mean(dim=(2, 3, 4))


class WindowNet(nn.Module):
    def __init__(self, encoder: nn.Module, feature_dim: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(feature_dim, 1)

    def forward(self, x):
        h = self.encoder(x)
        return h, self.head(h).squeeze(-1)


def _init_weights(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


@dataclass
class EncoderState:
    """Parameters of one window's encoder and head, plus bookkeeping."""

    config: EncoderConfig
    net: WindowNet
    window_name: str = ""
    trainable: bool = True
    provenance: str = "supervised"
    norm_stats: NormStats | None = None
    info: dict = field(default_factory=dict)

    @property
    def encoder(self):
        return self.net.encoder

    @property
    def head(self):
        return self.net.head

    def freeze(self):
        self.trainable = False
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()
        return self

    def clone(self):
        return load_checkpoint_bytes(checkpoint_bytes(self))

    def parameter_hash(self, part="all"):
        """SHA-256 over parameters and buffers of ``encoder``, ``head`` or both."""
        module = {"all": self.net, "encoder": self.net.encoder, "head": self.net.head}[part]
        h = hashlib.sha256()
        for name, t in sorted(module.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def build_encoder(config: EncoderConfig, seed: int = 0, window_name: str = "") -> EncoderState:
    if not isinstance(config, EncoderConfig):
        raise InvalidConfig(f"expected EncoderConfig, got {type(config).__name__}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = WindowNet(SEResEncoder(config), config.feature_dim)
        _init_weights(net)
    return EncoderState(config, net, window_name)


def as_batch(state: EncoderState, x) -> torch.Tensor:
    """Coerce ``(T,H,W)``, ``(1,T,H,W)``, ``(N,T,H,W)`` or ``(N,1,T,H,W)`` to a 5-D tensor."""
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float32))
    expected = state.config.input_shape[1:]
    if tuple(t.shape[-3:]) != expected:
        raise ShapeMismatch(f"input volume {tuple(t.shape[-3:])} does not match configured {expected}")
    if t.dim() == 3:
        t = t[None, None]
    elif t.dim() == 4:
        t = t[:, None]
    elif t.dim() != 5 or t.shape[1] != 1:
        raise ShapeMismatch(f"cannot interpret input of shape {tuple(t.shape)}")
    return t.to(next(state.net.parameters()).dtype)


def _eval_batches(state, x, batch_size, fn):
    t = as_batch(state, x)
    was_training = state.net.training
    state.net.eval()
    try:
        with torch.no_grad():
            out = [fn(t[i : i + batch_size]) for i in range(0, len(t), batch_size)]
    finally:
        state.net.train(was_training)
    return torch.cat(out).cpu().numpy().astype(np.float64)


def forward_features(state: EncoderState, x, batch_size: int = 16) -> np.ndarray:
    """Evaluation-mode feature vectors, ``(D,)`` for a single volume or ``(N, D)``."""
    single = (x.dim() if isinstance(x, torch.Tensor) else np.ndim(x)) == 3
    out = _eval_batches(state, x, batch_size, state.net.encoder)
    return out[0] if single else out


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


@dataclass(frozen=True)
class Logit:
    z: np.ndarray | float
    p: np.ndarray | float


def forward_logit(state: EncoderState, h) -> Logit:
    h = np.asarray(h, dtype=np.float64)
    D = state.config.feature_dim
    if h.shape[-1] != D or h.ndim not in (1, 2):
        raise DimensionMismatch(f"feature vector of length {h.shape[-1] if h.ndim else 0} for head of width {D}")
    w = state.head.weight.detach().cpu().numpy().astype(np.float64).ravel()
    b = float(state.head.bias.detach().cpu().numpy()[0])
    z = h @ w + b
    if h.ndim == 1:
        z = float(z)
        return Logit(z, float(sigmoid(z)))
    return Logit(z, sigmoid(z))


def predict_proba(state: EncoderState, x, batch_size: int = 16) -> np.ndarray:
    return sigmoid(_eval_batches(state, x, batch_size, lambda t: state.net(t)[1]))


# ----------------------------------------------------------------- checkpoints


def checkpoint_bytes(state: EncoderState) -> bytes:
    tensors, blobs, offset = [], [], 0
    for name, t in state.net.state_dict().items():
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": state.config.to_dict(),
        "window_name": state.window_name,
        "trainable": state.trainable,
        "provenance": state.provenance,
        "norm_stats": state.norm_stats.to_dict() if state.norm_stats else None,
        "info": state.info,
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True).encode()
    payload = head + b"".join(blobs)
    digest = hashlib.sha256(payload).digest()
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(head)) + payload + digest


def load_checkpoint_bytes(data: bytes, config: EncoderConfig | None = None) -> EncoderState:
    if len(data) < 16 + 32 or data[:4] != CKPT_MAGIC:
        raise CorruptCheckpoint("not an encoder checkpoint (bad magic or too short)")
    version, head_len = struct.unpack("<IQ", data[4:16])
    if version != CKPT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    payload, digest = data[16:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptCheckpoint("checksum mismatch (truncated or modified file)")
    try:
        header = json.loads(payload[:head_len])
    except ValueError as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from None
    stored = EncoderConfig.from_dict(header["config"])
    if config is not None and config.feature_dim != stored.feature_dim:
        raise DimensionMismatch(f"checkpoint has feature_dim {stored.feature_dim}, expected {config.feature_dim}")
    if config is not None and config != stored:
        raise DimensionMismatch("checkpoint architecture differs from the requested configuration")

    state = build_encoder(stored, seed=0, window_name=header["window_name"])
    blob = payload[head_len:]
    tensors = {}
    for spec in header["tensors"]:
        raw = blob[spec["offset"] : spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"])
        tensors[spec["name"]] = torch.from_numpy(arr.copy())
    state.net.load_state_dict(tensors, strict=True)
    state.provenance = header["provenance"]
    state.info = header.get("info") or {}
    ns = header.get("norm_stats")
    state.norm_stats = NormStats(**ns) if ns else None
    if not header["trainable"]:
        state.freeze()
    return state


def save_checkpoint(state: EncoderState, path) -> str:
    """Write ``state`` to ``path``; returns the SHA-256 of the file."""
    data = checkpoint_bytes(state)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, config: EncoderConfig | None = None) -> EncoderState:
    return load_checkpoint_bytes(Path(path).read_bytes(), config)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
