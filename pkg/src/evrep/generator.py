"""Encoder-decoder generator mapping 3-channel event frames to 3-channel
LLM-ready images of the same spatial size.

The stem is two 3x3 convolutions. Each encoder stage max-pools by 2 and
applies a run of Fused-MBConv or MBConv blocks; the decoder mirrors the
stages with bilinear upsampling and skip concatenation from the matching
encoder level. A pair of 1x1 convolutions reduces channels to 3, and a
sigmoid bounds the output to (0, 1).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ChecksumMismatch, ConfigMismatch, InvalidConfig, IOFailure, ShapeMismatch

BLOCK_KINDS = ("fused", "mbconv")
HEAD_HIDDEN = 16
_CKPT_MAGIC = b"EVREPGEN1\n"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class GeneratorConfig:
    stem_channels: int = 32
    stage_channels: tuple[int, ...] = (48, 80, 160)
    stage_repeats: tuple[int, ...] = (2, 2, 3)
    stage_kind: tuple[str, ...] = ("fused", "fused", "mbconv")
    expansion_ratio: float = 4.0
    se_ratio: float = 0.25  # applied to MBConv blocks only
    output_activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_repeats", tuple(int(r) for r in self.stage_repeats))
        object.__setattr__(self, "stage_kind", tuple(self.stage_kind))
        n = len(self.stage_channels)
        if not (n == len(self.stage_repeats) == len(self.stage_kind)):
            raise InvalidConfig("stage_channels, stage_repeats and stage_kind must have equal lengths")
        if n == 0:
            raise InvalidConfig("at least one stage is required")
        if self.stem_channels <= 0 or any(c <= 0 for c in self.stage_channels):
            raise InvalidConfig("channel counts must be positive")
        if any(r < 1 for r in self.stage_repeats):
            raise InvalidConfig("stage repeats must be >= 1")
        if any(k not in BLOCK_KINDS for k in self.stage_kind):
            raise InvalidConfig(f"stage kinds must be in {BLOCK_KINDS}")
        if self.expansion_ratio <= 0:
            raise InvalidConfig("expansion_ratio must be positive")
        if not 0.0 <= self.se_ratio <= 1.0:
            raise InvalidConfig("se_ratio must lie in [0, 1]")
        if self.output_activation != "sigmoid":
            raise InvalidConfig(f"unsupported output activation {self.output_activation!r}")

    @property
    def grid_factor(self) -> int:
        """Spatial dims must be divisible by this before a forward pass."""
        return 2 ** len(self.stage_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("stage_channels", "stage_repeats", "stage_kind"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


class ConvBNAct(nn.Sequential):
    def __init__(self, in_ch, out_ch, kernel, groups=1, act=True):
        layers = [
            nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2, groups=groups, bias=False),
            nn.BatchNorm2d(out_ch),
        ]
        if act:
            layers.append(nn.SiLU(inplace=True))
        super().__init__(*layers)


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduced):
        super().__init__()
        self.reduce = nn.Conv2d(channels, reduced, 1)
        self.expand = nn.Conv2d(reduced, channels, 1)

    def forward(self, x):
        s = x.mean(dim=(2, 3), keepdim=True)
        s = torch.sigmoid(self.expand(F.silu(self.reduce(s))))
        return x * s


class FusedMBConv(nn.Module):
    """Expansion and depthwise steps merged into one 3x3 convolution."""

    def __init__(self, in_ch, out_ch, expansion):
        super().__init__()
        hidden = int(round(in_ch * expansion))
        self.use_residual = in_ch == out_ch
        if hidden == in_ch:
            self.layers = nn.Sequential(ConvBNAct(in_ch, out_ch, 3))
        else:
            self.layers = nn.Sequential(
                ConvBNAct(in_ch, hidden, 3),
                ConvBNAct(hidden, out_ch, 1, act=False),
            )

    def forward(self, x):
        out = self.layers(x)
        return x + out if self.use_residual else out


class MBConv(nn.Module):
    """Inverted bottleneck: 1x1 expand, 3x3 depthwise, squeeze-excite, 1x1 project."""

    def __init__(self, in_ch, out_ch, expansion, se_ratio):
        super().__init__()
        hidden = int(round(in_ch * expansion))
        self.use_residual = in_ch == out_ch
        layers = []
        if hidden != in_ch:
            layers.append(ConvBNAct(in_ch, hidden, 1))
        layers.append(ConvBNAct(hidden, hidden, 3, groups=hidden))
        if se_ratio > 0:
            layers.append(SqueezeExcite(hidden, max(1, int(in_ch * se_ratio))))
        layers.append(ConvBNAct(hidden, out_ch, 1, act=False))
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        out = self.layers(x)
        return x + out if self.use_residual else out


def _make_blocks(kind, in_ch, out_ch, repeats, expansion, se_ratio):
    blocks = []
    for i in range(repeats):
        cin = in_ch if i == 0 else out_ch
        if kind == "fused":
            blocks.append(FusedMBConv(cin, out_ch, expansion))
        else:
            blocks.append(MBConv(cin, out_ch, expansion, se_ratio))
    return nn.Sequential(*blocks)


class EncoderStage(nn.Module):
    def __init__(self, in_ch, out_ch, kind, repeats, expansion, se_ratio):
        super().__init__()
        self.pool = nn.MaxPool2d(2)
        self.blocks = _make_blocks(kind, in_ch, out_ch, repeats, expansion, se_ratio)

    def forward(self, x):
        return self.blocks(self.pool(x))


class DecoderStage(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch, kind, repeats, expansion, se_ratio):
        super().__init__()
        self.blocks = _make_blocks(kind, in_ch + skip_ch, out_ch, repeats, expansion, se_ratio)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)
        return self.blocks(torch.cat([x, skip], dim=1))


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        s = config.stem_channels
        self.stem = nn.Sequential(ConvBNAct(3, s, 3), ConvBNAct(s, s, 3))

        level_channels = [s, *config.stage_channels]  # channels at levels 0..N
        self.encoder = nn.ModuleList(
            EncoderStage(
                level_channels[i],
                level_channels[i + 1],
                config.stage_kind[i],
                config.stage_repeats[i],
                config.expansion_ratio,
                config.se_ratio,
            )
            for i in range(len(config.stage_channels))
        )
        # Deepest stage first; stage i restores level i from level i + 1.
        self.decoder = nn.ModuleList(
            DecoderStage(
                level_channels[i + 1],
                level_channels[i],
                level_channels[i],
                config.stage_kind[i],
                config.stage_repeats[i],
                config.expansion_ratio,
                config.se_ratio,
            )
            for i in reversed(range(len(config.stage_channels)))
        )
        self.head = nn.Sequential(
            nn.Conv2d(s, HEAD_HIDDEN, 1),
            nn.SiLU(inplace=True),
            nn.Conv2d(HEAD_HIDDEN, 3, 1),
        )

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected (B, 3, H, W), got {tuple(x.shape)}")
        factor = self.config.grid_factor
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeMismatch(
                f"spatial dims {tuple(x.shape[2:])} not divisible by {factor}; pad first"
            )
        feats = self.stem(x)
        skips = [feats]
        for stage in self.encoder:
            feats = stage(feats)
            skips.append(feats)
        feats = skips.pop()
        for stage in self.decoder:
            feats = stage(feats, skips.pop())
        return torch.sigmoid(self.head(feats))

    def parameter_checksum(self) -> str:
        """SHA-256 over all parameters and buffers, in state-dict order."""
        h = hashlib.sha256()
        for name, tensor in self.state_dict().items():
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def build_generator(config: GeneratorConfig, seed: int = 0) -> Generator:
    """Construct a generator with deterministic, seed-keyed initialization."""
    model = Generator(config)
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
                bound = math.sqrt(6.0 / fan_in)
                m.weight.uniform_(-bound, bound, generator=g)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
    return model


# --- grid padding ---


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int


def pad_to_grid(image: np.ndarray, factor: int) -> tuple[np.ndarray, CropRecord]:
    """Reflection-pad bottom/right so both spatial dims are multiples of
    ``factor``. The returned record inverts the padding exactly."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    h, w = image.shape[:2]
    pad_h = (-h) % factor
    pad_w = (-w) % factor
    record = CropRecord(height=h, width=w)
    if pad_h == 0 and pad_w == 0:
        return image, record
    # np reflect needs pad < dim; fall back for degenerate tiny images
    mode = "reflect" if (pad_h < h and pad_w < w) else "symmetric"
    spec = ((0, pad_h), (0, pad_w)) + ((0, 0),) * (image.ndim - 2)
    return np.pad(image, spec, mode=mode), record


def crop_to_record(image: np.ndarray, record: CropRecord) -> np.ndarray:
    return image[: record.height, : record.width]


# --- checkpoints ---


@dataclass
class CheckpointMeta:
    seed: int = 0
    step: int = 0
    metrics_tail: list = field(default_factory=list)
    version: int = _CKPT_VERSION


def save_checkpoint(generator: Generator, path: str | Path, meta: CheckpointMeta | None = None) -> None:
    """Binary checkpoint: magic, JSON header, raw tensor blob, SHA-256 digest."""
    meta = meta or CheckpointMeta()
    state = generator.state_dict()
    tensors = []
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps(
        {
            "version": meta.version,
            "config": generator.config.to_dict(),
            "seed": meta.seed,
            "step": meta.step,
            "metrics_tail": meta.metrics_tail,
            "tensors": tensors,
        }
    ).encode()
    body = _CKPT_MAGIC + len(header).to_bytes(4, "little") + header + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    try:
        Path(path).write_bytes(body + digest)
    except OSError as e:
        raise IOFailure(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(
    path: str | Path, expected_config: GeneratorConfig | None = None
) -> tuple[Generator, CheckpointMeta]:
    """Rebuild a generator from a checkpoint file.

    Raises ChecksumMismatch for corrupt or truncated files and
    ConfigMismatch when ``expected_config`` differs from the stored one.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IOFailure(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < len(_CKPT_MAGIC) + 4 + 32 or not raw.startswith(_CKPT_MAGIC):
        raise ChecksumMismatch(f"{path} is not a generator checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch(f"{path} failed its integrity check")
    offset = len(_CKPT_MAGIC)
    header_len = int.from_bytes(body[offset : offset + 4], "little")
    offset += 4
    try:
        header = json.loads(body[offset : offset + header_len])
    except json.JSONDecodeError as e:
        raise ChecksumMismatch(f"{path}: unreadable header: {e}") from e
    offset += header_len
    config = GeneratorConfig.from_dict(header["config"])
    if expected_config is not None and config != expected_config:
        raise ConfigMismatch(f"checkpoint config {config} != expected {expected_config}")
    state = {}
    for entry in header["tensors"]:
        arr_dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * arr_dtype.itemsize
        chunk = body[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ChecksumMismatch(f"{path}: tensor blob truncated at {entry['name']}")
        arr = np.frombuffer(chunk, dtype=arr_dtype).reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(arr)
        offset += nbytes
    model = Generator(config)
    model.load_state_dict(state)
    meta = CheckpointMeta(
        seed=header.get("seed", 0),
        step=header.get("step", 0),
        metrics_tail=header.get("metrics_tail", []),
        version=header.get("version", _CKPT_VERSION),
    )
    return model, meta
