"""
Toy encoders, the projector head and checkpoint persistence.

Container layout (all integers little-endian):
    magic "CBT1" | u32 version | u32 entry count
    per entry: u32 name length, name bytes, u8 dtype code, u8 rank, u32 dims..., payload
    u32 provenance count | per string: u32 length, UTF-8 bytes
    u32 metadata length | UTF-8 JSON metadata
"""
import json
import math
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from handlers.errors import CheckpointFormatError, ShapeError
from handlers.logger import logger
from numerics import DTYPE, AdamState, ParameterVector, check_finite

MAGIC = b"CBT1"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)

_DTYPE_CODES = {torch.float32: 1, torch.float64: 2, torch.int64: 3, torch.uint8: 4}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NP_DTYPES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "u1"}


class EncoderKind(str, Enum):
    MLP = "mlp"
    TINYCONV = "tinyconv"


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"


class EncoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    input_shape: Tuple[int, int, int] = (3, 32, 32)
    kind: EncoderKind = EncoderKind.MLP
    hidden_widths: Tuple[int, ...] = (64, 32)
    embed_dim: int = Field(16, ge=2)
    projector_widths: Tuple[int, ...] = (32, 32)
    activation: Activation = Activation.TANH
    init_seed: int = Field(0, ge=0)

    @field_validator("input_shape", "hidden_widths", "projector_widths")
    @classmethod
    def _positive(cls, v):
        if any(int(x) <= 0 for x in v):
            raise ValueError(f"widths and dims must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def _check_kind(self):
        if self.kind == EncoderKind.TINYCONV and len(self.hidden_widths) != 3:
            raise ValueError("tinyconv needs hidden_widths = (conv0 channels, conv1 channels, linear width)")
        return self

    @property
    def feature_dim(self) -> int:
        """Width of the trunk output fed to the projector and the probe."""
        if self.hidden_widths:
            return self.hidden_widths[-1]
        return int(np.prod(self.input_shape))

    @property
    def map_channels(self) -> int:
        """Channels of the per-pixel maps returned by feature_maps."""
        if self.kind == EncoderKind.TINYCONV:
            return self.hidden_widths[1]
        return self.feature_dim


def _layer_shapes(cfg: EncoderConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    c, _, _ = cfg.input_shape
    shapes = []
    if cfg.kind == EncoderKind.TINYCONV:
        c0, c1, f = cfg.hidden_widths
        shapes += [("encoder.conv0.weight", (c0, c, 3, 3)), ("encoder.conv0.bias", (c0,)),
                   ("encoder.conv1.weight", (c1, c0, 3, 3)), ("encoder.conv1.bias", (c1,)),
                   ("encoder.fc.weight", (f, c1)), ("encoder.fc.bias", (f,))]
        width = f
    else:
        width = int(np.prod(cfg.input_shape))
        for i, h in enumerate(cfg.hidden_widths):
            shapes += [(f"encoder.{i}.weight", (h, width)), (f"encoder.{i}.bias", (h,))]
            width = h
    for i, h in enumerate(tuple(cfg.projector_widths) + (cfg.embed_dim,)):
        shapes += [(f"projector.{i}.weight", (h, width)), (f"projector.{i}.bias", (h,))]
        width = h
    return shapes


def init_params(cfg: EncoderConfig) -> ParameterVector:
    """Weights ~ N(0, 1) / sqrt(fan_in) from a seeded generator; biases zero."""
    gen = torch.Generator().manual_seed(cfg.init_seed)
    entries = []
    for name, shape in _layer_shapes(cfg):
        if name.endswith(".bias"):
            entries.append((name, torch.zeros(shape, dtype=DTYPE)))
        else:
            fan_in = int(np.prod(shape[1:]))
            entries.append((name, torch.randn(shape, generator=gen, dtype=DTYPE) / math.sqrt(fan_in)))
    return ParameterVector(entries)


def encoder_param_count(cfg: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for n, s in _layer_shapes(cfg) if n.startswith("encoder."))


def _act(cfg: EncoderConfig, x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x) if cfg.activation == Activation.TANH else torch.relu(x)


def _check_images(cfg: EncoderConfig, images: torch.Tensor):
    if images.dim() != 4 or tuple(images.shape[1:]) != tuple(cfg.input_shape):
        raise ShapeError(f"Expected images of shape B x {tuple(cfg.input_shape)}, got {tuple(images.shape)}")


def _conv_maps(params: ParameterVector, cfg: EncoderConfig, images: torch.Tensor) -> torch.Tensor:
    x = _act(cfg, F.conv2d(images, params["encoder.conv0.weight"], params["encoder.conv0.bias"], stride=2, padding=1))
    return _act(cfg, F.conv2d(x, params["encoder.conv1.weight"], params["encoder.conv1.bias"], stride=2, padding=1))


def trunk(params: ParameterVector, cfg: EncoderConfig, images: torch.Tensor) -> torch.Tensor:
    """Encoder output (B x feature_dim), the representation reused downstream."""
    _check_images(cfg, images)
    x = images.to(DTYPE)
    if cfg.kind == EncoderKind.TINYCONV:
        pooled = _conv_maps(params, cfg, x).mean(dim=(2, 3))
        return _act(cfg, F.linear(pooled, params["encoder.fc.weight"], params["encoder.fc.bias"]))
    x = x.reshape(x.shape[0], -1)
    for i in range(len(cfg.hidden_widths)):
        x = _act(cfg, F.linear(x, params[f"encoder.{i}.weight"], params[f"encoder.{i}.bias"]))
    return x


def embed(params: ParameterVector, cfg: EncoderConfig, images: torch.Tensor) -> torch.Tensor:
    """Projector output Z (B x D); this is what the BT loss sees."""
    x = trunk(params, cfg, images)
    n_layers = len(cfg.projector_widths) + 1
    for i in range(n_layers):
        x = F.linear(x, params[f"projector.{i}.weight"], params[f"projector.{i}.bias"])
        if i < n_layers - 1:
            x = _act(cfg, x)
    return check_finite(x, "embeddings")


def feature_maps(params: ParameterVector, cfg: EncoderConfig, images: torch.Tensor) -> torch.Tensor:
    """Per-pixel encoder features (B x F x H x W) for the segmentation head."""
    _check_images(cfg, images)
    _, h, w = cfg.input_shape
    if cfg.kind == EncoderKind.TINYCONV:
        maps = _conv_maps(params, cfg, images.to(DTYPE))
        return F.interpolate(maps, size=(h, w), mode="nearest")
    feats = trunk(params, cfg, images)
    return feats[:, :, None, None].expand(-1, -1, h, w)


@dataclass
class Checkpoint:
    params: ParameterVector
    encoder_config: EncoderConfig
    provenance: List[str] = field(default_factory=list)
    format_version: int = FORMAT_VERSION
    adam_state: Optional[AdamState] = None
    extra: Dict[str, object] = field(default_factory=dict)

    def equal(self, other: "Checkpoint") -> bool:
        same_adam = (self.adam_state is None) == (other.adam_state is None)
        if same_adam and self.adam_state is not None:
            a, b = self.adam_state, other.adam_state
            same_adam = (a.m.equal(b.m) and a.v.equal(b.v) and a.step_count == b.step_count
                         and (a.lr, a.beta1, a.beta2, a.eps) == (b.lr, b.beta1, b.beta2, b.eps))
        return (self.params.equal(other.params) and self.encoder_config == other.encoder_config
                and self.provenance == other.provenance and self.format_version == other.format_version
                and self.extra == other.extra and same_adam)


def write_container(path, tensors: List[Tuple[str, torch.Tensor]], strings: List[str],
                    metadata: Dict[str, object], version: int = FORMAT_VERSION):
    chunks = [MAGIC, struct.pack("<II", version, len(tensors))]
    for name, t in tensors:
        code = _DTYPE_CODES.get(t.dtype)
        if code is None:
            raise CheckpointFormatError(f"Unsupported dtype {t.dtype} for tensor '{name}'")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<BB", code, t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.detach().cpu().numpy().astype(_NP_DTYPES[code])).tobytes())
    chunks.append(struct.pack("<I", len(strings)))
    for s in strings:
        raw = s.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta)) + meta)

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fp:
        fp.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"{self.path}: file truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_container(path) -> Tuple[List[Tuple[str, torch.Tensor]], List[str], Dict[str, object], int]:
    try:
        with open(path, "rb") as fp:
            data = fp.read()
    except FileNotFoundError as e:
        raise CheckpointFormatError(f"Container not found: {path}") from e

    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    count = r.u32("entry count")

    tensors, seen = [], set()
    for idx in range(count):
        name = r.take(r.u32(f"name length of entry {idx}"), f"name of entry {idx}").decode("utf-8")
        if name in seen:
            raise CheckpointFormatError(f"{path}: duplicate tensor name '{name}'")
        seen.add(name)
        code, rank = struct.unpack("<BB", r.take(2, f"header of tensor '{name}'"))
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(f"{path}: unknown dtype code {code} for tensor '{name}'")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of tensor '{name}'"))
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(n * np.dtype(_NP_DTYPES[code]).itemsize, f"tensor '{name}'")
        arr = np.frombuffer(payload, dtype=_NP_DTYPES[code]).reshape(dims).copy()
        tensors.append((name, torch.from_numpy(arr)))

    strings = [r.take(r.u32("string length"), "provenance string").decode("utf-8")
               for _ in range(r.u32("provenance count"))]
    raw_meta = r.take(r.u32("metadata length"), "metadata")
    if r.pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - r.pos} trailing bytes after metadata")
    try:
        metadata = json.loads(raw_meta.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: metadata is not valid JSON") from e
    return tensors, strings, metadata, version


_ADAM_M, _ADAM_V = ".adam_m", ".adam_v"


def save_checkpoint(ckpt: Checkpoint, path):
    tensors = list(ckpt.params.items())
    meta: Dict[str, object] = {"encoder_config": ckpt.encoder_config.model_dump(mode="json"),
                               "extra": ckpt.extra}
    if ckpt.adam_state is not None:
        st = ckpt.adam_state
        tensors += [(k + _ADAM_M, v) for k, v in st.m.items()]
        tensors += [(k + _ADAM_V, v) for k, v in st.v.items()]
        meta["adam"] = {"step_count": st.step_count, "lr": st.lr, "beta1": st.beta1,
                        "beta2": st.beta2, "eps": st.eps}
    write_container(path, tensors, list(ckpt.provenance), meta, ckpt.format_version)
    logger.debug(f"Saved checkpoint with {len(ckpt.params)} tensors to {path}")


def load_checkpoint(path) -> Checkpoint:
    tensors, provenance, meta, version = read_container(path)
    try:
        cfg = EncoderConfig.model_validate(meta["encoder_config"])
    except (KeyError, ValueError) as e:
        raise CheckpointFormatError(f"{path}: missing or invalid encoder config") from e

    table = dict(tensors)
    params = ParameterVector((k, v) for k, v in tensors if not k.endswith((_ADAM_M, _ADAM_V)))
    expected = dict(_layer_shapes(cfg))
    if params.shapes() != {k: tuple(s) for k, s in expected.items()}:
        raise CheckpointFormatError(f"{path}: tensor table does not match the encoder config")

    adam = None
    if "adam" in meta:
        try:
            m = ParameterVector((k, table[k + _ADAM_M]) for k in params)
            v = ParameterVector((k, table[k + _ADAM_V]) for k in params)
        except KeyError as e:
            raise CheckpointFormatError(f"{path}: optimizer moments missing for {e}") from e
        m.assert_same_layout(params, "stored Adam moments")
        a = meta["adam"]
        adam = AdamState(m=m, v=v, step_count=int(a["step_count"]), lr=a["lr"],
                         beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    return Checkpoint(params=params, encoder_config=cfg, provenance=provenance,
                      format_version=version, adam_state=adam, extra=meta.get("extra", {}))
