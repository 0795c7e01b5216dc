"""Checkpoint files and layer-transfer initialisation for fine-tuning.

File layout (all integers little-endian)::

    b"FBCKPT"                      magic
    u32 format_version
    u32 n, n bytes                 architecture descriptor, UTF-8 text
    u32 tensor_count
    per tensor:
        u32 n, n bytes             name
        u32 rank, rank x u64 dims
        prod(dims) x f64           values, row-major
    u32 n, n bytes                 metadata, UTF-8 JSON

Tensors are always stored as float64.
"""

from __future__ import annotations

import dataclasses
import enum
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np

from . import nn_core as nn
from .dqn_agent import AgentConfig, TrainResult, derive_seeds, train
from .env_suite import Flavour

MAGIC = b"FBCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError, nn.ShapeError):
    pass


class Checkpoint(NamedTuple):
    params: nn.Params
    metadata: dict
    arch: nn.NetworkArchitecture


def describe_architecture(arch: nn.NetworkArchitecture) -> str:
    lines = [f"input_shape {' '.join(map(str, arch.input_shape))}", f"action_count {arch.action_count}"]
    for layer in arch.layers:
        lines.append(f"layer {layer.name} kind={layer.kind} size={layer.size} kernel={layer.kernel} "
                     f"stride={layer.stride} activation={layer.activation} "
                     f"dropout_site={int(layer.dropout_site)}")
    return "\n".join(lines) + "\n"


def parse_architecture(text: str) -> nn.NetworkArchitecture:
    input_shape, action_count, layers = None, None, []
    try:
        for line in text.splitlines():
            if not line.strip():
                continue
            head, *rest = line.split()
            if head == "input_shape":
                input_shape = tuple(int(v) for v in rest)
            elif head == "action_count":
                action_count = int(rest[0])
            elif head == "layer":
                fields = dict(item.split("=", 1) for item in rest[1:])
                layers.append(nn.LayerSpec(rest[0], fields["kind"], int(fields["size"]),
                                           int(fields["kernel"]), int(fields["stride"]),
                                           fields["activation"], fields["dropout_site"] == "1"))
            else:
                raise ValueError(f"unknown descriptor line {line!r}")
        return nn.NetworkArchitecture(input_shape, action_count, tuple(layers))
    except (ValueError, KeyError, IndexError, TypeError) as e:
        raise CheckpointError(f"bad architecture descriptor: {e}") from None


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def encode_checkpoint(params: nn.Params, arch: nn.NetworkArchitecture, metadata: dict) -> bytes:
    nn.check_params(params, arch)
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", FORMAT_VERSION))
    out.write(_blob(describe_architecture(arch).encode()))
    shapes = arch.param_shapes()
    out.write(struct.pack("<I", len(shapes)))
    for name in shapes:
        value = np.ascontiguousarray(params[name], dtype="<f8")
        out.write(_blob(name.encode()))
        out.write(struct.pack("<I", value.ndim))
        out.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        out.write(value.tobytes())
    out.write(_blob(json.dumps(metadata, sort_keys=True).encode()))
    return out.getvalue()


def save_checkpoint(params: nn.Params, arch: nn.NetworkArchitecture, metadata: dict,
                    destination: Union[str, os.PathLike]) -> Path:
    """Write atomically: a temporary file in the same directory, then rename."""
    destination = Path(destination)
    data = encode_checkpoint(params, arch, metadata)
    try:
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=destination.parent)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {destination}: {e}") from e
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, destination)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return destination


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what} "
                                           f"(need {n} bytes at offset {self.pos}, file has {len(self.data)})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def blob(self, what: str) -> bytes:
        return self.take(self.u32(what), what)


def decode_checkpoint(data: bytes, arch: Optional[nn.NetworkArchitecture] = None) -> Checkpoint:
    if len(data) < len(MAGIC) and MAGIC.startswith(data):
        raise TruncatedCheckpointError("checkpoint truncated inside the magic string")
    if not data.startswith(MAGIC):
        raise NotACheckpointError("not a checkpoint (bad magic)")
    r = _Reader(data)
    r.take(len(MAGIC), "magic")
    version = r.u32("format version")
    if version > FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is newer than "
                                     f"supported version {FORMAT_VERSION}")
    if version < 1:
        raise CheckpointVersionError(f"unknown checkpoint format version {version}")
    stored_arch = parse_architecture(r.blob("architecture descriptor").decode())
    count = r.u32("tensor count")
    params = {}
    for _ in range(count):
        name = r.blob("tensor name").decode()
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name}"))
        size = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(r.take(8 * size, f"values of {name}"), dtype="<f8").reshape(dims).astype(np.float64)
    try:
        metadata = json.loads(r.blob("metadata").decode())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"bad metadata block: {e}") from None
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} unexpected trailing bytes after metadata")
    try:
        nn.check_params(params, stored_arch)
    except nn.ShapeError as e:
        raise CheckpointShapeError(f"tensors disagree with stored descriptor: {e}") from None
    if arch is not None:
        try:
            nn.check_params(params, arch)
        except nn.ShapeError as e:
            raise CheckpointShapeError(f"checkpoint does not fit the requested architecture: {e}") from None
    return Checkpoint(params, metadata, stored_arch)


def load_checkpoint(source: Union[str, os.PathLike],
                    arch: Optional[nn.NetworkArchitecture] = None) -> Checkpoint:
    """Read and validate a checkpoint; with ``arch`` given, shapes must also match it."""
    return decode_checkpoint(Path(source).read_bytes(), arch)


class TransferScheme(str, enum.Enum):
    FULL = "full"
    CONV3 = "conv3"
    CONV3FC1 = "conv3fc1"


def transferred_layers(scheme: TransferScheme, arch: nn.NetworkArchitecture) -> list[str]:
    scheme = TransferScheme(scheme)
    if scheme is TransferScheme.FULL:
        return arch.layer_names
    conv = [layer.name for layer in arch.layers if layer.kind == nn.CONV]
    if scheme is TransferScheme.CONV3:
        return conv
    fc = [layer.name for layer in arch.layers if layer.kind == nn.FC]
    return conv + fc[:1]


def transfer_init(source: nn.Params, scheme: TransferScheme, arch: nn.NetworkArchitecture,
                  rng: np.random.Generator) -> nn.Params:
    """Copy the scheme's layers from ``source``; Xavier-draw the rest. Nothing is frozen."""
    try:
        nn.check_params(source, arch)
    except nn.ShapeError as e:
        raise CheckpointShapeError(f"source parameters do not match architecture: {e}") from None
    keep = set(transferred_layers(scheme, arch))
    fresh = nn.xavier_init(arch, rng, dtype=next(iter(source.values())).dtype) \
        if keep != set(arch.layer_names) else {}
    out = {}
    for key, value in source.items():
        out[key] = value.copy() if key.split(".")[0] in keep else fresh[key]
    return out


def finetune(source: Union[str, os.PathLike, Checkpoint], scheme: TransferScheme,
             target_flavour: Union[Flavour, str], config: AgentConfig, total_frames: int, seed: int,
             checkpoint_interval: int, regularize: bool = True, **train_kwargs) -> tuple[TrainResult, dict]:
    """Train on ``target_flavour`` starting from a transferred initialisation.

    Optimiser state and replay buffer start empty.  With ``regularize=False``
    the fine-tuning phase runs without dropout or L2 whatever ``config.reg``
    says.  Returns the training result and the metadata to attach to its
    checkpoints.
    """
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    if not regularize:
        config = dataclasses.replace(config, reg=nn.RegularizationConfig())
    scheme = TransferScheme(scheme)
    init = transfer_init(ckpt.params, scheme, ckpt.arch, np.random.default_rng(derive_seeds(seed)["init"]))
    result = train(config, target_flavour, total_frames, seed, checkpoint_interval,
                   initial_params=init, **train_kwargs)
    meta = {
        "source": str(source) if not isinstance(source, Checkpoint) else ckpt.metadata.get("path", "<memory>"),
        "source_flavour": ckpt.metadata.get("flavour"),
        "source_frame": ckpt.metadata.get("frame"),
        "scheme": scheme.value,
        "finetune_regularized": regularize,
        "reg": dataclasses.asdict(config.reg),
    }
    return result, meta
