"""Encoder/decoder feedback models, parameter accounting and checkpoints.

Data crosses the model boundary channel-first, ``(n, 2, n_delay, n_antennas)``,
matching the dataset files; inside the network images are channels-last.

Parameter counting convention: only trainable tensors count.  Dense and
conv layers contribute weights plus biases; batch norm contributes its
scale and shift (2 per channel).  Running statistics are stored in
checkpoints but are not parameters.  Under this convention the default
encoder at CR=1/4 on 2x32x32 inputs has 1,049,130 parameters.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, IntegrityError

ENCODER, DECODER = "encoder", "decoder"
SHIPPED_RATIOS = tuple(Fraction(1, d) for d in (4, 8, 16, 32, 64))
STRATEGIES = ("single-task", "shared-encoder")


def parse_ratio(value) -> Fraction:
    try:
        cr = Fraction(str(value).strip())
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"compression ratio {value!r} is not a rational number") from None
    if not 0 < cr <= 1:
        raise ConfigError(f"compression ratio {cr} outside (0, 1]")
    return cr


@dataclass(frozen=True)
class CompressionConfig:
    n_delay: int
    n_antennas: int
    cr: Fraction

    def __post_init__(self):
        if self.n_delay < 1 or self.n_antennas < 1:
            raise ConfigError(f"dims must be positive, got {self.n_delay}x{self.n_antennas}")
        object.__setattr__(self, "cr", parse_ratio(self.cr))
        if self.codeword_length < 1:
            raise ConfigError(
                f"CR {self.cr} leaves an empty codeword for N={self.input_size}"
            )

    @property
    def input_size(self) -> int:
        return 2 * self.n_delay * self.n_antennas

    @property
    def codeword_length(self) -> int:
        # round() on a Fraction rounds half to even
        return round(self.input_size * self.cr)

    @property
    def sample_shape(self) -> tuple:
        return (2, self.n_delay, self.n_antennas)


def _conv_bn_act(prefix, cin, cout):
    return [
        nn.Conv2d(f"{prefix}.conv", cin, cout),
        nn.BatchNorm(f"{prefix}.bn", cout),
        nn.LeakyReLU(f"{prefix}.act", 0.3),
    ]


def csinet_stacks(cfg: CompressionConfig):
    """CsiNet-style encoder and decoder layer stacks."""
    n, m = cfg.input_size, cfg.codeword_length
    image = (cfg.n_delay, cfg.n_antennas, 2)
    encoder = [
        *_conv_bn_act("encoder.head", 2, 2),
        nn.Reshape("encoder.flatten", (n,)),
        nn.Dense("encoder.dense", n, m),
    ]
    decoder = [nn.Dense("decoder.dense", m, n), nn.Reshape("decoder.unflatten", image)]
    for b in (1, 2):
        p = f"decoder.refine{b}"
        body = _conv_bn_act(f"{p}.a", 2, 8) + _conv_bn_act(f"{p}.b", 8, 16) + _conv_bn_act(f"{p}.c", 16, 2)
        decoder.append(nn.Residual(p, tuple(body)))
    decoder += [nn.Conv2d("decoder.out", 2, 2, zero_init=True), nn.Sigmoid("decoder.sigmoid")]
    return encoder, decoder


ARCHITECTURES = {"csinet": csinet_stacks}


@dataclass(frozen=True)
class FeedbackModel:
    cfg: CompressionConfig
    encoder: tuple
    decoder: tuple
    params: dict
    partition: dict  # tensor name -> ENCODER | DECODER
    architecture: str = "csinet"

    @property
    def stack(self) -> tuple:
        return self.encoder + self.decoder

    def names(self, part=None, trainable_only=False) -> list:
        stacks = {ENCODER: self.encoder, DECODER: self.decoder, None: self.stack}[part]
        names = list(nn.param_shapes(stacks))
        if not trainable_only:
            names += nn.buffer_names(stacks)
        return names

    def subset(self, part) -> dict:
        return {n: self.params[n] for n in self.params if self.partition[n] == part}

    def with_params(self, params: dict) -> "FeedbackModel":
        merged = dict(self.params)
        merged.update(params)
        return replace(self, params=merged)

    def encode(self, x, batch_size=None) -> np.ndarray:
        """Codewords ``(n, M)`` for channel-first samples ``(n, 2, rows, cols)``."""
        return _batched(self.encoder, self.params, to_network(x), batch_size)

    def decode(self, s, batch_size=None) -> np.ndarray:
        return from_network(_batched(self.decoder, self.params, np.asarray(s), batch_size))

    def reconstruct(self, x, batch_size=None) -> np.ndarray:
        return from_network(_batched(self.stack, self.params, to_network(x), batch_size))


def _batched(stack, params, x, batch_size):
    if batch_size is None or len(x) <= batch_size:
        return nn.forward(stack, params, x)
    return np.concatenate(
        [nn.forward(stack, params, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    )


def to_network(x) -> np.ndarray:
    """Channel-first samples to the channels-last network layout."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise nn.ShapeError(f"expected (n, 2, rows, cols) samples, got {x.shape}")
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def from_network(y) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(y).transpose(0, 3, 1, 2))


def build_model(cfg: CompressionConfig, seed: int = 0, architecture: str = "csinet",
                dtype=np.float32) -> FeedbackModel:
    try:
        builder = ARCHITECTURES[architecture]
    except KeyError:
        raise ConfigError(f"unknown architecture {architecture!r}") from None
    encoder, decoder = builder(cfg)
    encoder, decoder = tuple(encoder), tuple(decoder)
    image = (cfg.n_delay, cfg.n_antennas, 2)
    m = nn.infer_shape(encoder, image)
    if m != (cfg.codeword_length,) or nn.infer_shape(decoder, m) != image:
        raise ConfigError(f"architecture {architecture!r} breaks the shape chain for {cfg}")
    params = nn.init_params(encoder + decoder, seed, dtype)
    partition = {n: ENCODER for n in list(nn.param_shapes(encoder)) + nn.buffer_names(encoder)}
    partition.update({n: DECODER for n in list(nn.param_shapes(decoder)) + nn.buffer_names(decoder)})
    return FeedbackModel(cfg, encoder, decoder, params, partition, architecture)


def count_params(model_or_stack, partition: str = "all") -> int:
    """Trainable parameter count of a model part (or of a bare layer stack)."""
    if isinstance(model_or_stack, FeedbackModel):
        part = {"all": None, ENCODER: ENCODER, DECODER: DECODER}.get(partition, "?")
        if part == "?":
            raise ConfigError(f"unknown partition {partition!r}")
        stack = {None: model_or_stack.stack, ENCODER: model_or_stack.encoder,
                 DECODER: model_or_stack.decoder}[part]
    else:
        stack = model_or_stack
    return sum(int(np.prod(s)) for s in nn.param_shapes(stack).values())


def ue_storage(encoder_params: int, n_scenarios: int, strategy: str) -> int:
    """Encoder parameters the UE must hold to serve ``n_scenarios``."""
    if n_scenarios < 1:
        raise ConfigError(f"need at least one scenario, got {n_scenarios}")
    if strategy == "single-task":
        return n_scenarios * encoder_params
    if strategy in ("shared-encoder", "multi-task"):
        return encoder_params
    raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def reduction(baseline, improved) -> Fraction:
    """Exact relative saving ``1 - improved / baseline``."""
    if baseline == 0:
        return Fraction(0)
    return 1 - Fraction(improved) / Fraction(baseline)


# --------------------------------------------------------------------------
# checkpoint files
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CSIM"
CHECKPOINT_VERSION = 1
_TAGS = {ENCODER: 0, DECODER: 1}
_META = struct.Struct("<3IIIQI")  # n_delay, n_antennas, M, cr_num, cr_den, seed, epoch


@dataclass(frozen=True)
class CheckpointMeta:
    cfg: CompressionConfig
    seed: int = 0
    epoch: int = 0


@dataclass
class Checkpoint:
    meta: CheckpointMeta
    params: dict
    partition: dict

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.partition == other.partition
            and list(self.params) == list(other.params)
            and all(
                self.params[k].dtype == other.params[k].dtype
                and np.array_equal(self.params[k], other.params[k])
                for k in self.params
            )
        )


def checkpoint_to_bytes(params: dict, partition: dict, meta: CheckpointMeta) -> bytes:
    cfg = meta.cfg
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    out.append(_META.pack(cfg.n_delay, cfg.n_antennas, cfg.codeword_length,
                          cfg.cr.numerator, cfg.cr.denominator, meta.seed, meta.epoch))
    out.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", _TAGS[partition[name]], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    if len(buf) < 8 + _META.size + 4:
        raise FormatError("header truncated", len(buf))
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    n_delay, n_ant, m, num, den, seed, epoch = _META.unpack_from(buf, 8)
    try:
        cfg = CompressionConfig(n_delay, n_ant, Fraction(num, den))
    except (ConfigError, ZeroDivisionError) as exc:
        raise FormatError(f"invalid model metadata: {exc}", 8) from None
    if cfg.codeword_length != m:
        raise IntegrityError(f"header codeword length {m} != {cfg.codeword_length} implied by CR")
    off = 8 + _META.size
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params, partition = {}, {}
    tags = {v: k for k, v in _TAGS.items()}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = bytes(buf[off : off + nlen]).decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            if tag not in tags:
                raise FormatError(f"tensor {name!r} has partition tag {tag}", off - 2)
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = math.prod(dims)
            if off + 4 * size > len(buf):
                raise struct.error("payload ends inside a tensor")
            params[name] = np.frombuffer(buf, "<f4", size, off).astype(np.float32).reshape(dims)
            partition[name] = tags[tag]
            off += 4 * size
    except (struct.error, UnicodeDecodeError):
        raise IntegrityError(
            f"header declares {count} tensors but only {len(params)} could be read"
        ) from None
    if off != len(buf):
        raise IntegrityError(f"{len(buf) - off} bytes follow the {count} declared tensors")
    return Checkpoint(CheckpointMeta(cfg, seed, epoch), params, partition)


def save_checkpoint(model_or_params, path, meta: CheckpointMeta | None = None,
                    partition: dict | None = None, part: str | None = None) -> None:
    """Write a whole model, one part of it (``part``), or a bare param set."""
    if isinstance(model_or_params, FeedbackModel):
        model = model_or_params
        params = model.params if part is None else model.subset(part)
        partition = model.partition
        meta = meta or CheckpointMeta(model.cfg)
    else:
        params = model_or_params
        if meta is None or partition is None:
            raise ConfigError("a bare param set needs explicit meta and partition")
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(params, partition, meta))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def assemble(cfg: CompressionConfig, *checkpoints: Checkpoint, architecture="csinet") -> FeedbackModel:
    """Build a model from checkpoints (e.g. shared encoder + task decoder).

    Every checkpoint must carry ``cfg``; together they must supply each
    tensor of the architecture exactly, with matching dims and partitions.
    """
    skeleton = build_model(cfg, architecture=architecture)
    params = {}
    for ck in checkpoints:
        if ck.meta.cfg != cfg:
            raise IntegrityError(
                f"checkpoint built for {_describe(ck.meta.cfg)}, model expects {_describe(cfg)}"
            )
        for name, arr in ck.params.items():
            if name not in skeleton.params:
                raise IntegrityError(f"checkpoint tensor {name!r} is not part of the model")
            want = skeleton.params[name].shape
            if arr.shape != want:
                raise IntegrityError(f"tensor {name!r} has dims {arr.shape}, model expects {want}")
            if ck.partition[name] != skeleton.partition[name]:
                raise IntegrityError(f"tensor {name!r} tagged {ck.partition[name]}")
            params[name] = arr
    missing = [n for n in skeleton.params if n not in params]
    if missing:
        raise IntegrityError(f"checkpoints lack {len(missing)} tensors, e.g. {missing[0]!r}")
    return replace(skeleton, params={n: params[n] for n in skeleton.params})


def _describe(cfg):
    return f"2x{cfg.n_delay}x{cfg.n_antennas} CR={cfg.cr} (M={cfg.codeword_length})"
