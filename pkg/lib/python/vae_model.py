"""
Fully-Convolutional VAE

Encoder, latent heads and decoder for 32x32 TOF-MRA patches with a spatial
32x4x4 latent. The network has no dense layers, so trained parameters also
apply to whole slices whose sides are multiples of 8.

Also holds the binary checkpoint format (magic "AVAE").
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from mra_errors import (
    ArchitectureMismatchError,
    CheckpointBadMagicError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ShapeMismatchError,
)
from tensor_engine import (
    PRECISIONS,
    ConvSpec,
    Tensor,
    add,
    clamp,
    conv2d,
    conv_transpose2d,
    exp,
    leaky_relu,
    mul,
    sigmoid,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AVAE"
CHECKPOINT_VERSION = 1

# u8 dtype codes in the tensor table
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass(frozen=True)
class LayerSpec:
    """One convolutional stage and its activation"""
    name: str
    kind: str  # "conv" or "conv_transpose"
    conv: ConvSpec
    activation: str  # "leaky_relu", "sigmoid" or "none"

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        kh, kw = self.conv.kernel
        if self.kind == "conv_transpose":
            return (self.conv.in_channels, self.conv.out_channels, kh, kw)
        return (self.conv.out_channels, self.conv.in_channels, kh, kw)

    @property
    def bias_shape(self) -> Tuple[int]:
        return (self.conv.out_channels,)

    def describe(self) -> str:
        c = self.conv
        return (f"{self.name}:{self.kind}({c.in_channels}->{c.out_channels},"
                f"k{c.kernel[0]}x{c.kernel[1]},s{c.stride[0]}x{c.stride[1]},"
                f"p{c.padding[0]}x{c.padding[1]}){self.activation}")


@dataclass(frozen=True)
class VaeArchitecture:
    """Layer stack of the VAE"""
    encoder: Tuple[LayerSpec, ...]
    mu_head: LayerSpec
    logvar_head: LayerSpec
    decoder: Tuple[LayerSpec, ...]
    latent_channels: int = 32
    downsampling: int = 8
    leaky_slope: float = 0.01
    logvar_limit: float = 10.0

    @classmethod
    def default(cls) -> "VaeArchitecture":
        """Smallest mirrored stack taking 32x32 patches to a 32x4x4 latent"""
        down = lambda i, o: ConvSpec.square(i, o, kernel=4, stride=2, padding=1)
        same = lambda i, o: ConvSpec.square(i, o, kernel=3, stride=1, padding=1)
        encoder = (
            LayerSpec("enc1", "conv", down(1, 32), "leaky_relu"),
            LayerSpec("enc2", "conv", down(32, 64), "leaky_relu"),
            LayerSpec("enc3", "conv", down(64, 64), "leaky_relu"),
        )
        decoder = (
            LayerSpec("dec1", "conv_transpose", down(32, 64), "leaky_relu"),
            LayerSpec("dec2", "conv_transpose", down(64, 32), "leaky_relu"),
            LayerSpec("dec3", "conv_transpose", down(32, 32), "leaky_relu"),
            LayerSpec("out", "conv", same(32, 1), "sigmoid"),
        )
        return cls(
            encoder=encoder,
            mu_head=LayerSpec("mu", "conv", same(64, 32), "none"),
            logvar_head=LayerSpec("logvar", "conv", same(64, 32), "none"),
            decoder=decoder,
        )

    def layers(self) -> Iterator[LayerSpec]:
        yield from self.encoder
        yield self.mu_head
        yield self.logvar_head
        yield from self.decoder

    def descriptor(self) -> str:
        """Stable text form stored in checkpoints"""
        body = ";".join(layer.describe() for layer in self.layers())
        return f"vae/v1/latent{self.latent_channels}/{body}"

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for layer in self.layers():
            shapes[f"{layer.name}.weight"] = layer.weight_shape
            shapes[f"{layer.name}.bias"] = layer.bias_shape
        return shapes


@dataclass
class VaeParams:
    """Named weight and bias tensors for one architecture"""
    arch: VaeArchitecture
    tensors: Dict[str, Tensor]

    def __post_init__(self):
        expected = self.arch.parameter_shapes()
        if list(self.tensors) != list(expected):
            raise ArchitectureMismatchError("parameter names do not match the architecture",
                                            expected=list(expected), got=list(self.tensors))
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ArchitectureMismatchError(f"parameter {name} has the wrong shape",
                                                expected=shape, got=self.tensors[name].shape)

    @classmethod
    def initialize(cls, arch: VaeArchitecture, seed: int, precision: str = "single") -> "VaeParams":
        """
        Glorot-uniform weights, zero biases

        Args:
            arch: Architecture to instantiate
            seed: Generator seed
            precision: "single" or "double"
        """
        rng = np.random.default_rng(seed)
        dtype = PRECISIONS[precision]
        tensors: Dict[str, Tensor] = {}
        for layer in arch.layers():
            c = layer.conv
            kh, kw = c.kernel
            fan_in = c.in_channels * kh * kw
            fan_out = c.out_channels * kh * kw
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=layer.weight_shape).astype(dtype)
            tensors[f"{layer.name}.weight"] = Tensor(weight)
            tensors[f"{layer.name}.bias"] = Tensor(np.zeros(layer.bias_shape, dtype=dtype))
        return cls(arch, tensors)

    @classmethod
    def from_arrays(cls, arch: VaeArchitecture, arrays: Dict[str, np.ndarray],
                    requires_grad: bool = False) -> "VaeParams":
        return cls(arch, {name: Tensor(arr, requires_grad=requires_grad) for name, arr in arrays.items()})

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def as_leaves(self) -> "VaeParams":
        """Copy whose tensors are gradient leaves for a tape"""
        return VaeParams.from_arrays(self.arch, self.arrays(), requires_grad=True)

    def astype(self, precision: str) -> "VaeParams":
        dtype = PRECISIONS[precision]
        return VaeParams.from_arrays(self.arch, {n: a.astype(dtype) for n, a in self.arrays().items()})

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays().values())

    def weight(self, layer: str) -> Tensor:
        return self.tensors[f"{layer}.weight"]

    def bias(self, layer: str) -> Tensor:
        return self.tensors[f"{layer}.bias"]


@dataclass
class LatentStats:
    mu: Tensor
    logvar: Tensor


def _apply_layer(params: VaeParams, layer: LayerSpec, x: Tensor) -> Tensor:
    op = conv_transpose2d if layer.kind == "conv_transpose" else conv2d
    y = op(x, params.weight(layer.name), params.bias(layer.name), layer.conv)
    if layer.activation == "leaky_relu":
        return leaky_relu(y, params.arch.leaky_slope)
    if layer.activation == "sigmoid":
        return sigmoid(y)
    return y


def encode(params: VaeParams, batch: Tensor) -> LatentStats:
    """
    Map N x 1 x H x W images to latent Gaussians of spatial size (H/8, W/8)

    Raises:
        ShapeMismatchError: H or W is not a multiple of 8 or is below 32
    """
    arch = params.arch
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise ShapeMismatchError("encoder expects an N x 1 x H x W batch", shape=batch.shape)
    h, w = batch.shape[2:]
    step = arch.downsampling
    if h % step or w % step or h < 4 * step or w < 4 * step:
        raise ShapeMismatchError(
            f"spatial size must be a multiple of {step} and at least {4 * step}; "
            "pad slices before encoding", height=h, width=w)
    x = batch
    for layer in arch.encoder:
        x = _apply_layer(params, layer, x)
    mu = _apply_layer(params, arch.mu_head, x)
    logvar = clamp(_apply_layer(params, arch.logvar_head, x), -arch.logvar_limit, arch.logvar_limit)
    return LatentStats(mu=mu, logvar=logvar)


def reparameterize(stats: LatentStats, rng: Optional[np.random.Generator],
                   deterministic: bool = False) -> Tensor:
    """z = mu + exp(0.5 * logvar) * eps, or mu itself when deterministic"""
    if deterministic:
        return stats.mu
    if rng is None:
        raise ValueError("stochastic reparameterization needs a seeded generator")
    eps = Tensor(rng.standard_normal(stats.mu.shape).astype(stats.mu.dtype))
    std = exp(mul(stats.logvar, 0.5))
    return add(stats.mu, mul(std, eps))


def decode(params: VaeParams, z: Tensor) -> Tensor:
    arch = params.arch
    if z.ndim != 4 or z.shape[1] != arch.latent_channels:
        raise ShapeMismatchError("decoder expects N x latent_channels x h x w",
                                 expected_channels=arch.latent_channels, shape=z.shape)
    x = z
    for layer in arch.decoder:
        x = _apply_layer(params, layer, x)
    return x


def forward(params: VaeParams, batch: Tensor, rng: Optional[np.random.Generator] = None,
            deterministic: bool = False) -> Tuple[Tensor, LatentStats]:
    stats = encode(params, batch)
    z = reparameterize(stats, rng, deterministic)
    return decode(params, z), stats


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class CheckpointMetadata:
    """Text metadata stored ahead of the tensor table"""
    architecture: str
    loss_mode: str
    normalization: str
    extra: Dict[str, str] = field(default_factory=dict)

    def items(self) -> List[Tuple[str, str]]:
        base = [("architecture", self.architecture), ("loss_mode", self.loss_mode),
                ("normalization", self.normalization)]
        return base + sorted(self.extra.items())

    @classmethod
    def from_items(cls, items: List[Tuple[str, str]]) -> "CheckpointMetadata":
        data = dict(items)
        try:
            return cls(
                architecture=data.pop("architecture"),
                loss_mode=data.pop("loss_mode"),
                normalization=data.pop("normalization"),
                extra=data,
            )
        except KeyError as e:
            raise CheckpointError(f"checkpoint metadata lacks {e.args[0]!r}")


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _ByteReader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError("checkpoint ends early", offset=self.pos, wanted=n)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def save_checkpoint(params: VaeParams, metadata: CheckpointMetadata, path: Path) -> None:
    """Write params and metadata as a little-endian AVAE checkpoint"""
    items = metadata.items()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(items))]
    for key, value in items:
        chunks += [_pack_str(key), _pack_str(value)]
    chunks.append(struct.pack("<I", len(params.tensors)))
    for name, tensor in params.tensors.items():
        arr = tensor.data
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"cannot store dtype {arr.dtype}", tensor=name)
        chunks += [_pack_str(name), struct.pack("<BI", _DTYPE_CODES[arr.dtype], arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape),
                   arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.debug("Wrote checkpoint %s (%d tensors)", path, len(params.tensors))


def load_checkpoint(path: Path, expected_arch: Optional[VaeArchitecture] = None
                    ) -> Tuple[VaeParams, CheckpointMetadata]:
    """
    Read an AVAE checkpoint

    Args:
        path: Checkpoint file
        expected_arch: Architecture the caller will run; defaults to VaeArchitecture.default()

    Returns:
        (params, metadata)
    """
    arch = expected_arch or VaeArchitecture.default()
    reader = _ByteReader(Path(path).read_bytes())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointBadMagicError("not an AVAE checkpoint (bad magic)", path=str(path))
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError("unsupported checkpoint version",
                                     version=version, supported=CHECKPOINT_VERSION)
    items = [(reader.text(), reader.text()) for _ in range(reader.u32())]
    metadata = CheckpointMetadata.from_items(items)
    if metadata.architecture != arch.descriptor():
        raise ArchitectureMismatchError("checkpoint architecture differs from the model",
                                        stored=metadata.architecture, expected=arch.descriptor())

    arrays: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.text()
        code = reader.u8()
        if code not in _CODE_DTYPES:
            raise CheckpointError("unknown tensor dtype code", tensor=name, code=code)
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(dims)) if dims else 1
        payload = reader.take(count * dtype.itemsize)
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if reader.pos != len(reader.buf):
        raise CheckpointError("trailing bytes after tensor table", offset=reader.pos)

    params = VaeParams.from_arrays(arch, arrays)
    logger.debug("Loaded checkpoint %s (loss_mode=%s)", path, metadata.loss_mode)
    return params, metadata
