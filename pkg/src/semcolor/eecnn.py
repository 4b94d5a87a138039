"""Encoder / fusion / decoder colorization network.

The luminance plane goes through a strided convolutional encoder down to a
1/8-resolution grid. A global embedding of the image (from any
:class:`EmbeddingProvider`) is tiled over that grid, concatenated depthwise
and merged by the fusion convolution. The decoder upsamples three times with
nearest-neighbour interpolation back to full size and emits the A and B
planes through a tanh bound.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from semcolor import CHECKPOINT_FORMAT_VERSION
from semcolor.colorspace import AB_RANGE, ChromaMap
from semcolor.errors import CorruptCheckpointError, FingerprintError, ShapeError

REDUCTION = 8


@dataclass(frozen=True)
class EeCnnConfig:
    """Architecture hyperparameters.

    ``stride2_layers`` holds 1-based encoder layer indices. Exactly three
    of them are required so that the encoder reduces each side by 8.
    """

    encoder_channels: tuple[int, ...] = (64, 128, 128, 256, 256, 512, 512, 512)
    stride2_layers: tuple[int, ...] = (1, 3, 5)
    kernel_size: int = 4
    embedding_dim: int = 1000
    fusion_channels: int = 256
    decoder_stages: int = 3
    head_channels: int = 32
    luminance_skip: bool = True
    use_embedding: bool = True
    ab_scale: float = 128.0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "stride2_layers", tuple(sorted(int(i) for i in self.stride2_layers)))
        n = len(self.encoder_channels)
        if len(self.stride2_layers) != 3 or len(set(self.stride2_layers)) != 3:
            raise ValueError("exactly three stride-2 encoder layers are required (x8 reduction)")
        if not all(1 <= i <= n for i in self.stride2_layers):
            raise ValueError(f"stride-2 layer indices must lie in 1..{n}")
        if self.kernel_size != 4:
            raise ValueError("encoder and fusion kernels are 4x4")
        if self.decoder_stages != 3:
            raise ValueError("the decoder needs three x2 stages to undo the x8 reduction")
        if min(self.encoder_channels) < 1 or self.fusion_channels < 1 or self.embedding_dim < 1:
            raise ValueError("channel counts must be positive")
        if self.head_channels < 0 or self.ab_scale <= 0:
            raise ValueError("head_channels must be >= 0 and ab_scale > 0")

    @property
    def encoder_layers(self) -> int:
        return len(self.encoder_channels)

    @property
    def encoder_out_channels(self) -> int:
        return self.encoder_channels[-1]

    def decoder_channels(self) -> list[int]:
        return [max(self.fusion_channels // 2 ** (k + 1), 1) for k in range(self.decoder_stages)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["stride2_layers"] = list(self.stride2_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EeCnnConfig":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS = {
    "default": EeCnnConfig(),
    "small": EeCnnConfig(
        encoder_channels=(16, 32, 32, 64, 64, 64, 64, 64),
        embedding_dim=64,
        fusion_channels=64,
        head_channels=16,
    ),
    "tiny": EeCnnConfig(
        encoder_channels=(8, 8, 8),
        stride2_layers=(1, 2, 3),
        embedding_dim=8,
        fusion_channels=32,
        head_channels=8,
    ),
}


@runtime_checkable
class EmbeddingProvider(Protocol):
    """Maps a 3-plane float image in [0, 1] of shape (H, W, 3) to a vector of length ``dim``."""

    name: str
    dim: int

    def embed(self, image: np.ndarray) -> np.ndarray: ...


class ConstantEmbedder:
    """Fixed random projection of a 4x4 grid of per-channel block means.

    Hermetic stand-in for a pretrained classifier.
    """

    grid = 4

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise ValueError("embedding dimension must be >= 1")
        self.dim = int(dim)
        self.seed = int(seed)
        self.name = f"constant:dim={self.dim}:seed={self.seed}"
        n_in = 3 * self.grid * self.grid
        rng = np.random.default_rng(self.seed)
        self._proj = rng.standard_normal((self.dim, n_in)) / np.sqrt(n_in)

    def pooled(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) input, got {image.shape}")
        rows = np.array_split(np.arange(image.shape[0]), self.grid)
        cols = np.array_split(np.arange(image.shape[1]), self.grid)
        cells = []
        for r in rows:
            for c in cols:
                block = image[r[:, None], c[None, :]] if len(r) and len(c) else np.zeros((1, 1, 3))
                cells.append(block.reshape(-1, 3).mean(axis=0))
        return np.concatenate(cells)

    def embed(self, image: np.ndarray) -> np.ndarray:
        return self._proj @ self.pooled(image)


def constant_embedder(dim: int, seed: int = 0) -> ConstantEmbedder:
    return ConstantEmbedder(dim, seed)


class TorchvisionEmbedder:
    """Final pooled features of an ImageNet classifier from torchvision.

    ``weights="DEFAULT"`` downloads the published weights on first use.
    """

    _dims = {"inception_v3": 2048, "resnet50": 2048, "resnet18": 512}
    _sizes = {"inception_v3": 299, "resnet50": 224, "resnet18": 224}

    def __init__(self, model: str = "inception_v3", weights: str | None = "DEFAULT"):
        import torchvision

        if model not in self._dims:
            raise ValueError(f"unsupported model {model!r}; choose from {sorted(self._dims)}")
        kwargs = {"weights": weights}
        if model == "inception_v3":
            kwargs.update(aux_logits=True, init_weights=False)
        net = getattr(torchvision.models, model)(**kwargs)
        net.fc = nn.Identity()
        self._net = net.eval()
        self.dim = self._dims[model]
        self.size = self._sizes[model]
        self.name = f"torchvision:{model}"

    @torch.no_grad()
    def embed(self, image: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
        x = F.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False)
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        return self._net((x - mean) / std)[0].double().numpy()


def provider_from_name(name: str) -> EmbeddingProvider:
    kind, _, rest = name.partition(":")
    if kind == "constant":
        opts = dict(part.split("=") for part in rest.split(":") if part)
        return ConstantEmbedder(int(opts["dim"]), int(opts.get("seed", 0)))
    if kind == "torchvision":
        return TorchvisionEmbedder(rest or "inception_v3")
    raise ValueError(f"unknown embedding provider {name!r}")


def luminance_to_rgb_planes(l: np.ndarray) -> np.ndarray:
    """Grayscale L plane -> (H, W, 3) float image in [0, 1] for providers."""
    x = np.asarray(l, dtype=np.float64) / 100.0
    return np.repeat(x[..., None], 3, axis=2)


def embed_luminance(provider: EmbeddingProvider, l: np.ndarray) -> np.ndarray:
    vec = np.asarray(provider.embed(luminance_to_rgb_planes(l)), dtype=np.float64)
    if vec.shape != (provider.dim,):
        raise ShapeError(f"provider {provider.name} returned shape {vec.shape}, expected ({provider.dim},)")
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"provider {provider.name} returned non-finite values")
    return vec


class SameConv(nn.Module):
    """4x4 convolution whose output is input_size / stride (even sizes)."""

    def __init__(self, c_in, c_out, kernel_size=4, stride=1):
        super().__init__()
        total = kernel_size - stride
        self.pad = (total // 2, total - total // 2) * 2
        self.conv = nn.Conv2d(c_in, c_out, kernel_size, stride=stride)

    def forward(self, x):
        return self.conv(F.pad(x, self.pad))


class ColorizationNet(nn.Module):
    def __init__(self, config: EeCnnConfig):
        super().__init__()
        self.config = config
        k = config.kernel_size
        layers = []
        c_in = 1
        for idx, c_out in enumerate(config.encoder_channels, start=1):
            stride = 2 if idx in config.stride2_layers else 1
            layers.append(SameConv(c_in, c_out, k, stride))
            c_in = c_out
        self.encoder = nn.ModuleList(layers)
        fusion_in = config.encoder_out_channels + (config.embedding_dim if config.use_embedding else 0)
        self.fusion = SameConv(fusion_in, config.fusion_channels, k)
        stages = []
        c_in = config.fusion_channels
        for c_out in config.decoder_channels():
            stages.append(SameConv(c_in, c_out, k))
            c_in = c_out
        self.decoder = nn.ModuleList(stages)
        c_in += 1 if config.luminance_skip else 0
        if config.head_channels:
            self.head = nn.Sequential(
                nn.Conv2d(c_in, config.head_channels, 1),
                nn.ReLU(),
                nn.Conv2d(config.head_channels, 2, 1),
            )
        else:
            self.head = nn.Sequential(nn.Conv2d(c_in, 2, 1))

    def encode(self, l: torch.Tensor) -> torch.Tensor:
        """(N, 1, H, W) luminance in [0, 1] -> (N, C, H/8, W/8)."""
        h, w = l.shape[-2:]
        if h % REDUCTION or w % REDUCTION:
            raise ShapeError(f"encoder input {h}x{w} is not a multiple of {REDUCTION}")
        x = l
        for layer in self.encoder:
            x = F.relu(layer(x))
        return x

    def fusion_input(self, enc: torch.Tensor, emb: torch.Tensor | None) -> torch.Tensor:
        if not self.config.use_embedding:
            return enc
        if emb is None or emb.shape[-1] != self.config.embedding_dim:
            got = None if emb is None else emb.shape[-1]
            raise ShapeError(f"embedding length {got} != configured {self.config.embedding_dim}")
        n, _, h, w = enc.shape
        tiled = emb.reshape(n, -1, 1, 1).expand(n, emb.shape[-1], h, w)
        return torch.cat([enc, tiled], dim=1)

    def fuse(self, enc: torch.Tensor, emb: torch.Tensor | None) -> torch.Tensor:
        return F.relu(self.fusion(self.fusion_input(enc, emb)))

    def decode(self, fused: torch.Tensor, l: torch.Tensor | None = None) -> torch.Tensor:
        """Return normalized chroma in (-1, 1), shape (N, 2, 8h, 8w)."""
        x = fused
        for stage in self.decoder:
            x = F.relu(stage(x))
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.config.luminance_skip:
            if l is None:
                raise ShapeError("this configuration feeds luminance to the output head; pass l")
            x = torch.cat([x, l], dim=1)
        return torch.tanh(self.head(x))

    def forward(self, l: torch.Tensor, emb: torch.Tensor | None = None) -> torch.Tensor:
        return self.decode(self.fuse(self.encode(l), emb), l)


def _init_parameters(net: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.weight[0].numel()
                bound = float(np.sqrt(6.0 / fan_in))
                module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.zero_()


@dataclass(frozen=True, eq=False)
class ModelWeights:
    config: EeCnnConfig
    params: dict[str, np.ndarray]
    version: int = CHECKPOINT_FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()


def weights_from_network(net: ColorizationNet, meta: dict | None = None) -> ModelWeights:
    params = {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}
    return ModelWeights(net.config, params, meta=dict(meta or {}))


def init_weights(config: EeCnnConfig, seed: int = 0, meta: dict | None = None) -> ModelWeights:
    net = ColorizationNet(config)
    _init_parameters(net, seed)
    return weights_from_network(net, {"init_seed": seed, **(meta or {})})


def build_network(weights: ModelWeights, dtype=torch.float32) -> ColorizationNet:
    net = ColorizationNet(weights.config)
    expected = {k: tuple(v.shape) for k, v in net.state_dict().items()}
    got = {k: tuple(v.shape) for k, v in weights.params.items()}
    if expected != got:
        raise FingerprintError(f"parameter blocks do not match config {weights.fingerprint}")
    net.load_state_dict({k: torch.as_tensor(v) for k, v in weights.params.items()})
    return net.to(dtype).eval()


def pad_to_multiple(x: torch.Tensor, multiple: int = REDUCTION) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad the last two dims up to a multiple; returns the original (H, W)."""
    h, w = x.shape[-2:]
    if h < multiple or w < multiple:
        raise ShapeError(f"input {h}x{w} is smaller than {multiple}x{multiple}")
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, (h, w)


def luminance_tensor(l: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(l, dtype=np.float64) / 100.0, dtype=dtype)[None, None]


def predict_normalized(
    net: ColorizationNet, l: torch.Tensor, emb: torch.Tensor | None
) -> torch.Tensor:
    """Pad (N, 1, H, W) input, run the network and crop back to (N, 2, H, W)."""
    padded, (h, w) = pad_to_multiple(l)
    return net(padded, emb)[..., :h, :w]


def to_chroma(norm: torch.Tensor, ab_scale: float) -> ChromaMap:
    ab = norm.detach().double().cpu().numpy()[0] * ab_scale
    ab = np.clip(ab, *AB_RANGE)
    return ChromaMap(ab[0], ab[1])


class Colorizer:
    """Holds a built network for repeated inference with the same weights."""

    def __init__(self, weights: ModelWeights, provider: EmbeddingProvider | None):
        cfg = weights.config
        if cfg.use_embedding:
            if provider is None:
                raise ValueError("this configuration needs an embedding provider")
            if provider.dim != cfg.embedding_dim:
                raise ShapeError(f"provider dim {provider.dim} != configured {cfg.embedding_dim}")
        self.weights = weights
        self.provider = provider
        self.net = build_network(weights)

    def embedding(self, l: np.ndarray) -> torch.Tensor | None:
        if not self.weights.config.use_embedding:
            return None
        return torch.as_tensor(embed_luminance(self.provider, l), dtype=torch.float32)[None]

    @torch.no_grad()
    def __call__(self, l: np.ndarray) -> ChromaMap:
        norm = predict_normalized(self.net, luminance_tensor(l), self.embedding(l))
        return to_chroma(norm, self.weights.config.ab_scale)


def forward(l: np.ndarray, provider: EmbeddingProvider | None, weights: ModelWeights) -> ChromaMap:
    """Predict the chroma of a luminance plane of any size >= 8x8."""
    return Colorizer(weights, provider)(l)


def encode(l: np.ndarray, weights: ModelWeights) -> np.ndarray:
    """L plane (H, W), both multiples of 8 -> (H/8, W/8, C) feature grid."""
    net = build_network(weights)
    with torch.no_grad():
        out = net.encode(luminance_tensor(l))
    return out[0].permute(1, 2, 0).numpy()


def fuse(enc: np.ndarray, emb: np.ndarray, weights: ModelWeights) -> np.ndarray:
    net = build_network(weights)
    with torch.no_grad():
        enc_t = torch.as_tensor(enc, dtype=torch.float32).permute(2, 0, 1)[None]
        emb_t = torch.as_tensor(emb, dtype=torch.float32)[None]
        out = net.fuse(enc_t, emb_t)
    return out[0].permute(1, 2, 0).numpy()


def decode(fused: np.ndarray, weights: ModelWeights, l: np.ndarray | None = None) -> ChromaMap:
    net = build_network(weights)
    with torch.no_grad():
        x = torch.as_tensor(fused, dtype=torch.float32).permute(2, 0, 1)[None]
        lt = None if l is None else luminance_tensor(l)
        out = net.decode(x, lt)
    return to_chroma(out, weights.config.ab_scale)


# Checkpoint file layout:
#   magic (8 bytes) | header length (uint32 LE) | JSON header | raw blocks | sha256 of all before
_MAGIC = b"SEMCCKPT"


def checkpoint_bytes(weights: ModelWeights) -> bytes:
    blocks = []
    chunks = []
    offset = 0
    for name, arr in weights.params.items():
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        blocks.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
             "offset": offset, "nbytes": len(data)}
        )
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": weights.version,
        "fingerprint": weights.fingerprint,
        "config": weights.config.to_dict(),
        "meta": weights.meta,
        "blocks": blocks,
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = _MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(weights: ModelWeights, path) -> None:
    """Atomically write ``weights`` to ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(checkpoint_bytes(weights))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, config: EeCnnConfig | None = None) -> ModelWeights:
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 4 + 32 or raw[: len(_MAGIC)] != _MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    (hlen,) = struct.unpack("<I", body[8:12])
    try:
        header = json.loads(body[12 : 12 + hlen])
        cfg = EeCnnConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: bad header: {exc}") from exc
    if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported format version {header['format_version']}")
    if cfg.fingerprint() != header["fingerprint"]:
        raise CorruptCheckpointError(f"{path}: stored fingerprint does not match stored config")
    if config is not None and config.fingerprint() != header["fingerprint"]:
        raise FingerprintError(
            f"{path}: checkpoint fingerprint {header['fingerprint']} != config {config.fingerprint()}"
        )
    data = body[12 + hlen :]
    params = {}
    for blk in header["blocks"]:
        chunk = data[blk["offset"] : blk["offset"] + blk["nbytes"]]
        dtype = np.dtype("<" + blk["dtype"]) if blk["dtype"][0] in "fiu" else np.dtype(blk["dtype"])
        params[blk["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(blk["shape"]).copy()
    return ModelWeights(cfg, params, version=header["format_version"], meta=header["meta"])
