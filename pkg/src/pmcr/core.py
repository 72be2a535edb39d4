"""Shared value types, seeded RNG, mask resampling and the ``.pmt`` tensor format."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from pmcr.errors import (
    DimOverflow,
    InvalidSpec,
    MalformedHeader,
    TruncatedPayload,
    ZeroTargetDim,
)

DTYPE = torch.float64

PMT_MAGIC = b"PMT1"
PMT_F32 = 0
PMT_U8 = 1
_U32_MAX = 2**32 - 1

ArrayLike = Union[np.ndarray, torch.Tensor, float, Sequence]


@dataclass
class Hyperparams:
    n_prototypes: int = 16  # S
    mu: float = 0.1
    lambda1: float = 0.5
    lambda2: float = 1.0
    n_heads: int = 1
    feat_dim: int = 32  # D_l
    head_dim: int = 32  # d, with head_dim * n_heads == feat_dim
    out_dim: int = 32  # D_u
    relation_dim: int = 64  # D_s
    superpixel_size: int = 80  # G
    max_superpixels: int = 10  # N_s^max
    memory_size: int = 5  # nu
    n_query_descriptors: int = 16  # N_q
    kernel_size: int = 3  # n1 == n2
    slic_iters: int = 5
    sinkhorn_iters: int = 500
    sinkhorn_tol: float = 1e-6
    lr: float = 0.001
    lr_decay: float = 0.95
    lr_decay_every: int = 1000
    momentum: float = 0.9
    grad_clip: float = 10.0
    n_chunks: int = 3  # P
    n_shots: int = 1  # K
    classifier_alpha: float = 20.0
    classifier_window: int = 4
    image_size: int = 64
    encoder_channels: tuple = (16, 32)
    encoder_strides: tuple = (2, 2, 1)
    kernel_normalization: str = "joint"

    def __post_init__(self) -> None:
        self.encoder_channels = tuple(self.encoder_channels)
        self.encoder_strides = tuple(self.encoder_strides)
        self.validate()

    def validate(self) -> None:
        positive = [
            "n_prototypes", "mu", "n_heads", "feat_dim", "head_dim", "out_dim",
            "relation_dim", "superpixel_size", "max_superpixels", "memory_size",
            "n_query_descriptors", "kernel_size", "slic_iters", "sinkhorn_iters",
            "sinkhorn_tol", "lr", "lr_decay", "lr_decay_every", "n_chunks", "n_shots",
            "classifier_alpha", "classifier_window", "image_size",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidSpec(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidSpec("loss weights must be non-negative")
        if self.head_dim * self.n_heads != self.feat_dim:
            raise InvalidSpec("head_dim * n_heads must equal feat_dim")
        if self.kernel_size % 2 == 0:
            raise InvalidSpec("kernel_size must be odd")
        if self.kernel_normalization not in ("joint", "input"):
            raise InvalidSpec(f"unknown kernel_normalization {self.kernel_normalization!r}")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.encoder_strides))

    @property
    def feat_size(self) -> int:
        return self.image_size // self.total_stride

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["encoder_strides"] = list(self.encoder_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**d)


class Rng:
    """Seeded PCG64 stream. One owner per instance; derive children with :meth:`child`."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)

    def child(self, key: int) -> "Rng":
        """Independent stream derived from this seed and ``key`` (does not advance self)."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(key)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "state": int(st["state"]["state"]),
            "inc": int(st["state"]["inc"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, d: dict) -> "Rng":
        rng = cls(d["seed"])
        rng._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(d["state"]), "inc": int(d["inc"])},
            "has_uint32": int(d["has_uint32"]),
            "uinteger": int(d["uinteger"]),
        }
        return rng


@dataclass
class Episode:
    """One support set of K (image, mask) pairs and a query image.

    Images are ``H x W x 3`` float arrays, masks ``H x W`` integer labels.
    """

    support_images: list
    support_masks: list
    query_image: np.ndarray
    query_mask: Optional[np.ndarray] = None
    class_id: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.support_images) < 1:
            raise InvalidSpec("an episode needs at least one support pair")
        if len(self.support_images) != len(self.support_masks):
            raise InvalidSpec("support images and masks differ in count")
        hw = tuple(np.shape(self.query_image)[:2])
        for img, m in zip(self.support_images, self.support_masks):
            if tuple(np.shape(img)[:2]) != hw or tuple(np.shape(m)) != hw:
                raise InvalidSpec("all images and masks in an episode must share (H, W)")
        if self.query_mask is not None and tuple(np.shape(self.query_mask)) != hw:
            raise InvalidSpec("query mask does not match query image")

    @property
    def shots(self) -> int:
        return len(self.support_images)


def as_tensor(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def quantize32(x: ArrayLike) -> np.ndarray:
    arr = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    return arr.astype(np.float32).astype(np.float64)


def downsample_mask(mask: ArrayLike, target: tuple) -> np.ndarray:
    """Nearest-neighbour label resampling, sampling at target pixel centres."""
    m = mask.cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    th, tw = int(target[0]), int(target[1])
    if th <= 0 or tw <= 0:
        raise ZeroTargetDim(f"target dims must be positive, got {target}")
    h, w = m.shape
    if th > h or tw > w:
        raise ValueError(f"target {target} exceeds source {m.shape}")
    rows = np.minimum(((np.arange(th) + 0.5) * h / th).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(np.int64), w - 1)
    return m[np.ix_(rows, cols)].copy()


def encode_tensor(t: ArrayLike, dtype: Optional[int] = None) -> bytes:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if dtype is None:
        dtype = PMT_U8 if arr.dtype == np.uint8 else PMT_F32
    if arr.ndim > 255:
        raise DimOverflow(f"rank {arr.ndim} exceeds 255")
    if any(d > _U32_MAX for d in arr.shape):
        raise DimOverflow(f"dimension in {arr.shape} exceeds u32")
    if dtype == PMT_F32:
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite entries")
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    elif dtype == PMT_U8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("mask labels must fit in u8")
        payload = np.ascontiguousarray(arr, dtype=np.uint8).tobytes()
    else:
        raise MalformedHeader(f"unknown dtype code {dtype}")
    header = PMT_MAGIC + struct.pack("<BB", dtype, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != PMT_MAGIC:
        raise MalformedHeader("missing PMT1 magic")
    dtype, rank = buf[4], buf[5]
    if dtype not in (PMT_F32, PMT_U8):
        raise MalformedHeader(f"unknown dtype code {dtype}")
    end = 6 + 4 * rank
    if len(buf) < end:
        raise MalformedHeader("header truncated inside dims")
    dims = struct.unpack(f"<{rank}I", buf[6:end])
    count = 1
    for d in dims:
        count *= d
    itemsize = 4 if dtype == PMT_F32 else 1
    if count * itemsize > 2**62:
        raise DimOverflow(f"dims {dims} describe an impossible payload")
    need = count * itemsize
    if len(buf) - end < need:
        raise TruncatedPayload(f"payload has {len(buf) - end} bytes, need {need}")
    if len(buf) - end > need:
        raise MalformedHeader("trailing bytes after payload")
    if dtype == PMT_F32:
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=end).astype(np.float64)
    else:
        arr = np.frombuffer(buf, dtype=np.uint8, count=count, offset=end).copy()
    return arr.reshape(dims)


def write_tensor(t: ArrayLike, path: Union[str, Path], dtype: Optional[int] = None) -> None:
    Path(path).write_bytes(encode_tensor(t, dtype))


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def tensor_io_roundtrip(t: ArrayLike, path: Union[str, Path]) -> np.ndarray:
    write_tensor(t, path)
    return read_tensor(path)


def write_pgm(arr: ArrayLike, path: Union[str, Path]) -> None:
    """Binary 8-bit PGM dump, linearly rescaled to the array's range."""
    a = arr.detach().cpu().numpy() if isinstance(arr, torch.Tensor) else np.asarray(arr, dtype=np.float64)
    a = np.atleast_2d(a.astype(np.float64))
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
