"""Binary containers: single pseudoimage tensors and full weight bundles.

Tensor container (little-endian throughout):
    header  4 x u64: height, width, channels, nnz
    sparse  nnz x 2 u64 coordinates (row, col), then nnz x C float32 values
    dense   nnz = H * W and no coordinate block; H * W * C float32 values,
            row-major

Weights container ("SPPW"):
    magic   b"SPPW"
    version u32 (currently 1)
    mlen    u64, byte length of the JSON manifest
    manifest UTF-8 JSON naming each tensor (name, shape, offset); offsets are
            relative to the first blob byte
    blobs   float32 little-endian tensor data, back to back

Writers are deterministic: fixed tensor order, sorted JSON keys, compact
separators. Saving the same bundle twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .backbone import MID_COUNTS, UP_KERNEL_SIZES, BackboneWeights, BlockWeights
from .kernels import (
    KIND_STANDARD,
    KIND_SUBMANIFOLD,
    KIND_TRANSPOSE,
    BatchNormParams,
    ConvLayerWeights,
)
from .pillars import VectorizerWeights
from .pseudoimage import DensePseudoimage, SparsePseudoimage

__all__ = [
    "MAGIC",
    "VERSION",
    "WeightsBundle",
    "dense_to_bytes",
    "dense_from_bytes",
    "sparse_to_bytes",
    "sparse_from_bytes",
    "write_dense_tensor",
    "read_dense_tensor",
    "write_sparse_tensor",
    "read_sparse_tensor",
    "weights_to_bytes",
    "weights_from_bytes",
    "save_weights",
    "load_weights",
]

MAGIC = b"SPPW"
VERSION = 1

_HEADER = struct.Struct("<QQQQ")


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def dense_to_bytes(image: DensePseudoimage) -> bytes:
    header = _HEADER.pack(image.height, image.width, image.channels, image.height * image.width)
    return header + _f32_bytes(image.values)


def dense_from_bytes(buf: bytes) -> DensePseudoimage:
    if len(buf) < _HEADER.size:
        raise ValueError("dense tensor: truncated header")
    h, w, c, nnz = _HEADER.unpack_from(buf)
    if nnz != h * w:
        raise ValueError(f"dense tensor: nnz {nnz} != {h}*{w}")
    expect = _HEADER.size + 4 * h * w * c
    if len(buf) != expect:
        raise ValueError(f"dense tensor: size {len(buf)} != expected {expect}")
    vals = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    return DensePseudoimage(int(h), int(w), int(c), vals)


def sparse_to_bytes(image: SparsePseudoimage) -> bytes:
    header = _HEADER.pack(image.height, image.width, image.channels, image.num_sites)
    coords = np.ascontiguousarray(image.coordinates, dtype="<u8").tobytes()
    return header + coords + _f32_bytes(image.site_values)


def sparse_from_bytes(buf: bytes) -> SparsePseudoimage:
    if len(buf) < _HEADER.size:
        raise ValueError("sparse tensor: truncated header")
    h, w, c, nnz = _HEADER.unpack_from(buf)
    coord_bytes = 16 * nnz
    expect = _HEADER.size + coord_bytes + 4 * nnz * c
    if len(buf) != expect:
        raise ValueError(f"sparse tensor: size {len(buf)} != expected {expect}")
    coords = np.frombuffer(buf, dtype="<u8", offset=_HEADER.size, count=2 * nnz)
    coords = coords.reshape(nnz, 2).astype(np.int64)
    vals = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size + coord_bytes)
    return SparsePseudoimage(int(h), int(w), int(c), coords, vals.reshape(nnz, c))


def write_dense_tensor(image: DensePseudoimage, path: str) -> None:
    with open(path, "wb") as f:
        f.write(dense_to_bytes(image))


def read_dense_tensor(path: str) -> DensePseudoimage:
    with open(path, "rb") as f:
        return dense_from_bytes(f.read())


def write_sparse_tensor(image: SparsePseudoimage, path: str) -> None:
    with open(path, "wb") as f:
        f.write(sparse_to_bytes(image))


def read_sparse_tensor(path: str) -> SparsePseudoimage:
    with open(path, "rb") as f:
        return sparse_from_bytes(f.read())


@dataclass(frozen=True)
class WeightsBundle:
    """Everything a pipeline run needs: vectorizer, backbone, head."""

    vectorizer: VectorizerWeights
    backbone: BackboneWeights
    head: ConvLayerWeights

    def __post_init__(self) -> None:
        c = self.backbone.base_channels
        if self.vectorizer.out_channels != c:
            raise ValueError(
                f"vectorizer outputs {self.vectorizer.out_channels} channels, backbone wants {c}"
            )
        kh, kw, cin, _ = self.head.kernel.shape
        if (kh, kw) != (1, 1) or self.head.kind != KIND_STANDARD or cin != 6 * c:
            raise ValueError(f"head must be a standard 1x1 layer with {6 * c} input channels")


def _bn_items(prefix: str, bn: BatchNormParams) -> list[tuple[str, np.ndarray]]:
    return [
        (f"{prefix}/gamma", bn.gamma),
        (f"{prefix}/beta", bn.beta),
        (f"{prefix}/mean", bn.mean),
        (f"{prefix}/var", bn.var),
        (f"{prefix}/eps", np.asarray([bn.eps], dtype=np.float32)),
    ]


def _tensor_items(bundle: WeightsBundle) -> list[tuple[str, np.ndarray]]:
    items: list[tuple[str, np.ndarray]] = [("vectorizer/linear", bundle.vectorizer.linear)]
    items += _bn_items("vectorizer/bn", bundle.vectorizer.bn)
    for k, blk in enumerate(bundle.backbone.blocks, start=1):
        items.append((f"block{k}/down3x3", blk.down3x3.kernel))
        items.append((f"block{k}/down2x2", blk.down2x2.kernel))
        items += _bn_items(f"block{k}/down_bn", blk.down_bn)
        for i, (conv, bn) in enumerate(zip(blk.mid_convs, blk.mid_bns)):
            items.append((f"block{k}/mid{i}", conv.kernel))
            items += _bn_items(f"block{k}/mid{i}_bn", bn)
        if blk.wide_first is not None:
            items.append((f"block{k}/wide", blk.wide_first.kernel))
        items.append((f"block{k}/up", blk.up_conv.kernel))
        items += _bn_items(f"block{k}/up_bn", blk.up_bn)
    items.append(("head/kernel", bundle.head.kernel))
    return items


def weights_to_bytes(bundle: WeightsBundle) -> bytes:
    items = _tensor_items(bundle)
    manifest_tensors = []
    blobs = []
    offset = 0
    for name, arr in items:
        data = _f32_bytes(arr)
        manifest_tensors.append(
            {"name": name, "shape": list(np.asarray(arr).shape), "offset": offset}
        )
        blobs.append(data)
        offset += len(data)
    manifest = {
        "meta": {
            "base_channels": bundle.backbone.base_channels,
            "head_channels": bundle.head.out_channels,
        },
        "tensors": manifest_tensors,
    }
    mjson = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(mjson)) + mjson + b"".join(blobs)


def weights_from_bytes(buf: bytes) -> WeightsBundle:
    head_len = 4 + 4 + 8
    if len(buf) < head_len:
        raise ValueError("weights: truncated header")
    if buf[:4] != MAGIC:
        raise ValueError(f"weights: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ValueError(f"weights: unsupported version {version}")
    (mlen,) = struct.unpack_from("<Q", buf, 8)
    if len(buf) < head_len + mlen:
        raise ValueError("weights: truncated manifest")
    try:
        manifest = json.loads(buf[head_len : head_len + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError("weights: malformed manifest") from exc
    blob_start = head_len + mlen

    tensors: dict[str, np.ndarray] = {}
    end = 0
    for entry in manifest.get("tensors", []):
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        size = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        lo = blob_start + offset
        if lo + size > len(buf):
            raise ValueError(f"weights: tensor {name!r} runs past end of file")
        tensors[name] = np.frombuffer(buf, dtype="<f4", offset=lo, count=size // 4).reshape(shape)
        end = max(end, offset + size)
    if blob_start + end != len(buf):
        raise ValueError("weights: blob region size mismatch")

    def need(name: str) -> np.ndarray:
        if name not in tensors:
            raise ValueError(f"weights: missing tensor {name!r}")
        return tensors[name]

    def bn(prefix: str) -> BatchNormParams:
        return BatchNormParams(
            gamma=need(f"{prefix}/gamma"),
            beta=need(f"{prefix}/beta"),
            mean=need(f"{prefix}/mean"),
            var=need(f"{prefix}/var"),
            eps=float(need(f"{prefix}/eps")[0]),
        )

    meta = manifest.get("meta", {})
    try:
        vec = VectorizerWeights(linear=need("vectorizer/linear"), bn=bn("vectorizer/bn"))
        blocks = []
        for k in range(1, 4):
            mids = tuple(
                ConvLayerWeights(need(f"block{k}/mid{i}"), 1, KIND_SUBMANIFOLD)
                for i in range(MID_COUNTS[k - 1])
            )
            mid_bns = tuple(bn(f"block{k}/mid{i}_bn") for i in range(MID_COUNTS[k - 1]))
            wide_name = f"block{k}/wide"
            wide = (
                ConvLayerWeights(tensors[wide_name], 1, KIND_SUBMANIFOLD)
                if wide_name in tensors
                else None
            )
            ku = UP_KERNEL_SIZES[k - 1]
            blocks.append(
                BlockWeights(
                    down3x3=ConvLayerWeights(need(f"block{k}/down3x3"), 2, KIND_STANDARD),
                    down2x2=ConvLayerWeights(need(f"block{k}/down2x2"), 2, KIND_STANDARD),
                    down_bn=bn(f"block{k}/down_bn"),
                    mid_convs=mids,
                    mid_bns=mid_bns,
                    up_conv=ConvLayerWeights(need(f"block{k}/up"), ku, KIND_TRANSPOSE),
                    up_bn=bn(f"block{k}/up_bn"),
                    wide_first=wide,
                )
            )
        backbone = BackboneWeights(
            base_channels=int(meta.get("base_channels", vec.out_channels)),
            blocks=tuple(blocks),
        )
        head = ConvLayerWeights(need("head/kernel"), 1, KIND_STANDARD)
        return WeightsBundle(vectorizer=vec, backbone=backbone, head=head)
    except ValueError:
        raise
    except (KeyError, TypeError) as exc:
        raise ValueError("weights: malformed bundle") from exc


def save_weights(bundle: WeightsBundle, path: str) -> None:
    with open(path, "wb") as f:
        f.write(weights_to_bytes(bundle))


def load_weights(path: str) -> WeightsBundle:
    with open(path, "rb") as f:
        return weights_from_bytes(f.read())
