"""Structured-sparse model files (.dpps) and compression accounting.

A file holds one record per network module. Prunable layers keep only
their surviving weights plus, depending on granularity, the positions of
those weights inside their candidate set:

    fine     S values, S indices (kernel-local or input-neuron index)
    medium   S values, K * n_out kernel indices
    coarse   S values, no indices; pruned filters are dropped from the
             layer and the matching input channels from its successor

Layout (little-endian):

    b"DPPS" | u16 version | u16 records | u8 arch length | arch |
    u8 ndim | u16 input dims ... | records

Every record is a u32 byte length followed by a payload that starts with a
one-byte tag. Layer payloads carry a fixed header, the bit-packed index
stream, the bit-packed value stream and the float32 bias. 32-bit values are
stored as their IEEE bit pattern; narrower values are stored as codebook
indices and decoded with the layer gain.

Typical usage:
    from dpp_lib.sparse_format import compression_report, read_model, write_model

    network.freeze_masks(rng)
    write_model(network, Path("run/model.dpps"))
    restored = read_model(Path("run/model.dpps"))
    print(compression_report(network).rate)
"""

import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from dpp_lib.dpp_mask import Granularity, GranularitySpec, LayerDims, MaskedLayer
from dpp_lib.fileio import atomic_write_bytes
from dpp_lib.gumbel_topk import MaskConfigError
from dpp_lib.models import Flatten, MaxPool2x2, Module, Network, ReLU
from dpp_lib.quant import (
    FULL_PRECISION_BITS,
    QuantConfigError,
    QuantSpec,
    dequantize_codes,
    quantize_codes,
)

logger = logging.getLogger(__name__)

MAGIC = b"DPPS"
VERSION = 1

TAG_RELU = 1
TAG_MAXPOOL = 2
TAG_FLATTEN = 3
TAG_LINEAR = 16
TAG_CONV = 17

GRANULARITY_CODES = {
    Granularity.FINE: 0,
    Granularity.MEDIUM: 1,
    Granularity.COARSE: 2,
}
GRANULARITY_BY_CODE = {code: level for level, code in GRANULARITY_CODES.items()}

_FILE_HEADER = struct.Struct("<4sHH")
_LAYER_HEADER = struct.Struct("<BBBIIIHHIIfII")
_LENGTH = struct.Struct("<I")
_BYTE = struct.Struct("<B")
_DIM = struct.Struct("<H")


class SparseFormatError(Exception):
    """Raised for malformed files and for masks that break the K-hot layout."""

    pass


def stored_value_count(level: Granularity, s: int, k: int, n_out: int) -> int:
    """Values plus indices a layer occupies: 2S, S + K * n_out or S."""
    if level is Granularity.FINE:
        return 2 * s
    if level is Granularity.MEDIUM:
        return s + k * n_out
    return s


def compression_rate(
    p: int, s: int, bits: int, level: Granularity, k: int, n_out: int
) -> float:
    """Dense 32-bit storage over sparse b-bit storage; indices count at b bits.

    Raises:
        ValueError: If S lies outside [1, P]
    """
    if not 0 < s <= p:
        raise ValueError(f"active count {s} must lie in [1, {p}]")
    return p * FULL_PRECISION_BITS / (stored_value_count(level, s, k, n_out) * bits)


@dataclass(frozen=True)
class LayerReport:
    index: int
    kind: str
    granularity: str
    k: int
    c: int
    dense_params: int
    active_params: int
    stored_values: int


@dataclass(frozen=True)
class CompressionReport:
    """Network-level accounting; S and V derive from the granularity specs."""

    arch: str
    total_params: int
    active_params: int
    bits: int
    stored_values: int
    layers: Tuple[LayerReport, ...] = ()
    file_bytes: Optional[int] = None

    @property
    def rate(self) -> float:
        stored_bits = self.stored_values * self.bits
        return self.total_params * FULL_PRECISION_BITS / stored_bits

    @property
    def remaining_percent(self) -> float:
        return 100.0 * self.active_params / self.total_params

    def as_dict(self) -> Dict[str, Any]:
        summary = asdict(self)
        summary.pop("layers")
        summary["rate"] = self.rate
        summary["remaining_percent"] = self.remaining_percent
        return summary


def _layer_report(
    index: int, dims: LayerDims, granularity: GranularitySpec, kind: str
) -> LayerReport:
    geometry = granularity.geometry(dims)
    return LayerReport(
        index=index,
        kind=kind,
        granularity=granularity.level.value,
        k=granularity.k,
        c=geometry.c,
        dense_params=dims.parameter_count,
        active_params=geometry.s,
        stored_values=stored_value_count(
            granularity.level, geometry.s, granularity.k, dims.n_out
        ),
    )


def _aggregate(
    arch: str,
    bits: int,
    layers: Tuple[LayerReport, ...],
    file_bytes: Optional[int] = None,
) -> CompressionReport:
    return CompressionReport(
        arch=arch,
        total_params=sum(layer.dense_params for layer in layers),
        active_params=sum(layer.active_params for layer in layers),
        bits=bits,
        stored_values=sum(layer.stored_values for layer in layers),
        layers=layers,
        file_bytes=file_bytes,
    )


def compression_report(network: Network) -> CompressionReport:
    """Accounting of a network from its granularity specs alone."""
    layers = tuple(
        _layer_report(i, layer.dims, layer.granularity, layer.kind)
        for i, layer in enumerate(network.layers)
    )
    return _aggregate(network.arch, network.quant.bits, layers)


def index_width(candidates: int) -> int:
    """Bits needed for a position in a candidate set of size `candidates`."""
    return max(1, (candidates - 1).bit_length())


def packed_length(count: int, width: int) -> int:
    return (count * width + 7) // 8


def pack_bits(values: np.ndarray, width: int) -> bytes:
    """Pack unsigned integers at `width` bits each, least significant bit first."""
    flat = np.asarray(values, dtype=np.uint64).ravel()
    if flat.size and int(flat.max()) >= (1 << width):
        raise SparseFormatError(f"value {int(flat.max())} does not fit {width} bits")
    shifts = np.arange(width, dtype=np.uint64)
    bits = ((flat[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_bits(data: bytes, count: int, width: int) -> np.ndarray:
    if len(data) < packed_length(count, width):
        raise SparseFormatError(
            f"bit stream of {len(data)} bytes cannot hold {count} x {width} bits"
        )
    raw = np.frombuffer(data, dtype=np.uint8)
    bits = np.unpackbits(raw, count=count * width, bitorder="little")
    bits = bits.reshape(count, width).astype(np.uint64)
    shifts = np.arange(width, dtype=np.uint64)
    return (bits << shifts).sum(axis=1, dtype=np.uint64)


def _candidate_rows(block: np.ndarray, p_axis: int) -> np.ndarray:
    """(D, C) view of a block-shaped array along the pruning axis."""
    if p_axis == 0:
        effective = block[:, :1, :]
    elif p_axis == 2:
        effective = block[:1, :1, :]
    else:
        effective = block
    moved = np.moveaxis(effective, p_axis, -1)
    return moved.reshape(-1, moved.shape[-1])


def selected_positions(
    mask: np.ndarray, dims: LayerDims, granularity: GranularitySpec
) -> np.ndarray:
    """Ascending surviving candidates of every distribution, shape (D, K).

    Raises:
        SparseFormatError: If a row is not K-hot or tied positions disagree
    """
    geometry = granularity.geometry(dims)
    block = mask.reshape(dims.block_shape) != 0
    rows = _candidate_rows(block, geometry.p_axis)
    popcounts = rows.sum(axis=1)
    if not np.all(popcounts == geometry.k):
        bad = int(np.argmax(popcounts != geometry.k))
        raise SparseFormatError(
            f"mask row {bad} keeps {int(popcounts[bad])} candidates, "
            f"expected K={geometry.k}"
        )
    positions = np.nonzero(rows)[1].reshape(rows.shape[0], geometry.k)
    if not np.array_equal(_scatter(positions, dims, geometry.p_axis, None), block):
        raise SparseFormatError("mask is not constant over tied weight positions")
    return positions


def _gather(
    block: np.ndarray, positions: np.ndarray, dims: LayerDims, p_axis: int
) -> np.ndarray:
    """Stored stream of `block` entries at the surviving positions."""
    n_in, a, n_out = dims.block_shape
    if p_axis == 2:
        return block[:, :, positions[0]].ravel()
    if p_axis == 1:
        rows = np.moveaxis(block, 1, -1).reshape(n_in * n_out, a)
        return np.take_along_axis(rows, positions, axis=1).ravel()
    per_output = block.transpose(2, 0, 1)
    return np.take_along_axis(per_output, positions[:, :, None], axis=1).ravel()


def _scatter(
    positions: np.ndarray,
    dims: LayerDims,
    p_axis: int,
    values: Optional[np.ndarray],
) -> np.ndarray:
    """Inverse of `_gather`; with `values` None it rebuilds the boolean mask."""
    n_in, a, n_out = dims.block_shape
    k = positions.shape[1]
    dtype = bool if values is None else values.dtype
    if p_axis == 2:
        block = np.zeros(dims.block_shape, dtype=dtype)
        kept = positions[0]
        block[:, :, kept] = True if values is None else values.reshape(n_in, a, k)
        return block
    if p_axis == 1:
        rows = np.zeros((n_in * n_out, a), dtype=dtype)
        source = True if values is None else values.reshape(n_in * n_out, k)
        np.put_along_axis(rows, positions, source, axis=1)
        return np.moveaxis(rows.reshape(n_in, n_out, a), -1, 1)
    per_output = np.zeros((n_out, n_in, a), dtype=dtype)
    index = np.broadcast_to(positions[:, :, None], (n_out, k, a))
    source = True if values is None else values.reshape(n_out, k, a)
    np.put_along_axis(per_output, index, source, axis=1)
    return per_output.transpose(1, 2, 0)


def _shrink_inputs(
    layer: MaskedLayer, kept_inputs: np.ndarray
) -> Tuple[LayerDims, GranularitySpec]:
    dims = LayerDims(len(kept_inputs), layer.dims.n_out, layer.dims.kernel)
    granularity = layer.granularity
    if layer.geometry.prunes_input_axis:
        if granularity.k != layer.geometry.c:
            raise SparseFormatError(
                "cannot drop input channels of a layer that prunes its inputs "
                f"with K={granularity.k} < C={layer.geometry.c}"
            )
        granularity = GranularitySpec(granularity.level, dims.n_in)
    return dims, granularity


def _encode_layer(
    layer: MaskedLayer, kept_inputs: Optional[np.ndarray]
) -> Tuple[bytes, Optional[np.ndarray]]:
    """Layer payload, plus the surviving filters when the layer is coarse."""
    if layer.frozen_mask is None:
        raise SparseFormatError(f"{layer.kind} layer has no frozen mask")
    dims, granularity = layer.dims, layer.granularity
    weights = layer.weight.data.reshape(dims.block_shape)
    mask = layer.frozen_mask.reshape(dims.block_shape)
    bias = layer.bias.data
    if kept_inputs is not None:
        dims, granularity = _shrink_inputs(layer, kept_inputs)
        weights, mask = weights[kept_inputs], mask[kept_inputs]
    geometry = granularity.geometry(dims)
    positions = selected_positions(mask, dims, granularity)

    kept_filters = None
    if geometry.level is Granularity.COARSE:
        kept_filters = positions[0].copy()
        bias = bias[kept_filters]

    gathered = _gather(weights, positions, dims, geometry.p_axis)
    if layer.quant.enabled:
        codes = quantize_codes(gathered, layer.quant)
    else:
        codes = gathered.astype(np.float32).view(np.uint32)
    indices = positions.ravel() if geometry.index_count else np.zeros(0, np.int64)
    width = index_width(geometry.c)

    stored_out = dims.n_out if kept_filters is None else len(kept_filters)
    kh, kw = dims.kernel if dims.kernel is not None else (0, 0)
    header = _LAYER_HEADER.pack(
        GRANULARITY_CODES[geometry.level],
        layer.quant.bits,
        width,
        layer.dims.n_in,
        layer.dims.n_out,
        dims.n_in,
        kh,
        kw,
        stored_out,
        layer.granularity.k,
        float(layer.gain),
        indices.size,
        codes.size,
    )
    tag = TAG_CONV if dims.is_conv else TAG_LINEAR
    payload = b"".join(
        [
            _BYTE.pack(tag),
            header,
            pack_bits(indices, width),
            pack_bits(codes, layer.quant.bits),
            bias.astype("<f4").tobytes(),
        ]
    )
    return payload, kept_filters


def _propagate_filters(
    module: Module, kept: Optional[np.ndarray], input_shape: Tuple[int, ...]
) -> Optional[np.ndarray]:
    if kept is None or not isinstance(module, Flatten):
        return kept
    spatial = int(np.prod(input_shape[1:]))
    return (kept[:, None] * spatial + np.arange(spatial)).ravel()


def encode_model(network: Network) -> bytes:
    """Serialize a network whose layers all carry a frozen mask.

    Raises:
        SparseFormatError: If a mask is missing, not K-hot, or a coarse
            layer feeds a successor that cannot drop its inputs
    """
    arch = network.arch.encode("ascii")
    parts = [
        _FILE_HEADER.pack(MAGIC, VERSION, len(network.modules)),
        _BYTE.pack(len(arch)),
        arch,
        _BYTE.pack(len(network.input_shape)),
        b"".join(_DIM.pack(extent) for extent in network.input_shape),
    ]
    shapes = network.trace_shapes()
    kept: Optional[np.ndarray] = None
    for position, module in enumerate(network.modules):
        kept = _propagate_filters(module, kept, shapes[position])
        if isinstance(module, MaskedLayer):
            payload, kept = _encode_layer(module, kept)
        else:
            payload = _BYTE.pack(_op_tag(module))
        parts.append(_LENGTH.pack(len(payload)))
        parts.append(payload)
    if kept is not None:
        raise SparseFormatError("the output layer cannot drop its filters")
    return b"".join(parts)


def _op_tag(module: Module) -> int:
    if isinstance(module, ReLU):
        return TAG_RELU
    if isinstance(module, MaxPool2x2):
        return TAG_MAXPOOL
    return TAG_FLATTEN


class _Reader:
    """Sequential reader that names the byte offset of any truncation."""

    def __init__(self, data: bytes, base: int = 0) -> None:
        self.data = data
        self.offset = 0
        self.base = base

    @property
    def position(self) -> int:
        return self.base + self.offset

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise SparseFormatError(
                f"truncated {what} at byte offset {self.position}: need {count} "
                f"bytes, {len(self.data) - self.offset} left"
            )
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, layout: struct.Struct, what: str) -> Tuple[Any, ...]:
        return layout.unpack(self.take(layout.size, what))


@dataclass
class DecodedModel:
    network: Network
    report: CompressionReport


def _header_problem(
    conv: bool,
    dense_dims: Tuple[int, int],
    dims: Tuple[int, int],
    kernel: Tuple[int, int],
    width: int,
    gain: float,
) -> Optional[str]:
    extents = dense_dims + dims + (kernel if conv else ())
    if min(extents) < 1:
        return f"zero extent in {extents}"
    if dims[0] > dense_dims[0] or dims[1] > dense_dims[1]:
        return f"stored extents {dims} exceed the dense {dense_dims}"
    if not 1 <= width <= 32:
        return f"index width {width} outside 1..32"
    if not math.isfinite(gain) or gain <= 0:
        return f"layer gain {gain} is not a positive number"
    return None


def _decode_layer(
    reader: _Reader, tag: int, index: int
) -> Tuple[MaskedLayer, LayerReport, int]:
    header_at = reader.position
    (
        level_code,
        bits,
        width,
        dense_n_in,
        dense_n_out,
        n_in,
        kh,
        kw,
        n_out,
        k,
        gain,
        n_indices,
        n_values,
    ) = reader.unpack(_LAYER_HEADER, f"layer {index} header")
    at = f"layer {index} header at byte offset {header_at}"
    problem = _header_problem(
        tag == TAG_CONV,
        (dense_n_in, dense_n_out),
        (n_in, n_out),
        (kh, kw),
        width,
        gain,
    )
    if problem is not None:
        raise SparseFormatError(f"{at}: {problem}")
    if level_code not in GRANULARITY_BY_CODE:
        raise SparseFormatError(
            f"layer {index}: unknown granularity code {level_code}"
        )
    level = GRANULARITY_BY_CODE[level_code]
    kernel = (kh, kw) if tag == TAG_CONV else None
    dense_dims = LayerDims(dense_n_in, dense_n_out, kernel)
    dims = LayerDims(n_in, n_out, kernel)
    try:
        quant = QuantSpec(bits)
        # dropped inputs or filters leave K equal to the shrunk extent
        stored_k = k
        if level is Granularity.COARSE:
            stored_k = n_out
        elif n_in != dense_n_in:
            if GranularitySpec(level, k).geometry(dense_dims).prunes_input_axis:
                stored_k = n_in
        granularity = GranularitySpec(level, stored_k)
        geometry = granularity.geometry(dims)
    except (MaskConfigError, QuantConfigError) as e:
        raise SparseFormatError(f"{at}: {e}") from e
    if n_indices != geometry.index_count or n_values != geometry.s:
        raise SparseFormatError(
            f"layer {index}: {n_indices} indices and {n_values} values do not "
            f"match {level.value} K={stored_k} on {dims.weight_shape}"
        )

    index_bytes = reader.take(
        packed_length(n_indices, width), f"layer {index} indices"
    )
    value_bytes = reader.take(packed_length(n_values, bits), f"layer {index} values")
    bias_bytes = reader.take(4 * n_out, f"layer {index} bias")

    if level is Granularity.COARSE:
        positions = np.arange(n_out)[None, :]
    else:
        positions = unpack_bits(index_bytes, n_indices, width).astype(np.int64)
        positions = positions.reshape(geometry.d, stored_k)
        if positions.size and int(positions.max()) >= geometry.c:
            raise SparseFormatError(f"layer {index}: index outside candidate set")
        if stored_k > 1 and not np.all(np.diff(positions, axis=1) > 0):
            raise SparseFormatError(f"layer {index}: indices not strictly ascending")

    codes = unpack_bits(value_bytes, n_values, bits)
    if quant.enabled:
        values = dequantize_codes(codes, quant, np.float32) * np.float32(gain)
    else:
        values = codes.astype(np.uint32).view(np.float32)
    weight = _scatter(positions, dims, geometry.p_axis, values.astype(np.float32))
    mask = _scatter(positions, dims, geometry.p_axis, None).astype(np.float32)
    bias = np.frombuffer(bias_bytes, dtype="<f4").astype(np.float32)
    layer = MaskedLayer.from_arrays(
        dims,
        granularity,
        weight.reshape(dims.weight_shape),
        bias,
        mask.reshape(dims.weight_shape),
    )
    kind = "conv" if kernel is not None else "linear"
    report = _layer_report(index, dense_dims, GranularitySpec(level, k), kind)
    return layer, report, bits


def decode_model(data: bytes) -> DecodedModel:
    """Rebuild a full-precision network with the stored frozen masks.

    Raises:
        SparseFormatError: On a bad magic, an unknown version or record tag,
            truncation, or inconsistent counts
    """
    reader = _Reader(data)
    magic, version, record_count = reader.unpack(_FILE_HEADER, "file header")
    if magic != MAGIC:
        raise SparseFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise SparseFormatError(f"unsupported format version {version}")
    (arch_length,) = reader.unpack(_BYTE, "architecture name length")
    name_at = reader.position
    try:
        arch = reader.take(arch_length, "architecture name").decode("ascii")
    except UnicodeDecodeError as e:
        raise SparseFormatError(
            f"architecture name at byte offset {name_at} is not ASCII"
        ) from e
    (ndim,) = reader.unpack(_BYTE, "input rank")
    input_shape = tuple(reader.unpack(_DIM, "input dims")[0] for _ in range(ndim))

    modules: List[Module] = []
    reports: List[LayerReport] = []
    bits = FULL_PRECISION_BITS
    for record in range(record_count):
        (length,) = reader.unpack(_LENGTH, f"record {record} length")
        start = reader.position
        body = _Reader(reader.take(length, f"record {record}"), base=start)
        (tag,) = body.unpack(_BYTE, f"record {record} tag")
        if tag in (TAG_LINEAR, TAG_CONV):
            layer, layer_report, bits = _decode_layer(body, tag, len(reports))
            modules.append(layer)
            reports.append(layer_report)
        elif tag == TAG_RELU:
            modules.append(ReLU())
        elif tag == TAG_MAXPOOL:
            modules.append(MaxPool2x2())
        elif tag == TAG_FLATTEN:
            modules.append(Flatten())
        else:
            raise SparseFormatError(f"record {record}: unknown tag {tag}")
    if reader.offset != len(data):
        raise SparseFormatError(
            f"{len(data) - reader.offset} trailing bytes at offset {reader.offset}"
        )
    network = Network(arch, modules, input_shape)
    report = _aggregate(arch, bits, tuple(reports), file_bytes=len(data))
    return DecodedModel(network=network, report=report)


def write_model(network: Network, path: Path) -> int:
    """Write `network` atomically; returns the file size in bytes."""
    data = encode_model(network)
    atomic_write_bytes(path, data)
    logger.info("wrote %s (%d bytes)", path, len(data))
    return len(data)


def read_model(path: Path) -> DecodedModel:
    return decode_model(Path(path).read_bytes())

