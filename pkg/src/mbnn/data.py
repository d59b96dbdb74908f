"""MNIST IDX loading, splits, checkpoints and result CSVs.

Checkpoint container (all integers little-endian)::

    b"MBNN"            magic
    u16                format version (1)
    u16                section count
    repeated:
      4 bytes          ASCII tag
      u32              payload length
      payload
    u32                CRC-32 of every preceding byte

Model checkpoints carry ``ARCH`` (JSON geometry), ``CNV1``/``CNV2`` (binary
filters bit-packed, +1 -> 1, row-major, MSB first), ``FC__`` (int8 Q0.7 codes
or float32), ``BN_1``/``BN_2`` (float32 mean, var, gamma, beta) and ``META``
(JSON training metadata). Crossbar snapshots use ``XBAR`` JSON headers followed
by ``XBWn``/``XBGn`` weight and float64 conductance sections.
"""

from __future__ import annotations

import csv
import gzip
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from mbnn import fixedpoint
from mbnn.crossbar import Crossbar, DeviceParams, VariationSpec
from mbnn.im2col import ConvLayerSpec
from mbnn.nn import FP8, FR32, BatchNormState, NetworkModel, clip_bound

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray  # (n, 1, 28, 28) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices])

    def head(self, n: Optional[int]) -> "Dataset":
        return self if n is None or n >= len(self) else self.subset(np.arange(n))


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedFileError(f"{path}: expected at least {header} header bytes, got {len(buf)}")
    found = struct.unpack(">I", buf[:4])[0]
    if found != magic:
        raise BadMagicError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = header + int(np.prod(dims))
    if len(buf) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _parse_idx(_read(path), IMAGE_MAGIC, 3, path)


def read_idx_labels(path) -> np.ndarray:
    return _parse_idx(_read(path), LABEL_MAGIC, 1, path)


def load_mnist(images_path, labels_path) -> Dataset:
    raw_images = read_idx_images(images_path)
    raw_labels = read_idx_labels(labels_path)
    if len(raw_images) != len(raw_labels):
        raise CountMismatchError(
            f"{images_path} holds {len(raw_images)} images but {labels_path} holds {len(raw_labels)} labels"
        )
    if raw_labels.size and raw_labels.max() > 9:
        raise IdxFormatError(f"{labels_path}: label {raw_labels.max()} outside [0, 9]")
    images = (raw_images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return Dataset(images, raw_labels.astype(np.int64))


def load_mnist_dir(directory, part: str = "train") -> Dataset:
    """Load ``train`` or ``test`` from a directory holding the standard file names (optionally .gz)."""
    directory = Path(directory)
    names = []
    for name in MNIST_FILES[part]:
        p = directory / name
        if not p.exists() and (directory / (name + ".gz")).exists():
            p = directory / (name + ".gz")
        if not p.exists():
            raise FileNotFoundError(f"MNIST file not found: {p}")
        names.append(p)
    return load_mnist(*names)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def split(dataset: Dataset, fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle then partition into (first ``floor(fraction * n)``, rest)."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    cut = int(np.floor(fraction * n))
    return dataset.subset(np.sort(order[:cut])), dataset.subset(np.sort(order[cut:]))


# ---------------------------------------------------------------------------
# container

MAGIC = b"MBNN"
VERSION = 1


def _pack_container(sections: Sequence[tuple[bytes, bytes]]) -> bytes:
    out = bytearray(MAGIC + struct.pack("<HH", VERSION, len(sections)))
    for tag, payload in sections:
        if len(tag) != 4:
            raise ValueError(f"section tag must be 4 bytes: {tag!r}")
        out += tag + struct.pack("<I", len(payload)) + payload
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def _unpack_container(buf: bytes, path="<bytes>") -> dict[bytes, bytes]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an MBNN container")
    (stored_crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"{path}: CRC-32 mismatch, file is corrupted")
    version, count = struct.unpack("<HH", buf[4:8])
    if version != VERSION:
        raise VersionError(f"{path}: unsupported container version {version}")
    sections, pos = {}, 8
    for _ in range(count):
        tag = buf[pos : pos + 4]
        (length,) = struct.unpack("<I", buf[pos + 4 : pos + 8])
        pos += 8
        sections[tag] = buf[pos : pos + length]
        pos += length
    if pos != len(buf) - 4:
        raise CheckpointError(f"{path}: section table does not cover the file")
    return sections


def pack_bits(w_b: np.ndarray) -> bytes:
    return np.packbits((np.asarray(w_b) > 0).ravel()).tobytes()


def unpack_bits(payload: bytes, shape) -> np.ndarray:
    n = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[:n]
    return np.where(bits.reshape(shape) == 1, 1.0, -1.0)


def _spec_dict(spec: ConvLayerSpec) -> dict:
    d = asdict(spec)
    d["kernel"] = list(spec.kernel)
    return d


def _bn_bytes(bn: BatchNormState) -> bytes:
    return np.stack([bn.running_mean, bn.running_var, bn.gamma, bn.beta]).astype("<f4").tobytes()


def _bn_from(payload: bytes, momentum: float, eps: float) -> BatchNormState:
    mean, var, gamma, beta = np.frombuffer(payload, dtype="<f4").reshape(4, -1).astype(np.float32)
    return BatchNormState(gamma.copy(), beta.copy(), mean.copy(), var.copy(), momentum, eps)


@dataclass
class Checkpoint:
    model: NetworkModel
    metadata: dict = field(default_factory=dict)
    version: int = VERSION


def checkpoint_bytes(model: NetworkModel, metadata: Optional[dict] = None) -> bytes:
    arch = {
        "conv1": _spec_dict(model.conv1),
        "conv2": _spec_dict(model.conv2),
        "fc_shape": list(model.fc.shape),
        "t_clip": model.t_clip,
        "representation": model.representation,
        "bn_momentum": model.bn1.momentum,
        "bn_eps": model.bn1.eps,
    }
    wb1, wb2 = model.binary_weights
    if model.representation == FP8:
        fc = fixedpoint.quantize_array(model.fc).tobytes()
    else:
        fc = np.asarray(model.fc, dtype="<f4").tobytes()
    sections = [
        (b"ARCH", json.dumps(arch, sort_keys=True).encode()),
        (b"CNV1", pack_bits(wb1)),
        (b"CNV2", pack_bits(wb2)),
        (b"FC__", fc),
        (b"BN_1", _bn_bytes(model.bn1)),
        (b"BN_2", _bn_bytes(model.bn2)),
        (b"META", json.dumps(metadata or {}, sort_keys=True).encode()),
    ]
    return _pack_container(sections)


def save_checkpoint(path, model: NetworkModel, metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model, metadata))
    return path


def load_checkpoint(path) -> Checkpoint:
    """Rebuild an inference-ready model.

    Only binary filters are stored, so shadow weights come back as ``+-t_clip``
    (the largest grid value not above it); their signs, and hence every forward pass,
    match the saved model exactly.
    """
    path = Path(path)
    s = _unpack_container(path.read_bytes(), path)
    try:
        arch = json.loads(s[b"ARCH"])
        conv1 = ConvLayerSpec(**{**arch["conv1"], "kernel": tuple(arch["conv1"]["kernel"])})
        conv2 = ConvLayerSpec(**{**arch["conv2"], "kernel": tuple(arch["conv2"]["kernel"])})
        rep = arch["representation"]
        t_clip = float(arch["t_clip"])
        magnitude = max(clip_bound(t_clip, rep), fixedpoint.LSB) if rep == FP8 else np.float32(t_clip)

        def shadow(tag, spec):
            wb = unpack_bits(s[tag], (spec.filters, spec.in_channels, *spec.kernel))
            w = wb * magnitude
            return w.astype(np.float32) if rep == FR32 else w

        fc_shape = tuple(arch["fc_shape"])
        if rep == FP8:
            fc = fixedpoint.dequantize_array(np.frombuffer(s[b"FC__"], dtype=np.int8)).reshape(fc_shape)
        else:
            fc = np.frombuffer(s[b"FC__"], dtype="<f4").astype(np.float32).reshape(fc_shape)
        model = NetworkModel(
            conv1, conv2, shadow(b"CNV1", conv1), shadow(b"CNV2", conv2),
            _bn_from(s[b"BN_1"], arch["bn_momentum"], arch["bn_eps"]),
            _bn_from(s[b"BN_2"], arch["bn_momentum"], arch["bn_eps"]),
            fc, t_clip, rep,
        )
        meta = json.loads(s.get(b"META", b"{}"))
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    return Checkpoint(model, meta)


def save_crossbars(path, crossbars: Sequence[Crossbar], metadata: Optional[dict] = None) -> Path:
    header = {
        "metadata": metadata or {},
        "layers": [
            {
                "k": xb.k,
                "mode": xb.mode,
                "r_on": xb.params.r_on,
                "r_off": xb.params.r_off,
                "weights_shape": list(xb.weights.shape),
                "conductance_shape": list(xb.conductance.shape),
                "variation": None if xb.variation is None else asdict(xb.variation),
            }
            for xb in crossbars
        ],
    }
    sections = [(b"XBAR", json.dumps(header, sort_keys=True).encode())]
    for i, xb in enumerate(crossbars):
        sections.append((f"XBW{i}".encode(), pack_bits(xb.weights)))
        sections.append((f"XBG{i}".encode(), np.asarray(xb.conductance, dtype="<f8").tobytes()))
    path = Path(path)
    path.write_bytes(_pack_container(sections))
    return path


def load_crossbars(path) -> list[Crossbar]:
    path = Path(path)
    s = _unpack_container(path.read_bytes(), path)
    header = json.loads(s[b"XBAR"])
    out = []
    for i, layer in enumerate(header["layers"]):
        weights = unpack_bits(s[f"XBW{i}".encode()], layer["weights_shape"]).astype(np.int8)
        g = np.frombuffer(s[f"XBG{i}".encode()], dtype="<f8").reshape(layer["conductance_shape"]).copy()
        var = layer["variation"]
        out.append(Crossbar(
            weights=weights, conductance=g, params=DeviceParams(layer["r_on"], layer["r_off"]),
            k=layer["k"], mode=layer["mode"], variation=None if var is None else VariationSpec(**var),
        ))
    return out


# ---------------------------------------------------------------------------
# results

RESULT_COLUMNS = ("experiment_id", "variant", "optimizer", "sigma", "seed", "k1", "k2", "accuracy")


@dataclass
class ResultRecord:
    experiment_id: str
    variant: str
    optimizer: str
    sigma: Optional[float] = None
    seed: Optional[int] = None
    k1: Optional[float] = None
    k2: Optional[float] = None
    accuracy: Optional[float] = None

    def row(self) -> list[str]:
        return ["" if v is None else _fmt(v) for v in (getattr(self, c) for c in RESULT_COLUMNS)]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])
    except OSError as exc:
        raise OSError(f"could not write results to {path}: {exc}") from exc
    return path


def write_results_csv(records: Iterable[ResultRecord], path) -> Path:
    return write_csv(path, RESULT_COLUMNS, (r.row() for r in records))


def read_results_csv(path) -> list[ResultRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    casts = {"sigma": float, "seed": int, "k1": float, "k2": float, "accuracy": float}
    out = []
    for row in rows:
        kw = {k: (casts[k](v) if v != "" else None) if k in casts else v for k, v in row.items()}
        out.append(ResultRecord(**kw))
    return out
