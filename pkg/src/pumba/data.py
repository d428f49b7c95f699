"""On-disk dataset container and the synthetic interface-pair generator.

Container layout::

    <root>/container.json    {"version": 1, "channels": N, "image_size": a, "energy_terms": [...]}
    <root>/manifest.jsonl    one JSON record per sample
    <root>/tensors/*.tns     one image tensor per sample

Tensor file (all little-endian)::

    offset 0   8 bytes  magic b"PUMBATNS"
    offset 8   u16      format version
    offset 10  u8       dtype tag (1 = float32)
    offset 11  u8       rank r
    offset 12  r x u32  extents
    then       float32 payload, row-major
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .model import CHANNELS, ENERGY_TERMS, BranchGroupSpec, InterfacePairSample

MAGIC = b"PUMBATNS"
TENSOR_VERSION = 1
CONTAINER_VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4")}
CAPRI_CATEGORIES = ("incorrect", "acceptable", "medium", "high")
_HEADER = struct.Struct("<8sHBB")


class FormatError(ValueError):
    """Malformed tensor file."""


class ManifestError(ValueError):
    """Manifest inconsistent with the files on disk."""


# ---------------------------------------------------------------- tensor files

def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = _HEADER.pack(MAGIC, TENSOR_VERSION, 1, arr.ndim)
    return head + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{source}: truncated header at byte offset {len(buf)} (need {_HEADER.size})")
    magic, version, tag, rank = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at byte offset 0")
    if version != TENSOR_VERSION:
        raise FormatError(f"{source}: unsupported version {version} at byte offset 8")
    if tag not in DTYPE_TAGS:
        raise FormatError(f"{source}: unknown dtype tag {tag} at byte offset 10")
    off = _HEADER.size
    if len(buf) < off + 4 * rank:
        raise FormatError(f"{source}: truncated extents at byte offset {len(buf)} (need {off + 4 * rank})")
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    dtype = DTYPE_TAGS[tag]
    need = off + int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) != need:
        raise FormatError(f"{source}: payload ends at byte offset {len(buf)}, expected {need}")
    return np.frombuffer(buf, dtype=dtype, offset=off).reshape(shape).astype(np.float32)


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise ManifestError(f"tensor file missing: {path}") from None
    return decode_tensor(buf, str(path))


# ---------------------------------------------------------------- container

@dataclass
class ManifestRecord:
    complex_id: str
    model_id: str
    label: int
    capri_category: str
    path: str
    energies: list[float]

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


@dataclass
class SampleArrays:
    """Whole container loaded into memory."""

    images: np.ndarray
    energies: np.ndarray
    labels: np.ndarray
    complex_ids: list[str]
    model_ids: list[str]
    categories: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_samples(cls, samples: list[InterfacePairSample]) -> "SampleArrays":
        return cls(
            np.stack([s.image for s in samples]),
            np.stack([s.energies for s in samples]).astype(np.float32),
            np.asarray([s.label for s in samples], dtype=np.int64),
            [s.complex_id for s in samples], [s.model_id for s in samples],
            [s.capri_category for s in samples])

    def subset(self, idx) -> "SampleArrays":
        idx = np.asarray(idx, dtype=int)
        return SampleArrays(self.images[idx], self.energies[idx], self.labels[idx],
                            [self.complex_ids[i] for i in idx], [self.model_ids[i] for i in idx],
                            [self.categories[i] for i in idx])

    def split_by_complex(self, held_out: list[str]) -> tuple["SampleArrays", "SampleArrays"]:
        held = set(held_out)
        test = [i for i, c in enumerate(self.complex_ids) if c in held]
        train = [i for i, c in enumerate(self.complex_ids) if c not in held]
        return self.subset(train), self.subset(test)


class DatasetContainer:
    def __init__(self, root, channels: int, image_size: int, records: list[ManifestRecord]):
        self.root = Path(root)
        self.channels = channels
        self.image_size = image_size
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def create(cls, root, channels: int = len(CHANNELS), image_size: int = 32) -> "DatasetContainer":
        root = Path(root)
        (root / "tensors").mkdir(parents=True, exist_ok=True)
        meta = {"version": CONTAINER_VERSION, "channels": channels, "image_size": image_size,
                "energy_terms": list(ENERGY_TERMS)}
        (root / "container.json").write_text(json.dumps(meta, indent=1) + "\n")
        (root / "manifest.jsonl").write_text("")
        return cls(root, channels, image_size, [])

    @classmethod
    def open(cls, root, verify: bool = True) -> "DatasetContainer":
        root = Path(root)
        try:
            meta = json.loads((root / "container.json").read_text())
            lines = (root / "manifest.jsonl").read_text().splitlines()
        except FileNotFoundError as e:
            raise ManifestError(f"not a dataset container: {e.filename} missing") from None
        if meta.get("version") != CONTAINER_VERSION:
            raise ManifestError(f"{root}: container version {meta.get('version')} != {CONTAINER_VERSION}")
        records = []
        seen: dict[tuple[str, str], int] = {}
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = ManifestRecord(**json.loads(line))
            except (json.JSONDecodeError, TypeError) as e:
                raise ManifestError(f"{root}/manifest.jsonl line {lineno}: {e}") from None
            key = (rec.complex_id, rec.model_id)
            if key in seen:
                raise ManifestError(
                    f"{root}/manifest.jsonl line {lineno}: duplicate (complex_id, model_id) {key}, "
                    f"first on line {seen[key]}")
            seen[key] = lineno
            if rec.capri_category not in CAPRI_CATEGORIES:
                raise ManifestError(f"line {lineno}: unknown CAPRI category {rec.capri_category!r}")
            if len(rec.energies) != len(ENERGY_TERMS):
                raise ManifestError(f"line {lineno}: expected {len(ENERGY_TERMS)} energies, got {len(rec.energies)}")
            if verify and not (root / rec.path).is_file():
                raise ManifestError(f"line {lineno}: tensor path does not resolve: {rec.path}")
            records.append(rec)
        return cls(root, meta["channels"], meta["image_size"], records)

    def write_sample(self, sample: InterfacePairSample) -> ManifestRecord:
        expect = (self.channels, self.image_size, self.image_size)
        if sample.image.shape != expect:
            raise FormatError(f"sample image shape {sample.image.shape} != container shape {expect}")
        key = (sample.complex_id, sample.model_id)
        if any((r.complex_id, r.model_id) == key for r in self.records):
            raise ManifestError(f"duplicate (complex_id, model_id) {key}")
        rel = f"tensors/{_safe(sample.complex_id)}__{_safe(sample.model_id)}.tns"
        write_tensor(self.root / rel, sample.image)
        rec = ManifestRecord(sample.complex_id, sample.model_id, int(sample.label),
                             sample.capri_category, rel,
                             [float(x) for x in np.asarray(sample.energies, dtype=np.float32)])
        with open(self.root / "manifest.jsonl", "a") as fh:
            fh.write(rec.to_json() + "\n")
        self.records.append(rec)
        return rec

    def read_sample(self, record: ManifestRecord | int) -> InterfacePairSample:
        if isinstance(record, int):
            record = self.records[record]
        img = read_tensor(self.root / record.path)
        expect = (self.channels, self.image_size, self.image_size)
        if img.shape != expect:
            raise FormatError(f"{record.path}: tensor shape {img.shape} != declared {expect}")
        return InterfacePairSample(img, np.asarray(record.energies, dtype=np.float32), record.label,
                                   record.complex_id, record.model_id, record.capri_category)

    def load_all(self) -> SampleArrays:
        if not self.records:
            raise ManifestError(f"{self.root}: container holds no samples")
        return SampleArrays.from_samples([self.read_sample(r) for r in self.records])


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-signal generator settings.

    Natives get the same smooth blob pattern in both channels of the
    ``signal_group`` pair and a shift of ``-energy_shift * strength`` on that
    group's energy terms; decoys get noise only. ``strength=0`` makes labels
    independent of the data.
    """

    complexes: int = 20
    decoys_per_complex: int = 20
    image_size: int = 32
    channels: int = len(CHANNELS)
    strength: float = 0.8
    noise: float = 1.0
    seed: int = 0
    signal_group: str = "hydropathy"
    blob_amplitude: float = 2.0
    blob_sigma: float = 3.0
    energy_shift: float = 5.0
    smoothing: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must lie in [0, 1], got {self.strength}")


def _noise_image(rng, channels, a, noise, smoothing):
    img = rng.normal(size=(channels, a, a))
    if smoothing > 0:
        img = gaussian_filter(img, sigma=(0, smoothing, smoothing), mode="wrap")
        img /= img.std(axis=(1, 2), keepdims=True)
    return noise * img


def _blob(rng, a, sigma):
    yy, xx = np.mgrid[0:a, 0:a]
    out = np.zeros((a, a))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.2 * a, 0.8 * a, size=2)
        out += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return out / out.max()


def synthesize(spec: SyntheticSpec, groups: BranchGroupSpec | None = None) -> list[InterfacePairSample]:
    """Deterministic list of samples for ``spec`` (one native per complex)."""
    groups = groups or BranchGroupSpec.default()
    rng = np.random.default_rng(spec.seed)
    sig_channels = list(groups.channels[spec.signal_group])
    sig_energies = list(groups.energies[spec.signal_group])
    a = spec.image_size
    samples = []
    width = len(str(spec.decoys_per_complex))
    for c in range(spec.complexes):
        cid = f"C{c:04d}"
        native_slot = int(rng.integers(0, spec.decoys_per_complex + 1))
        for m in range(spec.decoys_per_complex + 1):
            native = m == native_slot
            img = _noise_image(rng, spec.channels, a, spec.noise, spec.smoothing)
            energies = rng.normal(size=len(ENERGY_TERMS)) * spec.noise
            blob = _blob(rng, a, spec.blob_sigma)
            if native:
                for ch in sig_channels:
                    img[ch] += spec.strength * spec.blob_amplitude * blob
                energies[sig_energies] -= spec.strength * spec.energy_shift * spec.noise
            samples.append(InterfacePairSample(
                img.astype(np.float32), energies.astype(np.float32), int(native), cid,
                f"M{m:0{width}d}", "high" if native else "incorrect"))
    return samples


def generate_synthetic(spec: SyntheticSpec, root, groups: BranchGroupSpec | None = None) -> DatasetContainer:
    """Write a synthetic container at ``root`` (single writer)."""
    root = Path(root)
    if (root / "manifest.jsonl").exists() and (root / "manifest.jsonl").stat().st_size:
        raise ManifestError(f"{root} already holds a container")
    container = DatasetContainer.create(root, spec.channels, spec.image_size)
    for s in synthesize(spec, groups):
        container.write_sample(s)
    meta = json.loads((root / "container.json").read_text())
    meta["synthetic"] = asdict(spec)
    tmp = root / "container.json.tmp"
    tmp.write_text(json.dumps(meta, indent=1) + "\n")
    os.replace(tmp, root / "container.json")
    return container
