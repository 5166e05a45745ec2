"""Descriptor and ground-truth I/O plus a synthetic sequence generator.

Descriptor files come in two flavours:

* binary: ``LDSC1\\n`` magic, three little-endian u64 (n_features, dim,
  n_images), ``n_features*dim`` float32 row-major, then ``n_features`` u32
  image indices.
* csv: a ``dim=D images=M`` header line, then one line per feature holding the
  image index followed by ``D`` floats.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binio import FormatError, expect_eof, read_array, read_magic, read_u64, write_array, write_magic, write_u64

__all__ = [
    "DescriptorSet",
    "FormatError",
    "GroundTruthMatrix",
    "SynthConfig",
    "load_descriptors",
    "load_ground_truth",
    "save_descriptors",
    "save_ground_truth",
    "synth_sequence",
]

DESCRIPTOR_MAGIC = b"LDSC1\n"


@dataclass(frozen=True)
class DescriptorSet:
    """Row-major descriptor matrix with the image index of every row."""

    data: np.ndarray
    image_of: np.ndarray
    n_images: int

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        image_of = np.asarray(self.image_of, dtype=np.int64)
        if data.ndim != 2 or data.shape[1] == 0:
            raise ValueError(f"descriptor matrix must be 2-D with dim > 0, got shape {data.shape}")
        if image_of.shape != (data.shape[0],):
            raise ValueError("image_of must have one entry per descriptor row")
        bad = np.flatnonzero(~np.isfinite(data).all(axis=1))
        if bad.size:
            raise ValueError(f"row {bad[0]}: non-finite value")
        if image_of.size:
            if image_of.min() < 0 or image_of.max() >= self.n_images:
                raise ValueError(f"image indices must lie in [0, {self.n_images})")
            if np.any(np.diff(image_of) < 0):
                row = int(np.flatnonzero(np.diff(image_of) < 0)[0]) + 1
                raise ValueError(f"row {row}: image indices must be non-decreasing")
        data.setflags(write=False)
        image_of.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "image_of", image_of)

    @property
    def n_features(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def image_slices(self) -> list[slice]:
        """Row range of every image (empty slices for images without features)."""
        bounds = np.searchsorted(self.image_of, np.arange(self.n_images + 1))
        return [slice(int(bounds[i]), int(bounds[i + 1])) for i in range(self.n_images)]

    def with_data(self, data: np.ndarray) -> "DescriptorSet":
        return DescriptorSet(data=data, image_of=self.image_of, n_images=self.n_images)


@dataclass(frozen=True)
class GroundTruthMatrix:
    entries: np.ndarray

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries)
        if entries.ndim != 2:
            raise ValueError("ground truth must be a 2-D matrix")
        bad = np.argwhere((entries != 0) & (entries != 1))
        if bad.size:
            i, j = bad[0]
            raise ValueError(f"cell ({i}, {j}): entry {entries[i, j]} is not 0/1")
        entries = entries.astype(np.uint8)
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


def _detect_format(path: Path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(len(DESCRIPTOR_MAGIC))
    return "binary" if head == DESCRIPTOR_MAGIC else "csv"


def load_descriptors(path: str | Path, format: str | None = None) -> DescriptorSet:
    """Read a descriptor file; ``format`` is ``"binary"``, ``"csv"`` or None to sniff."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such descriptor file")
    if path.stat().st_size == 0:
        raise FormatError(f"{path}: empty file")
    fmt = format or _detect_format(path)
    if fmt == "binary":
        return _load_binary(path)
    if fmt == "csv":
        return _load_csv(path)
    raise ValueError(f"unknown descriptor format {fmt!r}")


def _load_binary(path: Path) -> DescriptorSet:
    with open(path, "rb") as fh:
        read_magic(fh, DESCRIPTOR_MAGIC, path)
        n, dim, n_images = read_u64(fh, 3, path)
        if dim == 0:
            raise FormatError(f"{path}: header declares dim=0")
        data = read_array(fh, "f4", (n, dim), path)
        image_of = read_array(fh, "u4", (n,), path)
        expect_eof(fh, path)
    bad = np.flatnonzero(~np.isfinite(data).all(axis=1))
    if bad.size:
        raise FormatError(f"{path}: row {bad[0]}: non-finite value")
    try:
        return DescriptorSet(data=data, image_of=image_of.astype(np.int64), n_images=int(n_images))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _parse_header(line: str, path: Path) -> tuple[int, int]:
    fields = dict(tok.split("=", 1) for tok in line.split() if "=" in tok)
    try:
        dim, images = int(fields["dim"]), int(fields["images"])
    except (KeyError, ValueError):
        raise FormatError(f"{path}: malformed header {line.strip()!r}, expected 'dim=D images=M'") from None
    if dim <= 0 or images < 0:
        raise FormatError(f"{path}: malformed header {line.strip()!r}")
    return dim, images


def _load_csv(path: Path) -> DescriptorSet:
    with open(path, encoding="ascii") as fh:
        header = fh.readline()
        if not header.strip():
            raise FormatError(f"{path}: empty file")
        dim, n_images = _parse_header(header, path)
        rows: list[list[float]] = []
        images: list[int] = []
        for row, line in enumerate(fh):
            if not line.strip():
                continue
            parts = [p for p in line.replace(",", " ").split()]
            if len(parts) - 1 != dim:
                raise FormatError(f"row {row}: expected {dim} values, got {len(parts) - 1}")
            try:
                images.append(int(parts[0]))
                values = [float(p) for p in parts[1:]]
            except ValueError:
                raise FormatError(f"row {row}: unparseable value") from None
            if not all(np.isfinite(values)):
                raise FormatError(f"row {row}: non-finite value")
            rows.append(values)
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
    try:
        return DescriptorSet(data=data, image_of=np.asarray(images, dtype=np.int64), n_images=n_images)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_descriptors(ds: DescriptorSet, path: str | Path, format: str = "binary") -> None:
    path = Path(path)
    if format == "binary":
        with open(path, "wb") as fh:
            write_magic(fh, DESCRIPTOR_MAGIC)
            write_u64(fh, ds.n_features, ds.dim, ds.n_images)
            write_array(fh, ds.data, "f4")
            write_array(fh, ds.image_of, "u4")
    elif format == "csv":
        with open(path, "w", encoding="ascii") as fh:
            fh.write(f"dim={ds.dim} images={ds.n_images}\n")
            for img, row in zip(ds.image_of, np.asarray(ds.data, dtype=np.float64)):
                fh.write(f"{int(img)}," + ",".join(repr(float(v)) for v in row) + "\n")
    else:
        raise ValueError(f"unknown descriptor format {format!r}")


def load_ground_truth(path: str | Path) -> GroundTruthMatrix:
    path = Path(path)
    rows: list[list[int]] = []
    with open(path, encoding="ascii") as fh:
        for i, line in enumerate(ln for ln in fh if ln.strip()):
            row = []
            for j, tok in enumerate(line.split()):
                if tok not in ("0", "1"):
                    raise FormatError(f"{path}: cell ({i}, {j}): entry {tok!r} is not 0/1")
                row.append(int(tok))
            if rows and len(row) != len(rows[0]):
                raise FormatError(f"{path}: row {i}: ragged row with {len(row)} entries, expected {len(rows[0])}")
            rows.append(row)
    if not rows:
        return GroundTruthMatrix(np.zeros((0, 0), dtype=np.uint8))
    return GroundTruthMatrix(np.asarray(rows, dtype=np.uint8))


def save_ground_truth(gt: GroundTruthMatrix, path: str | Path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for row in gt.entries:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic sequence with planted revisits.

    Every image that is not a revisit opens a fresh place, so ``n_places`` must
    equal ``n_images - len(loop_spec)`` (pass None to derive it). Each place owns
    ``features_per_image`` prototype descriptors; with ``n_landmarks`` set, the
    prototypes are drawn without replacement from a shared pool of that many
    landmark vectors, otherwise every place gets fresh ones.
    """

    n_images: int
    features_per_image: int
    dim: int
    n_places: int | None = None
    loop_spec: Sequence[tuple[int, int]] = field(default_factory=tuple)
    noise_sigma: float = 0.05
    rng_seed: int = 0
    n_landmarks: int | None = None
    prototype_scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "loop_spec", tuple((int(r), int(o)) for r, o in self.loop_spec))
        if self.n_images <= 0 or self.features_per_image <= 0 or self.dim <= 0:
            raise ValueError("n_images, features_per_image and dim must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        revisits = [r for r, _ in self.loop_spec]
        if len(set(revisits)) != len(revisits):
            raise ValueError("each revisit image may appear only once in loop_spec")
        for r, o in self.loop_spec:
            if not (0 <= o < r < self.n_images):
                raise ValueError(f"loop ({r}, {o}): need 0 <= original < revisit < n_images")
            if o in revisits:
                raise ValueError(f"loop ({r}, {o}): original image is itself a revisit")
        expected = self.n_images - len(self.loop_spec)
        if self.n_places is None:
            object.__setattr__(self, "n_places", expected)
        elif self.n_places != expected:
            raise ValueError(f"n_places={self.n_places} but the sequence visits {expected} distinct places")
        if self.n_landmarks is not None and self.n_landmarks < self.features_per_image:
            raise ValueError("n_landmarks must be at least features_per_image")


def synth_sequence(cfg: SynthConfig) -> tuple[DescriptorSet, GroundTruthMatrix]:
    rng = np.random.default_rng(cfg.rng_seed)
    original_of = dict(cfg.loop_spec)

    place_of_image = np.empty(cfg.n_images, dtype=np.int64)
    next_place = 0
    for i in range(cfg.n_images):
        if i in original_of:
            place_of_image[i] = place_of_image[original_of[i]]
        else:
            place_of_image[i] = next_place
            next_place += 1

    f = cfg.features_per_image
    if cfg.n_landmarks is None:
        prototypes = rng.normal(scale=cfg.prototype_scale, size=(cfg.n_places, f, cfg.dim))
    else:
        pool = rng.normal(scale=cfg.prototype_scale, size=(cfg.n_landmarks, cfg.dim))
        picks = np.stack([rng.choice(cfg.n_landmarks, size=f, replace=False) for _ in range(cfg.n_places)])
        prototypes = pool[np.sort(picks, axis=1)]

    noise = rng.normal(scale=1.0, size=(cfg.n_images, f, cfg.dim))
    data = prototypes[place_of_image] + cfg.noise_sigma * noise
    ds = DescriptorSet(
        data=data.reshape(cfg.n_images * f, cfg.dim),
        image_of=np.repeat(np.arange(cfg.n_images), f),
        n_images=cfg.n_images,
    )
    gt = np.eye(cfg.n_images, dtype=np.uint8)
    for r, o in cfg.loop_spec:
        gt[r, o] = 1
    return ds, GroundTruthMatrix(gt)
