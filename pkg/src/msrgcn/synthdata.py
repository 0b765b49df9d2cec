"""Synthetic multi-scale bags, their on-disk formats, and patient-grouped folds.

Labels 0..5 are split across scales. The 5x nodes carry the coarse code
``y // 2`` and the 20x nodes carry the fine code ``y % 2``; 10x nodes are pure
noise. Only a model that combines 5x and 20x evidence can recover all six
classes.

On disk a dataset is a directory with ``manifest.json`` and one feature file
per image::

    manifest.json   {"images": [{"id", "label", "patient_id", "grid_rows",
                                 "grid_cols", "feature_file"}, ...], ...}
    features/<id>.csv   image_id,scale,row,col,f0,...,f{d-1}

Feature CSVs are UTF-8 with LF line endings and shortest round-trip float
formatting, so a load reproduces the generated values exactly. A binary
alternative (``.bin``) stores float32 values after an 8-byte magic and a
length-prefixed JSON header.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .graphcore import SCALES, Scale

N_CLASSES = 6
CLASS_NAMES = ("BN", "GG1", "GG2", "GG3", "GG4", "GG5")
BIN_MAGIC = b"MSRGFEAT"


class DatasetError(ValueError):
    pass


def coarse_code(label: int) -> int:
    return label // 2


def fine_code(label: int) -> int:
    return label % 2


@dataclass(frozen=True)
class GenConfig:
    n_images: int = 600
    grid_min: int = 3
    grid_max: int = 5
    d: int = 32
    sigma: float = 0.1
    seed: int = 0
    distractor_frac: float = 0.3
    images_per_patient: int = 4
    feature_format: str = "csv"

    def __post_init__(self):
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if not 1 <= self.grid_min <= self.grid_max:
            raise ValueError("need 1 <= grid_min <= grid_max")
        if self.d < 10:
            raise ValueError("d must be >= 10")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.distractor_frac < 1.0:
            raise ValueError("distractor_frac must lie in [0, 1)")
        if self.images_per_patient < 1:
            raise ValueError("images_per_patient must be >= 1")
        if self.feature_format not in ("csv", "bin"):
            raise ValueError("feature_format must be 'csv' or 'bin'")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    label: int
    patient_id: str
    grid_rows: int
    grid_cols: int
    feature_file: str = ""

    @property
    def n_locations(self) -> int:
        return self.grid_rows * self.grid_cols

    def to_manifest(self) -> dict:
        return {
            "id": self.image_id,
            "label": self.label,
            "patient_id": self.patient_id,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "feature_file": self.feature_file,
        }


@dataclass
class Dataset:
    records: list[ImageRecord]
    features: dict[str, np.ndarray]  # id -> (3 * rows * cols, d), graph node order
    meta: dict = field(default_factory=dict)

    @property
    def ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def __post_init__(self):
        self._by_id = {r.image_id: r for r in self.records}

    def record(self, image_id: str) -> ImageRecord:
        return self._by_id[image_id]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records])


def random_basis(seed: int, d: int, which: int) -> np.ndarray:
    """Orthonormal ``d x d`` basis; column ``k`` is the direction of code ``k``."""
    g = rngmod.stream(seed, rngmod.BASIS, which)
    q, r = np.linalg.qr(g.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def generate_dataset(config: GenConfig) -> Dataset:
    """Build the dataset in memory (no files)."""
    b5 = random_basis(config.seed, config.d, 5)
    b20 = random_basis(config.seed, config.d, 20)
    records, features = [], {}
    for i in range(config.n_images):
        g = rngmod.stream(config.seed, rngmod.DATA, i)
        label = int(g.integers(0, N_CLASSES))
        rows = int(g.integers(config.grid_min, config.grid_max + 1))
        cols = int(g.integers(config.grid_min, config.grid_max + 1))
        n_loc = rows * cols
        n_nodes = 3 * n_loc
        n_distract = int(round(config.distractor_frac * n_nodes))
        distract = np.zeros(n_nodes, dtype=bool)
        distract[g.choice(n_nodes, size=n_distract, replace=False)] = True
        x = config.sigma * g.standard_normal((n_nodes, config.d))
        signal5 = ~distract[:n_loc]
        signal20 = ~distract[2 * n_loc :]
        x[:n_loc][signal5] += b5[:, coarse_code(label)]
        x[2 * n_loc :][signal20] += b20[:, fine_code(label)]
        image_id = f"img{i:05d}"
        ext = "csv" if config.feature_format == "csv" else "bin"
        records.append(
            ImageRecord(
                image_id,
                label,
                f"pat{i // config.images_per_patient:05d}",
                rows,
                cols,
                f"features/{image_id}.{ext}",
            )
        )
        features[image_id] = x
    return Dataset(records, features, {"gen_config": asdict(config)})


def node_keys(rows: int, cols: int):
    """``(scale, row, col)`` in graph node order."""
    return [(int(s), r, c) for s in SCALES for r in range(rows) for c in range(cols)]


def write_feature_csv(path: Path, record: ImageRecord, x: np.ndarray) -> None:
    d = x.shape[1]
    lines = [",".join(["image_id", "scale", "row", "col"] + [f"f{j}" for j in range(d)])]
    for (s, r, c), row in zip(node_keys(record.grid_rows, record.grid_cols), x.tolist()):
        lines.append(f"{record.image_id},{s},{r},{c}," + ",".join(map(repr, row)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_feature_bin(path: Path, record: ImageRecord, x: np.ndarray) -> None:
    header = json.dumps({"image_id": record.image_id, "rows": x.shape[0], "d": x.shape[1]}).encode()
    keys = np.array(node_keys(record.grid_rows, record.grid_cols), dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(keys.tobytes())
        fh.write(x.astype("<f4").tobytes())


def save_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    for rec in dataset.records:
        x = dataset.features[rec.image_id]
        path = out / rec.feature_file
        if path.suffix == ".bin":
            write_feature_bin(path, rec, x)
        else:
            write_feature_csv(path, rec, x)
    manifest = {"images": [r.to_manifest() for r in dataset.records], **dataset.meta}
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def generate(config: GenConfig, out_dir) -> Path:
    """Generate a dataset and write it under ``out_dir``; returns the manifest path."""
    return save_dataset(generate_dataset(config), out_dir)


def _read_csv_rows(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != ["image_id", "scale", "row", "col"]:
            raise DatasetError(f"{path}: missing or malformed header")
        d = len(header) - 4
        for n, row in enumerate(reader, start=2):
            if len(row) != d + 4:
                raise DatasetError(f"{path}:{n}: expected {d + 4} fields, got {len(row)}")
            yield row[0], int(row[1]), int(row[2]), int(row[3]), [float(v) for v in row[4:]]


def _read_bin_rows(path: Path):
    data = path.read_bytes()
    if data[:8] != BIN_MAGIC:
        raise DatasetError(f"{path}: bad magic")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12 : 12 + hlen])
    n, d = header["rows"], header["d"]
    off = 12 + hlen
    need = off + n * 3 * 4 + n * d * 4
    if len(data) != need:
        raise DatasetError(f"{path}: row-count mismatch, expected {need} bytes for {n} rows, got {len(data)}")
    keys = np.frombuffer(data, dtype="<i4", count=3 * n, offset=off).reshape(n, 3)
    vals = np.frombuffer(data, dtype="<f4", count=n * d, offset=off + 12 * n).reshape(n, d)
    for (s, r, c), v in zip(keys.tolist(), vals.astype(np.float64)):
        yield header["image_id"], s, r, c, v


def load_features(path: Path, record: ImageRecord) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"feature file not found: {path}")
    reader = _read_bin_rows(path) if path.suffix == ".bin" else _read_csv_rows(path)
    n_loc = record.n_locations
    expected = 3 * n_loc
    rows: dict[int, list[float]] = {}
    d = None
    valid_scales = {int(s) for s in SCALES}
    for image_id, s, r, c, vals in reader:
        if image_id != record.image_id:
            raise DatasetError(f"{path}: row for image {image_id!r}, expected {record.image_id!r}")
        if s not in valid_scales:
            raise DatasetError(f"{path}: unknown scale {s}")
        if not (0 <= r < record.grid_rows and 0 <= c < record.grid_cols):
            raise DatasetError(f"{path}: position ({r},{c}) outside {record.grid_rows}x{record.grid_cols} grid")
        if d is None:
            d = len(vals)
        elif len(vals) != d:
            raise DatasetError(f"{path}: dimension mismatch, {len(vals)} vs {d}")
        idx = SCALES.index(Scale(s)) * n_loc + r * record.grid_cols + c
        if idx in rows:
            raise DatasetError(f"{path}: duplicate node ({s},{r},{c})")
        rows[idx] = vals
    if len(rows) != expected:
        raise DatasetError(f"{path}: row-count mismatch, expected {expected} nodes, found {len(rows)}")
    x = np.array([rows[i] for i in range(expected)], dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DatasetError(f"{path}: non-finite feature values")
    return x


def load_dataset(path) -> Dataset:
    """Load a dataset from a manifest file or the directory containing it."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    root = manifest_path.parent
    records, features = [], {}
    dims = set()
    for entry in manifest["images"]:
        missing = {"id", "label", "patient_id", "grid_rows", "grid_cols", "feature_file"} - set(entry)
        if missing:
            raise DatasetError(f"manifest entry missing keys {sorted(missing)}")
        rec = ImageRecord(
            entry["id"],
            int(entry["label"]),
            str(entry["patient_id"]),
            int(entry["grid_rows"]),
            int(entry["grid_cols"]),
            entry["feature_file"],
        )
        if not 0 <= rec.label < N_CLASSES:
            raise DatasetError(f"image {rec.image_id}: label {rec.label} outside 0..{N_CLASSES - 1}")
        if rec.grid_rows < 1 or rec.grid_cols < 1:
            raise DatasetError(f"image {rec.image_id}: empty grid")
        x = load_features(root / rec.feature_file, rec)
        dims.add(x.shape[1])
        records.append(rec)
        features[rec.image_id] = x
    if len(dims) > 1:
        raise DatasetError(f"feature dimension differs between images: {sorted(dims)}")
    meta = {k: v for k, v in manifest.items() if k != "images"}
    return Dataset(records, features, meta)


@dataclass
class Fold:
    train: list[str]
    validation: list[str]
    test: list[str]


@dataclass
class FoldSpec:
    k: int
    seed: int
    folds: list[Fold]

    def to_json(self) -> str:
        return json.dumps(
            {"k": self.k, "seed": self.seed, "folds": [asdict(f) for f in self.folds]},
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> FoldSpec:
        data = json.loads(text)
        return cls(data["k"], data["seed"], [Fold(**f) for f in data["folds"]])


def group_kfold(records, k: int = 5, seed: int = 0, val_frac: float = 0.2) -> FoldSpec:
    """Patient-grouped folds; each fold's non-test patients split train/validation."""
    records = list(records.records if isinstance(records, Dataset) else records)
    patients = sorted({r.patient_id for r in records})
    if len(patients) < k:
        raise ValueError(f"need at least {k} patients for {k} folds, found {len(patients)}")
    order = [patients[i] for i in rngmod.stream(seed, rngmod.FOLDS).permutation(len(patients))]
    groups = np.array_split(np.arange(len(order)), k)
    folds = []
    for gi in range(k):
        test_p = {order[i] for i in groups[gi]}
        rest = [p for p in order if p not in test_p]
        n_val = max(1, int(round(val_frac * len(rest)))) if len(rest) >= 2 else 0
        val_p = set(rest[len(rest) - n_val :])
        train_p = set(rest[: len(rest) - n_val])
        folds.append(
            Fold(
                [r.image_id for r in records if r.patient_id in train_p],
                [r.image_id for r in records if r.patient_id in val_p],
                [r.image_id for r in records if r.patient_id in test_p],
            )
        )
    return FoldSpec(k, seed, folds)
