"""File formats and the synthetic dataset generator.

Matrix files are self-describing little-endian binaries::

    offset  size  field
    0       4     magic  b"GEKO"
    4       2     version (u16, currently 1)
    6       1     dtype code (u8: 1 = f32, 2 = f64)
    7       1     reserved, zero
    8       8     rows (u64)
    16      8     cols (u64)
    24      ...   row-major payload

Manifests and concept sets are JSON; checkpoints are ``.npz`` archives whose
``__meta__`` entry holds a JSON header with the format version and config.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .conceptprior import ConceptSet, PatchFeatureBag, cosine_prior
from .model import DualMIL, ModelConfig

MAGIC = b"GEKO"
MATRIX_VERSION = 1
HEADER = struct.Struct("<4sHBxQQ")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_CODES = {"f32": 1, "f64": 2}
MANIFEST_SCHEMA = "gecko-manifest/1"
CONCEPTS_SCHEMA = "gecko-concepts/1"
CHECKPOINT_VERSION = "gecko-checkpoint/1"
MAX_ENTRIES = 2**40


class MatrixFormatError(ValueError):
    code = "format"


class BadMagicError(MatrixFormatError):
    code = "bad_magic"


class TruncatedPayloadError(MatrixFormatError):
    code = "truncated"


class DimensionOverflowError(MatrixFormatError):
    code = "dim_overflow"


class UnsupportedVersionError(MatrixFormatError):
    code = "version"


class CheckpointError(ValueError):
    pass


# -- matrices ---------------------------------------------------------------------

def write_matrix(path, array, dtype: str = "f64") -> None:
    arr = np.asarray(array)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"matrix files hold 2-D arrays, got shape {arr.shape}")
    code = DTYPE_CODES[dtype]
    payload = np.ascontiguousarray(arr, dtype=DTYPES[code])
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, MATRIX_VERSION, code, arr.shape[0], arr.shape[1]))
        fh.write(payload.tobytes())


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, code, rows, cols = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != MATRIX_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    if code not in DTYPES:
        raise MatrixFormatError(f"{path}: unknown dtype code {code}")
    if rows * cols > MAX_ENTRIES:
        raise DimensionOverflowError(f"{path}: {rows} x {cols} exceeds the supported size")
    dtype = DTYPES[code]
    need = rows * cols * dtype.itemsize
    if len(raw) - HEADER.size < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - HEADER.size} bytes, expected {need}")
    if len(raw) - HEADER.size > need:
        raise MatrixFormatError(f"{path}: {len(raw) - HEADER.size - need} trailing bytes")
    return np.frombuffer(raw, dtype=dtype, count=rows * cols, offset=HEADER.size).reshape(rows, cols).copy()


def read_matrix_shape(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
    if len(head) < HEADER.size:
        raise TruncatedPayloadError(f"{path}: truncated header")
    magic, version, _code, rows, cols = HEADER.unpack(head)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    return rows, cols


# -- JSON helpers -------------------------------------------------------------------

def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


# -- concept sets -------------------------------------------------------------------

def save_concept_set(concepts: ConceptSet, directory, stem: str = "concepts") -> Path:
    directory = Path(directory)
    write_matrix(directory / f"{stem}.geko", concepts.embeddings)
    doc = {
        "schema": CONCEPTS_SCHEMA,
        "names": list(concepts.names),
        "class_names": list(concepts.class_names),
        "class_partition": {str(k): list(map(int, v)) for k, v in sorted(concepts.class_partition.items())},
        "embeddings_path": f"{stem}.geko",
    }
    path = directory / f"{stem}.json"
    dump_json(doc, path)
    return path


def load_concept_set(path) -> ConceptSet:
    path = Path(path)
    doc = load_json(path)
    T = read_matrix(path.parent / doc["embeddings_path"])
    return ConceptSet(doc["names"], T, {int(k): v for k, v in doc["class_partition"].items()}, doc.get("class_names", []))


# -- manifests ----------------------------------------------------------------------

@dataclass
class SlideRecord:
    slide_id: str
    features_path: str
    label: int | None = None
    aux_path: str | None = None
    split: str | None = None


@dataclass
class DatasetManifest:
    name: str
    class_names: list[str]
    slides: list[SlideRecord]
    concepts_path: str
    D: int
    C: int
    root: Path | None = None

    def to_dict(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "name": self.name,
            "class_names": self.class_names,
            "slides": [{k: v for k, v in asdict(s).items() if v is not None} for s in self.slides],
            "concepts_path": self.concepts_path,
            "D": self.D,
            "C": self.C,
        }

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel


def save_manifest(manifest: DatasetManifest, path) -> None:
    dump_json(manifest.to_dict(), path)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    doc = load_json(path)
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"{path}: unsupported manifest schema {doc.get('schema')!r}")
    slides = [SlideRecord(**s) for s in doc["slides"]]
    m = DatasetManifest(doc["name"], doc["class_names"], slides, doc["concepts_path"], int(doc["D"]), int(doc["C"]), path.parent)
    if check_files:
        for rec in slides:
            fpath = m.resolve(rec.features_path)
            if not fpath.exists():
                raise FileNotFoundError(f"slide {rec.slide_id}: missing {fpath}")
            _rows, cols = read_matrix_shape(fpath)
            if cols != m.D:
                raise ValueError(f"slide {rec.slide_id}: features have {cols} columns, manifest declares D={m.D}")
    return m


def load_bag(manifest: DatasetManifest, rec: SlideRecord) -> PatchFeatureBag:
    return PatchFeatureBag(rec.slide_id, read_matrix(manifest.resolve(rec.features_path)), rec.label)


# -- synthetic data -----------------------------------------------------------------

@dataclass
class SynthConfig:
    n_classes: int = 2
    n_slides_per_class: int = 100
    n_patches: int = 64
    dim: int = 32
    concepts_per_class: int = 10
    salient_fraction: float = 0.25
    signal: float = 2.0
    noise: float = 0.3
    concept_noise: float = 0.05
    max_cos: float = 0.3
    test_fraction: float = 0.3
    background_types: int = 0
    background_noise: float = 0.3
    aux_dim: int | None = None
    aux_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 0 < self.salient_fraction <= 1:
            raise ValueError("salient_fraction must lie in (0, 1]")
        if self.salient_fraction * self.n_patches < 1:
            raise ValueError("salient_fraction * n_patches must be >= 1")
        if self.signal <= 0:
            raise ValueError("signal must be > 0")
        if min(self.n_slides_per_class, self.n_patches, self.dim, self.concepts_per_class) < 1:
            raise ValueError("counts must be positive")

    @property
    def n_concepts(self) -> int:
        return self.n_classes * self.concepts_per_class


@dataclass
class SyntheticDataset:
    concepts: ConceptSet
    bags: list[PatchFeatureBag]
    splits: list[str]
    salient: dict[str, list[int]]
    aux: dict[str, np.ndarray] | None
    directions: np.ndarray


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def sample_concept_directions(rng: np.random.Generator, C: int, D: int, max_cos: float, max_tries: int = 100_000) -> np.ndarray:
    dirs: list[np.ndarray] = []
    tries = 0
    while len(dirs) < C:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could not place {C} directions with |cos| < {max_cos} in dimension {D}")
        v = _unit(rng.standard_normal(D))
        if all(abs(float(v @ u)) < max_cos for u in dirs):
            dirs.append(v)
    return np.array(dirs)


def generate_synthetic(cfg: SynthConfig) -> SyntheticDataset:
    """Slides whose salient patches are noisy mixtures of their class's concept directions.

    Non-salient patches are normalized isotropic noise, or, with
    ``background_types > 0``, jittered copies of a few prototypes shared by
    every slide (a stand-in for recurring non-diagnostic tissue).
    """
    rng = np.random.default_rng(cfg.seed)
    C, D, L = cfg.n_concepts, cfg.dim, cfg.n_classes
    directions = sample_concept_directions(rng, C, D, cfg.max_cos)
    T = _unit(directions + cfg.concept_noise * rng.standard_normal((C, D)) / math.sqrt(D))
    partition = {l: list(range(l * cfg.concepts_per_class, (l + 1) * cfg.concepts_per_class)) for l in range(L)}
    class_names = [f"class{l}" for l in range(L)]
    names = [f"class{l}_concept{j}" for l in range(L) for j in range(cfg.concepts_per_class)]
    concepts = ConceptSet(names, T, partition, class_names)

    n_salient = math.ceil(cfg.salient_fraction * cfg.n_patches)
    prototypes = _unit(rng.standard_normal((cfg.background_types, D))) if cfg.background_types else None
    aux_means = rng.standard_normal((L, cfg.aux_dim)) if cfg.aux_dim else None
    bags, splits, salient, aux = [], [], {}, {}
    for l in range(L):
        n_test = int(round(cfg.test_fraction * cfg.n_slides_per_class))
        for s in range(cfg.n_slides_per_class):
            sid = f"c{l}_s{s:04d}"
            if prototypes is None:
                F = _unit(rng.standard_normal((cfg.n_patches, D)))
            else:
                kinds = rng.integers(0, cfg.background_types, cfg.n_patches)
                jitter = rng.standard_normal((cfg.n_patches, D)) / math.sqrt(D)
                F = _unit(prototypes[kinds] + cfg.background_noise * jitter)
            idx = np.sort(rng.choice(cfg.n_patches, size=n_salient, replace=False))
            mix = rng.dirichlet(np.ones(cfg.concepts_per_class), size=n_salient) @ directions[partition[l]]
            noise = rng.standard_normal((n_salient, D)) / math.sqrt(D)
            F[idx] = _unit(cfg.signal * mix + cfg.noise * noise)
            bags.append(PatchFeatureBag(sid, F, l))
            splits.append("test" if s >= cfg.n_slides_per_class - n_test else "train")
            salient[sid] = idx.tolist()
            if aux_means is not None:
                aux[sid] = aux_means[l] + cfg.aux_noise * rng.standard_normal(cfg.aux_dim)
    return SyntheticDataset(concepts, bags, splits, salient, aux or None, directions)


def write_synthetic(ds: SyntheticDataset, directory, name: str = "synthetic", run_config: dict | None = None) -> DatasetManifest:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    if ds.aux:
        (directory / "aux").mkdir(exist_ok=True)
    save_concept_set(ds.concepts, directory)
    records = []
    for bag, split in zip(ds.bags, ds.splits):
        fpath = f"features/{bag.slide_id}.geko"
        write_matrix(directory / fpath, bag.features)
        apath = None
        if ds.aux:
            apath = f"aux/{bag.slide_id}.geko"
            write_matrix(directory / apath, ds.aux[bag.slide_id])
        records.append(SlideRecord(bag.slide_id, fpath, bag.label, apath, split))
    manifest = DatasetManifest(name, ds.concepts.class_names, records, "concepts.json",
                               ds.concepts.dim, ds.concepts.n_concepts, directory)
    doc = manifest.to_dict()
    if run_config is not None:
        doc["run_config"] = run_config
    dump_json(doc, directory / "manifest.json")
    truth = {
        "salient": ds.salient,
        "class_partition": {str(k): v for k, v in ds.concepts.class_partition.items()},
        "labels": {b.slide_id: b.label for b in ds.bags},
    }
    dump_json(truth, directory / "ground_truth.json")
    return manifest


def prior_path(root, slide_id: str) -> Path:
    return Path(root) / f"{slide_id}.geko"


def compute_priors(manifest: DatasetManifest, concepts: ConceptSet, out_dir) -> list[Path]:
    """Write one N x C prior matrix per manifest slide."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if concepts.dim != manifest.D:
        raise ValueError(f"concept dim {concepts.dim} != manifest D={manifest.D}")
    paths = []
    for rec in manifest.slides:
        bag = load_bag(manifest, rec)
        if bag.dim != concepts.dim:
            raise ValueError(f"slide {rec.slide_id}: feature dim {bag.dim} != concept dim {concepts.dim}")
        path = prior_path(out_dir, rec.slide_id)
        write_matrix(path, cosine_prior(bag.features, concepts.embeddings))
        paths.append(path)
    return paths


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(path, model: DualMIL, extra: dict | None = None) -> None:
    meta = {"version": CHECKPOINT_VERSION, "model_config": model.config.to_dict(), "extra": extra or {}}
    arrays = {name: p.data for name, p in model.named_parameters().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    # fixed member timestamps keep checkpoints byte-reproducible
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path, concepts: ConceptSet | None = None, in_dim: int | None = None) -> tuple[DualMIL, dict]:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(archive["__meta__"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
        config = ModelConfig.from_dict(meta["model_config"])
        if concepts is not None and concepts.n_concepts != config.n_concepts:
            raise CheckpointError(
                f"checkpoint expects C={config.n_concepts} concepts, concept set has {concepts.n_concepts}"
            )
        if in_dim is not None and in_dim != config.in_dim:
            raise CheckpointError(f"checkpoint expects D={config.in_dim}, data has D={in_dim}")
        model = DualMIL(config)
        for name, p in model.named_parameters().items():
            if name not in archive.files:
                raise CheckpointError(f"{path}: missing parameter {name}")
            stored = archive[name]
            if stored.shape != p.data.shape:
                raise CheckpointError(f"{path}: parameter {name} has shape {stored.shape}, expected {p.data.shape}")
            p.data = stored.astype(p.data.dtype, copy=True)
    return model, meta


def write_loss_trace(path, losses) -> None:
    lines = ["epoch,mean_loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(losses)]
    Path(path).write_text("\n".join(lines) + "\n")


def tree_digest(directory) -> str:
    """SHA-256 over every file's relative path and bytes, in sorted order."""
    h = hashlib.sha256()
    root = Path(directory)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
