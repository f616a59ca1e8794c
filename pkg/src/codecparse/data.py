"""Dataset ingestion and synthesis.

A dataset is a manifest (one JSON object per line, exactly the
EmbeddingRecord fields) plus embedding storage, either inline per record or
as an `embedding_ref` {file, row} into a binary matrix file:

    magic "HEMB" | u32 version=1 | u32 dim | u64 count | count*dim f32 LE

A CSV fallback (header ``id,dim,...values``) is accepted for small fixtures.

Labels are z-scored per task with statistics fitted on the training split
only; metrics are always reported after inversion to native units (SR in
kHz, BPS in kbps, Q as a plain count for readability).

The synthetic generator stands in for real codec-parameter corpora at desk
scale. It is hierarchical: a codec family fixes a base (SR, BPS, Q) triple
on a plausible grid, each sample perturbs one parameter by one grid step,
and the embedding mixes a fixed random family signature, sinusoidal
encodings of the log-labels, and Gaussian noise through a fixed random
projection. Two extra families are held out of training entirely and appear
only as open-set test records.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, UsageError

SPLITS = ("train", "val", "test")
SET_TYPES = ("closed", "open")
TASKS = ("sr", "bps", "q")

# native unit -> reporting unit divisors (Hz->kHz, bps->kbps, count->count)
REPORT_DIVISORS = np.asarray([1000.0, 1000.0, 1.0])
REPORT_UNITS = ("kHz", "kbps", "count")

EMBED_MAGIC = b"HEMB"
EMBED_VERSION = 1

SR_GRID = (8000.0, 16000.0, 24000.0, 44100.0)
BPS_GRID = (1500.0, 3000.0, 6000.0, 12000.0, 24000.0)
Q_GRID = (2, 4, 8, 16, 32)

_FAMILY_BLOCK = 16
_NOISE_BLOCK = 16
_ENC_FREQS = 8  # sin+cos pairs per label
_PRE_DIM = _FAMILY_BLOCK + 3 * 2 * _ENC_FREQS + _NOISE_BLOCK
MIN_SYNTH_DIM = 32


@dataclass
class EmbeddingRecord:
    id: str
    embedding: np.ndarray  # (d,) float32
    sr_hz: float
    bps: float
    q: int
    codec_name: str
    split: str
    set_type: str

    def labels(self) -> np.ndarray:
        return np.asarray([self.sr_hz, self.bps, float(self.q)])


class Dataset:
    """Ordered record collection with split/partition views."""

    def __init__(self, records: list[EmbeddingRecord]):
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    @property
    def dim(self) -> int:
        if not self.records:
            return 0
        return int(self.records[0].embedding.shape[0])

    def subset(self, split: str | None = None, set_type: str | None = None) -> "Dataset":
        recs = [r for r in self.records
                if (split is None or r.split == split)
                and (set_type is None or r.set_type == set_type)]
        return Dataset(recs)

    def embeddings_matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 0))
        return np.stack([r.embedding for r in self.records]).astype(np.float64)

    def labels_matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 3))
        return np.stack([r.labels() for r in self.records])

    def counts(self) -> dict:
        out = {s: 0 for s in SPLITS}
        out.update({f"test_{t}": 0 for t in SET_TYPES})
        for r in self.records:
            out[r.split] += 1
            if r.split == "test":
                out[f"test_{r.set_type}"] += 1
        return out


# ------------------------------------------------------------- label scaling


@dataclass
class LabelScaler:
    """Per-task z-scoring, fitted on the training split only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, train: Dataset) -> "LabelScaler":
        if len(train) < 2:
            raise UsageError(f"need at least 2 training records to fit a scaler, got {len(train)}")
        labels = train.labels_matrix()
        mean = labels.mean(axis=0)
        std = labels.std(axis=0, ddof=1)
        for t, task in enumerate(TASKS):
            if std[t] <= 0.0:
                raise ConfigError(
                    f"task '{task}' has zero label variance in the training split; "
                    "normalization is undefined")
        return cls(mean=mean, std=std)

    def normalize(self, labels: np.ndarray) -> np.ndarray:
        return (labels - self.mean) / self.std

    def denormalize(self, normalized: np.ndarray) -> np.ndarray:
        return normalized * self.std + self.mean


# --------------------------------------------------------------- embeddings


def write_embedding_matrix(path, matrix: np.ndarray) -> None:
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "wb") as f:
        f.write(EMBED_MAGIC)
        f.write(struct.pack("<I", EMBED_VERSION))
        f.write(struct.pack("<I", mat.shape[1]))
        f.write(struct.pack("<Q", mat.shape[0]))
        f.write(mat.tobytes())


def read_embedding_matrix(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4)
        if head == EMBED_MAGIC:
            (version,) = struct.unpack("<I", f.read(4))
            if version != EMBED_VERSION:
                raise DataError(f"{path}: unsupported embedding file version {version}")
            (dim,) = struct.unpack("<I", f.read(4))
            (count,) = struct.unpack("<Q", f.read(8))
            data = np.frombuffer(f.read(), dtype="<f4")
            if data.size != count * dim:
                raise DataError(f"{path}: expected {count * dim} floats, found {data.size}")
            return data.reshape(count, dim).astype(np.float32)
    # plain-text CSV fallback: header id,dim,...values
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline()
        if not header.startswith("id,dim"):
            raise DataError(f"{path}: neither an HEMB file nor a CSV with 'id,dim' header")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                dim = int(parts[1])
                values = [float(v) for v in parts[2 : 2 + dim]]
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed CSV row ({exc})") from exc
            if len(values) != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} values, found {len(values)}")
            rows.append(np.asarray(values, dtype=np.float32))
    if rows and any(r.shape != rows[0].shape for r in rows):
        raise DataError(f"{path}: inconsistent embedding dimensions in CSV")
    return np.stack(rows) if rows else np.zeros((0, 0), dtype=np.float32)


# ----------------------------------------------------------------- manifest

_REQUIRED_FIELDS = ("id", "sr_hz", "bps", "q", "codec_name", "split", "set_type")


def load_manifest(path) -> Dataset:
    """Parse and validate a manifest; raises DataError with the offending
    line number / record id on any violation."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records: list[EmbeddingRecord] = []
    matrices: dict[str, np.ndarray] = {}
    seen_ids: dict[str, int] = {}
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            for key in _REQUIRED_FIELDS:
                if key not in obj:
                    raise DataError(f"{path}:{lineno}: missing field '{key}'")
            rid = str(obj["id"])
            if rid in seen_ids:
                raise DataError(
                    f"{path}:{lineno}: duplicate id '{rid}' (first seen on line {seen_ids[rid]}); "
                    "ids must be unique across splits")
            seen_ids[rid] = lineno
            split = obj["split"]
            set_type = obj["set_type"]
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: record '{rid}' has unknown split '{split}'")
            if set_type not in SET_TYPES:
                raise DataError(f"{path}:{lineno}: record '{rid}' has unknown set_type '{set_type}'")
            if set_type == "open" and split != "test":
                raise DataError(
                    f"{path}:{lineno}: record '{rid}' is open-set but in split '{split}'; "
                    "open-set codecs may only appear at evaluation")
            sr_hz, bps = float(obj["sr_hz"]), float(obj["bps"])
            q = obj["q"]
            if not (isinstance(q, int) and not isinstance(q, bool)) or q < 1:
                raise DataError(f"{path}:{lineno}: record '{rid}' has invalid quantizer count {q!r}")
            if sr_hz <= 0 or bps <= 0:
                raise DataError(f"{path}:{lineno}: record '{rid}' has non-positive labels")

            if "embedding" in obj:
                emb = np.asarray(obj["embedding"], dtype=np.float32)
                if emb.ndim != 1:
                    raise DataError(f"{path}:{lineno}: record '{rid}' embedding must be a flat list")
            elif "embedding_ref" in obj:
                ref = obj["embedding_ref"]
                try:
                    fname, row = ref["file"], int(ref["row"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise DataError(
                        f"{path}:{lineno}: record '{rid}' embedding_ref needs file and row ({exc})"
                    ) from exc
                if fname not in matrices:
                    matrices[fname] = read_embedding_matrix(path.parent / fname)
                mat = matrices[fname]
                if not (0 <= row < mat.shape[0]):
                    raise DataError(
                        f"{path}:{lineno}: record '{rid}' references row {row} of {fname} "
                        f"which has {mat.shape[0]} rows")
                emb = mat[row]
            else:
                raise DataError(f"{path}:{lineno}: record '{rid}' has neither embedding nor embedding_ref")

            if dim is None:
                dim = int(emb.shape[0])
            elif emb.shape[0] != dim:
                raise DataError(
                    f"{path}:{lineno}: record '{rid}' has dimension {emb.shape[0]}, "
                    f"dataset uses {dim}")
            records.append(EmbeddingRecord(
                id=rid, embedding=emb, sr_hz=sr_hz, bps=bps, q=int(q),
                codec_name=str(obj["codec_name"]), split=split, set_type=set_type))
    return Dataset(records)


def write_dataset(dataset: Dataset, out_dir, *, manifest_name: str = "manifest.jsonl",
                  embeddings_name: str = "embeddings.hemb") -> tuple[Path, Path]:
    """Write manifest + embedding matrix; records keep their order and
    reference matrix rows by index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emb_path = out_dir / embeddings_name
    man_path = out_dir / manifest_name
    if dataset.records:
        matrix = np.stack([r.embedding for r in dataset.records])
    else:
        matrix = np.zeros((0, 0), dtype=np.float32)
    write_embedding_matrix(emb_path, matrix)
    with open(man_path, "w", encoding="utf-8") as f:
        for i, r in enumerate(dataset.records):
            obj = {
                "id": r.id,
                "sr_hz": r.sr_hz,
                "bps": r.bps,
                "q": r.q,
                "codec_name": r.codec_name,
                "split": r.split,
                "set_type": r.set_type,
                "embedding_ref": {"file": embeddings_name, "row": i},
            }
            f.write(json.dumps(obj, separators=(",", ":")) + "\n")
    return man_path, emb_path


# ---------------------------------------------------------------- synthesis


@dataclass
class SynthConfig:
    n_train: int = 8000
    n_val: int = 1000
    n_test: int = 2000
    dim: int = 128
    family_count: int = 8
    noise_sigma: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.dim < MIN_SYNTH_DIM:
            raise ConfigError(
                f"embedding dim must be >= {MIN_SYNTH_DIM} to hold the label encodings, "
                f"got {self.dim}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("every split needs at least one sample")
        if self.family_count < 2:
            raise ConfigError("need at least two codec families")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")

    def as_dict(self) -> dict:
        return {
            "n_train": self.n_train, "n_val": self.n_val, "n_test": self.n_test,
            "dim": self.dim, "family_count": self.family_count,
            "noise_sigma": self.noise_sigma, "seed": self.seed,
        }


def _grid_triple(flat_index: int) -> tuple[int, int, int]:
    i_sr, rest = divmod(flat_index, len(BPS_GRID) * len(Q_GRID))
    i_bps, i_q = divmod(rest, len(Q_GRID))
    return i_sr, i_bps, i_q


def _neighbors(idx: tuple[int, int, int]):
    grids = (SR_GRID, BPS_GRID, Q_GRID)
    for p in range(3):
        for step in (-1, 1):
            moved = list(idx)
            moved[p] += step
            if 0 <= moved[p] < len(grids[p]):
                yield tuple(moved)


def _encode_log(value: float) -> np.ndarray:
    x = np.log(value)
    freqs = 0.5 * (2.0 ** np.arange(_ENC_FREQS))
    return np.concatenate([np.sin(freqs * x), np.cos(freqs * x)])


@dataclass(frozen=True)
class SynthFamily:
    name: str
    sr_hz: float
    bps: float
    q: int
    held_out: bool


def _family_layout(cfg: SynthConfig):
    """Base-triple indices and signature directions, derived from the family
    stream alone so the table can be recomputed without generating data."""
    rng_family = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(4)[0])
    n_combo = len(SR_GRID) * len(BPS_GRID) * len(Q_GRID)
    known_flat = rng_family.choice(n_combo, size=cfg.family_count, replace=False)
    known = [_grid_triple(int(i)) for i in known_flat]
    # held-out families may not sit on any training label (base or one-step
    # variant of a known family), so open-set base triples are truly unseen
    forbidden = set(known)
    for base in known:
        forbidden.update(_neighbors(base))
    allowed = [i for i in range(n_combo) if _grid_triple(i) not in forbidden]
    if len(allowed) < 2:
        raise ConfigError(
            f"family_count={cfg.family_count} leaves no room for held-out open-set families")
    held_flat = rng_family.choice(len(allowed), size=2, replace=False)
    bases = known + [_grid_triple(allowed[int(i)]) for i in held_flat]
    directions = rng_family.standard_normal((cfg.family_count + 2, _FAMILY_BLOCK))
    return bases, directions


def synth_families(cfg: SynthConfig) -> list[SynthFamily]:
    """The deterministic family table behind gen_synth, for provenance."""
    cfg.validate()
    bases, _ = _family_layout(cfg)
    out = []
    for fam, (i_sr, i_bps, i_q) in enumerate(bases):
        out.append(SynthFamily(
            name=f"nacfam{fam:02d}", sr_hz=SR_GRID[i_sr], bps=BPS_GRID[i_bps],
            q=Q_GRID[i_q], held_out=fam >= cfg.family_count))
    return out


def gen_synth(cfg: SynthConfig) -> Dataset:
    """Deterministic hierarchical dataset; identical config gives a byte-
    identical dataset."""
    cfg.validate()
    ss = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_proj = np.random.default_rng(ss[1])
    rng_assign = np.random.default_rng(ss[2])
    rng_noise = np.random.default_rng(ss[3])

    bases, directions = _family_layout(cfg)
    projection = rng_proj.standard_normal((_PRE_DIM, cfg.dim)) / np.sqrt(_PRE_DIM)

    grids = (SR_GRID, BPS_GRID, Q_GRID)

    def make_record(rid: str, split: str, set_type: str) -> EmbeddingRecord:
        if set_type == "open":
            fam = cfg.family_count + int(rng_assign.integers(0, 2))
        else:
            fam = int(rng_assign.integers(0, cfg.family_count))
        idx = list(bases[fam])
        p = int(rng_assign.integers(0, 3))
        step = 1 if rng_assign.integers(0, 2) else -1
        if not (0 <= idx[p] + step < len(grids[p])):
            step = -step
        idx[p] += step
        sr = grids[0][idx[0]]
        bps = grids[1][idx[1]]
        q = grids[2][idx[2]]
        pre = np.concatenate([
            directions[fam],
            _encode_log(sr),
            _encode_log(bps),
            _encode_log(float(q)),
            rng_noise.standard_normal(_NOISE_BLOCK) * cfg.noise_sigma,
        ])
        emb = (pre @ projection).astype(np.float32)
        return EmbeddingRecord(
            id=rid, embedding=emb, sr_hz=float(sr), bps=float(bps), q=int(q),
            codec_name=f"nacfam{fam:02d}", split=split, set_type=set_type)

    records = []
    for i in range(cfg.n_train):
        records.append(make_record(f"train-{i:06d}", "train", "closed"))
    for i in range(cfg.n_val):
        records.append(make_record(f"val-{i:06d}", "val", "closed"))
    n_closed = cfg.n_test // 2
    for i in range(cfg.n_test):
        set_type = "closed" if i < n_closed else "open"
        records.append(make_record(f"test-{i:06d}", "test", set_type))
    return Dataset(records)
