"""The three downstream regressors sharing one convolutional trunk.

    euclidean          trunk -> three dense heads on the flattened features
    hyperbolic_single  trunk -> one linear map -> ball (one learned
                       curvature) -> tangent -> three heads
    hydra              trunk -> K=3 linear maps -> K balls with separate
                       learned curvatures -> per-task attention-weighted
                       Möbius aggregation -> task tangent -> task head

Trunk: conv1d(1->64, k3, same) / relu / maxpool2 / conv1d(64->128, k3, same)
/ relu / maxpool2 / flatten / dropout. Heads: dense 120 / relu / dropout /
dense 30 / relu / dense 1. The hydra aggregation left-folds Möbius addition
in ascending subspace order; attention weights are a row-softmaxed learnable
K x K logit matrix, so each task's weights lie on the simplex by
construction. Aggregation happens in the task's own curvature: every other
subspace point is transported (log at its curvature, exp at the task's)
before weighting.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import geometry, tape
from .errors import ConfigError, DataError
from .geometry import MIN_CURVATURE
from .tape import Tensor

TASKS = ("sr", "bps", "q")
NUM_TASKS = 3
CONV_CHANNELS = (64, 128)
KERNEL_SIZE = 3
HEAD_HIDDEN = (120, 30)
MODEL_KINDS = ("euclidean", "hyperbolic_single", "hydra")

CHECKPOINT_MAGIC = b"HYDC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_dim: int
    kind: str = "hydra"
    hidden_dim: int = 128
    dropout: float = 0.3
    init_curvature: float = 1.0

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind '{self.kind}' (choose from {MODEL_KINDS})")
        if self.input_dim < 4 or self.input_dim % 4 != 0:
            raise ConfigError(
                f"input dim must be a positive multiple of 4 (two pooling stages), got {self.input_dim}")
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden dim must be >= 1, got {self.hidden_dim}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.init_curvature <= MIN_CURVATURE:
            raise ConfigError(f"initial curvature must exceed {MIN_CURVATURE}")


def flatten_length(input_dim: int) -> int:
    return (input_dim // 4) * CONV_CHANNELS[1]


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _head_params(rng: np.random.Generator, in_dim: int) -> dict[str, np.ndarray]:
    h1, h2 = HEAD_HIDDEN
    return {
        "w1": _he(rng, (in_dim, h1), in_dim),
        "b1": np.zeros(h1),
        "w2": _he(rng, (h1, h2), h1),
        "b2": np.zeros(h2),
        "w3": rng.standard_normal((h2, 1)) * np.sqrt(1.0 / h2),
        "b3": np.zeros(1),
    }


def build_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Draws happen in a fixed order (trunk, projections, attention, heads)
    so a seed pins every weight."""
    config.validate()
    flat = flatten_length(config.input_dim)
    d_h = config.hidden_dim
    raw0 = float(np.log(np.expm1(config.init_curvature - MIN_CURVATURE)))

    arrays: dict[str, np.ndarray] = {
        "trunk.conv1_w": _he(rng, (CONV_CHANNELS[0], 1, KERNEL_SIZE), KERNEL_SIZE),
        "trunk.conv1_b": np.zeros(CONV_CHANNELS[0]),
        "trunk.conv2_w": _he(rng, (CONV_CHANNELS[1], CONV_CHANNELS[0], KERNEL_SIZE),
                             CONV_CHANNELS[0] * KERNEL_SIZE),
        "trunk.conv2_b": np.zeros(CONV_CHANNELS[1]),
    }

    # projections are scaled so the initial tangent norms land near 1 and
    # the ball points stay well away from the boundary
    proj_std = 1.0 / np.sqrt(flat * np.sqrt(d_h))
    if config.kind == "hyperbolic_single":
        arrays["proj.w"] = rng.standard_normal((flat, d_h)) * proj_std
        arrays["proj.b"] = np.zeros(d_h)
        arrays["curv.raw"] = np.asarray(raw0)
    elif config.kind == "hydra":
        for k in range(NUM_TASKS):
            arrays[f"proj{k}.w"] = rng.standard_normal((flat, d_h)) * proj_std
            arrays[f"proj{k}.b"] = np.zeros(d_h)
            arrays[f"curv{k}.raw"] = np.asarray(raw0)
        arrays["attn.logits"] = np.zeros((NUM_TASKS, NUM_TASKS))

    head_in = flat if config.kind == "euclidean" else d_h
    for task in TASKS:
        for name, arr in _head_params(rng, head_in).items():
            arrays[f"head_{task}.{name}"] = arr

    return {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}


def _dropout(t: Tensor, rate: float, training: bool, rng) -> Tensor:
    if not training or rate <= 0.0:
        return t
    keep = 1.0 - rate
    mask = (rng.random(t.data.shape) < keep).astype(np.float64) / keep
    return t * Tensor(mask)


def trunk_forward(params, x: Tensor, *, dropout: float = 0.0,
                  training: bool = False, rng=None) -> Tensor:
    """Embeddings (B, d) -> flattened conv features (B, 128 * d/4)."""
    b, d = x.data.shape
    h = tape.reshape(x, (b, 1, d))
    h = tape.maxpool1d(tape.relu(tape.conv1d(h, params["trunk.conv1_w"], params["trunk.conv1_b"])))
    h = tape.maxpool1d(tape.relu(tape.conv1d(h, params["trunk.conv2_w"], params["trunk.conv2_b"])))
    z = tape.reshape(h, (b, CONV_CHANNELS[1] * (d // 4)))
    return _dropout(z, dropout, training, rng)


def _head_forward(params, task: str, h: Tensor, *, dropout: float,
                  training: bool, rng) -> Tensor:
    p = lambda n: params[f"head_{task}.{n}"]  # noqa: E731
    h1 = tape.relu(h @ p("w1") + p("b1"))
    h1 = _dropout(h1, dropout, training, rng)
    h2 = tape.relu(h1 @ p("w2") + p("b2"))
    out = h2 @ p("w3") + p("b3")
    return tape.reshape(out, (out.data.shape[0],))


def euclidean_forward(params, x: Tensor, *, dropout: float = 0.0,
                      training: bool = False, rng=None):
    z = trunk_forward(params, x, dropout=dropout, training=training, rng=rng)
    preds = tuple(_head_forward(params, t, z, dropout=dropout, training=training, rng=rng)
                  for t in TASKS)
    return preds, None, {}


def single_hyperbolic_forward(params, x: Tensor, *, dropout: float = 0.0,
                              training: bool = False, rng=None):
    z = trunk_forward(params, x, dropout=dropout, training=training, rng=rng)
    c = tape.softplus(params["curv.raw"]) + MIN_CURVATURE
    tangent_in = z @ params["proj.w"] + params["proj.b"]
    point = geometry.exp_map0(tangent_in, c)
    tangent = geometry.log_map0(point, c)
    preds = tuple(_head_forward(params, t, tangent, dropout=dropout, training=training, rng=rng)
                  for t in TASKS)
    return preds, None, {"point": point, "tangent": tangent}


def hydra_forward(params, x: Tensor, *, dropout: float = 0.0,
                  training: bool = False, rng=None, attn_override=None,
                  fold_order=(0, 1, 2), task_curv_index=(0, 1, 2)):
    """Returns (predictions, per-subspace tangent latents, extras).

    `attn_override`, `fold_order` and `task_curv_index` exist for
    equivalence testing and extension; defaults give the canonical model
    (row-softmax attention, ascending fold, task t aggregated in
    subspace t's curvature).
    """
    z = trunk_forward(params, x, dropout=dropout, training=training, rng=rng)
    c_vals = [tape.softplus(params[f"curv{k}.raw"]) + MIN_CURVATURE for k in range(NUM_TASKS)]
    points = []
    latents = []
    for k in range(NUM_TASKS):
        pt = geometry.exp_map0(z @ params[f"proj{k}.w"] + params[f"proj{k}.b"], c_vals[k])
        points.append(pt)
        latents.append(geometry.log_map0(pt, c_vals[k]))

    if attn_override is not None:
        alphas = attn_override if isinstance(attn_override, Tensor) else Tensor(attn_override)
    else:
        alphas = tape.softmax(params["attn.logits"])

    preds = []
    task_points = []
    for t, task in enumerate(TASKS):
        c_t = c_vals[task_curv_index[t]]
        agg = None
        for k in fold_order:
            moved = geometry.transport(points[k], c_vals[k], c_t)
            term = geometry.mobius_scalar(alphas[t, k], moved, c_t)
            agg = term if agg is None else geometry.mobius_add(agg, term, c_t)
        task_points.append(agg)
        tangent = geometry.log_map0(agg, c_t)
        preds.append(_head_forward(params, task, tangent, dropout=dropout,
                                   training=training, rng=rng))
    extras = {"points": points, "task_points": task_points, "attention": alphas}
    return tuple(preds), latents, extras


_FORWARDS = {
    "euclidean": euclidean_forward,
    "hyperbolic_single": single_hyperbolic_forward,
    "hydra": hydra_forward,
}


class CodecModel:
    """Configuration + parameters + forward dispatch for one architecture."""

    def __init__(self, config: ModelConfig, seed_or_rng=0):
        config.validate()
        self.config = config
        rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
               else np.random.default_rng(seed_or_rng))
        self.params = build_params(config, rng)

    def forward(self, x, *, training: bool = False, rng=None, **kwargs):
        xt = x if isinstance(x, Tensor) else Tensor(x)
        return _FORWARDS[self.config.kind](
            self.params, xt, dropout=self.config.dropout,
            training=training, rng=rng, **kwargs)

    def predict(self, x) -> np.ndarray:
        """Eval-mode predictions as a (3, B) array in normalized space."""
        preds, _, _ = self.forward(x, training=False)
        return np.stack([p.data for p in preds])

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise ConfigError(f"parameter set mismatch: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
        for name, arr in arrays.items():
            tgt = self.params[name]
            if arr.shape != tgt.data.shape:
                raise ConfigError(f"shape mismatch for '{name}': checkpoint "
                                  f"{arr.shape} vs model {tgt.data.shape}")
            tgt.data = np.ascontiguousarray(arr, dtype=np.float64)


# ----------------------------------------------------------- checkpoint I/O

_KIND_IDS = {kind: i for i, kind in enumerate(MODEL_KINDS)}


def write_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    """Binary format: magic HYDC, u32 version, u32 entry count, then per
    entry u32 name length, utf-8 name, u32 ndim, u64 extents, raw little-
    endian float64 data."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            arr = np.asarray(entries[name], dtype="<f8")
            if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<Q", ext))
            f.write(arr.tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", blob, 8)
    off = 12
    entries: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, off) if ndim else ()
            off += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            entries[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return entries


def save_model(path, model: CodecModel, extra: dict[str, np.ndarray] | None = None) -> None:
    entries = {f"param/{n}": t.data for n, t in model.params.items()}
    cfg = model.config
    entries["meta/kind_id"] = np.asarray(float(_KIND_IDS[cfg.kind]))
    entries["meta/input_dim"] = np.asarray(float(cfg.input_dim))
    entries["meta/hidden_dim"] = np.asarray(float(cfg.hidden_dim))
    entries["meta/dropout"] = np.asarray(float(cfg.dropout))
    if extra:
        entries.update(extra)
    write_checkpoint(path, entries)


def load_model(path) -> tuple[CodecModel, dict[str, np.ndarray]]:
    """Rebuild the architecture from checkpoint metadata, validate every
    parameter shape, and return (model, non-parameter entries)."""
    entries = read_checkpoint(path)
    for key in ("meta/kind_id", "meta/input_dim", "meta/hidden_dim", "meta/dropout"):
        if key not in entries:
            raise DataError(f"{path}: checkpoint missing '{key}'")
    kind = MODEL_KINDS[int(entries["meta/kind_id"])]
    config = ModelConfig(
        input_dim=int(entries["meta/input_dim"]),
        kind=kind,
        hidden_dim=int(entries["meta/hidden_dim"]),
        dropout=float(entries["meta/dropout"]),
    )
    model = CodecModel(config, seed_or_rng=0)
    params = {n[len("param/"):]: a for n, a in entries.items() if n.startswith("param/")}
    try:
        model.load_state_arrays(params)
    except ConfigError as exc:
        raise DataError(f"{path}: {exc}") from exc
    rest = {n: a for n, a in entries.items() if not n.startswith("param/")}
    return model, rest
