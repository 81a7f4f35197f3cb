"""Conditioning signals for the two denoising stages.

Everything a denoiser can be conditioned on is produced here: the global
latent code of a detail map, linear projections of pose/expression/emotion
vectors onto a common code width, the stacked code blocks fed to the
cross-attention layers, the spatial condition for the control branch, and
the emotion database with its cosine-similarity retrieval.
"""

import hashlib
import json
import pathlib
from dataclasses import dataclass, field

import numpy as np

from .errors import OracleError
from .imagecore import DEFAULT_EXPR_DIM, DEFAULT_POSE_DIM, ImageTensor, VideoSequence
from .nn import Conv2d, GroupNorm, Linear, Module, Tensor, concat
from .synthgen import EMOTION_LABELS, expression_oracle
from .tsd import TSDMap

D_CODE = 256
D_EMOTION = 768

FC_ROLES = ("tsd_latent", "pose", "expression")
FD_ROLES = ("tsd_latent", "pose", "expression", "emotion")


@dataclass(frozen=True)
class ConditionBundle:
    """A rows x d_code matrix of stacked condition codes with named rows."""

    codes: np.ndarray
    row_roles: tuple

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.float32)
        if codes.ndim != 2:
            raise ValueError(f"codes must be 2-d, got shape {codes.shape}")
        if codes.shape[0] not in (3, 4):
            raise ValueError(f"expected 3 or 4 code rows, got {codes.shape[0]}")
        if len(self.row_roles) != codes.shape[0]:
            raise ValueError("row_roles length must match the number of rows")
        allowed = set(FD_ROLES)
        for role in self.row_roles:
            if role not in allowed:
                raise ValueError(f"unknown row role '{role}'")
        if not np.isfinite(codes).all():
            raise ValueError("condition codes must be finite")
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "row_roles", tuple(self.row_roles))


def embed_emotion(label: str) -> np.ndarray:
    """Deterministic unit-norm stand-in for a text embedding of the label.

    The vector is pseudo-random, seeded by a hash of the label, so it is a
    pure function of the string: recomputing it in any process yields the
    same bits. Unknown labels are rejected against the closed label set.
    """
    if label not in EMOTION_LABELS:
        raise KeyError(f"unknown emotion label '{label}'")
    seed = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "big")
    g = np.random.Generator(np.random.PCG64(seed))
    v = g.standard_normal(D_EMOTION)
    return (v / np.linalg.norm(v)).astype(np.float32)


def embedding_table(labels=EMOTION_LABELS) -> dict:
    return {lab: embed_emotion(lab) for lab in labels}


def save_embedding_table(table: dict, path):
    payload = {lab: np.asarray(v, dtype=np.float32).tolist() for lab, v in table.items()}
    pathlib.Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_embedding_table(path) -> dict:
    payload = json.loads(pathlib.Path(path).read_text())
    return {lab: np.asarray(v, dtype=np.float32) for lab, v in payload.items()}


@dataclass(frozen=True)
class EmotionDatabase:
    """(expression vector, label) pairs queried by cosine-similarity argmax."""

    entries: tuple                      # ((vector, label), ...)
    labels: tuple = field(default=())   # closed label set; defaults to entry labels

    def __post_init__(self):
        if not self.entries:
            raise ValueError("emotion database needs at least one entry")
        dim = None
        norm_entries = []
        for vec, lab in self.entries:
            v = np.asarray(vec, dtype=np.float64).ravel()
            if dim is None:
                dim = v.size
            elif v.size != dim:
                raise ValueError("all database vectors must share one length")
            if not np.isfinite(v).all():
                raise ValueError(f"non-finite vector for label '{lab}'")
            v.setflags(write=False)
            norm_entries.append((v, str(lab)))
        labels = tuple(self.labels) or tuple(dict.fromkeys(lab for _, lab in norm_entries))
        present = {lab for _, lab in norm_entries}
        for lab in labels:
            if lab not in present:
                raise ValueError(f"label '{lab}' has no database entry")
        for lab in present:
            if lab not in labels:
                raise ValueError(f"entry label '{lab}' outside the label set")
        object.__setattr__(self, "entries", tuple(norm_entries))
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.entries[0][0].size


def build_emotion_database(seq: VideoSequence) -> EmotionDatabase:
    """One entry per frame, pairing its expression vector with its label."""
    return EmotionDatabase(tuple((fr.expression, fr.emotion_label) for fr in seq.frames))


def save_emotion_database(db: EmotionDatabase, path):
    payload = {
        "labels": list(db.labels),
        "entries": [{"label": lab, "vector": vec.tolist()} for vec, lab in db.entries],
    }
    pathlib.Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_emotion_database(path) -> EmotionDatabase:
    payload = json.loads(pathlib.Path(path).read_text())
    entries = tuple((np.asarray(e["vector"]), e["label"]) for e in payload["entries"])
    return EmotionDatabase(entries, tuple(payload["labels"]))


def nearest_label(query: np.ndarray, db: EmotionDatabase) -> str:
    """Label of the database entry with the highest cosine similarity.

    Ties break toward the lowest entry index. A zero-norm query or entry
    scores -1 for that pair, so it cannot win unless every pair does.
    """
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.size != db.dim:
        raise ValueError(f"query length {q.size} != database dim {db.dim}")
    qn = np.linalg.norm(q)
    best_score, best_label = -np.inf, None
    for vec, lab in db.entries:
        vn = np.linalg.norm(vec)
        score = -1.0 if qn == 0.0 or vn == 0.0 else float(q @ vec) / (qn * vn)
        if score > best_score:
            best_score, best_label = score, lab
    return best_label


def select_emotion(img: ImageTensor, db: EmotionDatabase) -> str:
    """Retrieve the emotion label of a frame from its measured expression."""
    return nearest_label(expression_oracle(img, d_e=db.dim), db)


class TSDEncoder(Module):
    """Global latent code of a detail map: 4 stride-2 stages, pool, linear."""

    def __init__(self, rng, image_size: int, ctx_dim: int = D_CODE,
                 in_channels: int = 3, widths=(8, 16, 32, 64), groups: int = 4):
        self.image_size = int(image_size)
        self.convs, self.norms = [], []
        cin = in_channels
        for w in widths:
            self.convs.append(Conv2d(cin, w, 3, rng, stride=2))
            self.norms.append(GroupNorm(w, groups))
            cin = w
        self.head = Linear(cin, ctx_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.image_size or x.shape[2] != self.image_size:
            raise ValueError(
                f"encoder expects {self.image_size}x{self.image_size} maps, "
                f"got {x.shape[1]}x{x.shape[2]}")
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = norm(conv(h)).silu()
        return self.head(h.mean(axis=(1, 2)))

    def encode(self, tsd: TSDMap) -> np.ndarray:
        """Inference-time code of a single map (model-space scaling applied)."""
        x = Tensor(tsd.data[None] * np.float32(2.0))
        return self(x).data[0]


class VectorProjector(Module):
    """Role-specific affine maps from raw coefficient vectors to code width."""

    DIMS = {"pose": DEFAULT_POSE_DIM, "expression": DEFAULT_EXPR_DIM, "emotion": D_EMOTION}

    def __init__(self, rng, ctx_dim: int = D_CODE, dims: dict | None = None):
        self.dims = dict(dims or self.DIMS)
        self.layers = {role: Linear(d, ctx_dim, rng) for role, d in sorted(self.dims.items())}
        # expose for parameter discovery
        for role, layer in self.layers.items():
            setattr(self, f"proj_{role}", layer)

    def __call__(self, v: Tensor, role: str) -> Tensor:
        if role not in self.layers:
            raise ValueError(f"unknown projection role '{role}'")
        if v.shape[-1] != self.dims[role]:
            raise ValueError(
                f"role '{role}' expects vectors of length {self.dims[role]}, "
                f"got {v.shape[-1]}")
        return self.layers[role](v)

    def project(self, v: np.ndarray, role: str) -> np.ndarray:
        out = self(Tensor(np.asarray(v, dtype=np.float32)[None]), role)
        return out.data[0]


def stack_code_rows(rows: list) -> Tensor:
    """Stack (B, d) code tensors into a (B, rows, d) context block."""
    parts = [r.reshape(r.shape[0], 1, r.shape[1]) for r in rows]
    return concat(parts, axis=1)


def build_fc(tsd_code, pose_code, expr_code) -> ConditionBundle:
    return ConditionBundle(np.stack([np.asarray(tsd_code), np.asarray(pose_code),
                                     np.asarray(expr_code)]), FC_ROLES)


def build_fd(tsd_code, pose_code, expr_code, emotion_code) -> ConditionBundle:
    return ConditionBundle(np.stack([np.asarray(tsd_code), np.asarray(pose_code),
                                     np.asarray(expr_code), np.asarray(emotion_code)]),
                           FD_ROLES)


def build_zc(normal: ImageTensor, tsd: TSDMap) -> np.ndarray:
    """Spatial condition: normal map channels first, detail map channels after."""
    if normal.shape != tsd.data.shape:
        raise ValueError(f"normal {normal.shape} and detail map {tsd.data.shape} "
                         f"dimensions differ")
    return np.concatenate([normal.data, tsd.data], axis=-1)
