"""Chunk database: embedded target chunks, exact k-NN retrieval, assembly of
rank-r approximate reconstructions, and test-time extension.

The accelerated index is an exact vantage-point tree: both it and the
brute-force scanner compute squared l2 distances with the same float64
kernel over the same stored rows, so results match the oracle bitwise,
including the (distance, id) tie rule.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field

import numpy as np

from .embed import ChunkEncoderPair
from .grids import ChunkLayout, ScalarGrid3, fold, occupancy_fraction
from .metrics import OCCUPANCY_TDF_THRESHOLD

DB_MAGIC = b"RFDB"
EMPTY_CHUNK_TAG = "canonical-empty"


def _sqdist(embeddings: np.ndarray, rows: np.ndarray, q64: np.ndarray) -> np.ndarray:
    """Shared distance kernel: float64 squared l2 of selected rows to q."""
    diff = embeddings[rows].astype(np.float64) - q64
    return np.einsum("ij,ij->i", diff, diff)


class _VPNode:
    __slots__ = ("vantage", "children", "rows")

    def __init__(self, vantage=None, children=None, rows=None):
        self.vantage = vantage      # row index, or None for a leaf
        self.children = children    # [(dmin, dmax, node), ...] by distance band
        self.rows = rows            # leaf bucket row indices


class VPIndex:
    """Exact vantage-point tree over unit-norm embeddings."""

    def __init__(self, embeddings: np.ndarray, ids: np.ndarray, leaf_size: int = 16):
        self.embeddings = embeddings
        self.ids = ids
        self.leaf_size = leaf_size
        rows = np.arange(len(embeddings), dtype=np.int64)
        self.root = self._build(rows) if len(rows) else None

    def _build(self, rows: np.ndarray) -> _VPNode:
        if len(rows) <= self.leaf_size:
            return _VPNode(rows=rows)
        vantage = rows[0]
        rest = rows[1:]
        d = np.sqrt(_sqdist(self.embeddings, rest,
                            self.embeddings[vantage].astype(np.float64)))
        mu = np.median(d)
        inner = rest[d <= mu]
        outer = rest[d > mu]
        if len(inner) == 0 or len(outer) == 0:
            return _VPNode(rows=rows)
        children = []
        for sub, dist in ((inner, d[d <= mu]), (outer, d[d > mu])):
            children.append((float(dist.min()), float(dist.max()), self._build(sub)))
        return _VPNode(vantage=vantage, children=children)

    def query(self, q: np.ndarray, k: int) -> list[tuple[int, float]]:
        if self.root is None or k < 1:
            return []
        q64 = np.asarray(q, dtype=np.float64).reshape(-1)
        heap: list[tuple[float, int, int]] = []  # (-dist, -id, row), worst on top

        def consider(rows):
            d = _sqdist(self.embeddings, rows, q64)
            for dist, row in zip(d, rows):
                ident = int(self.ids[row])
                if len(heap) < k:
                    heapq.heappush(heap, (-dist, -ident, row))
                elif (dist, ident) < (-heap[0][0], -heap[0][1]):
                    heapq.heapreplace(heap, (-dist, -ident, row))

        def visit(node):
            if node.vantage is None:
                consider(node.rows)
                return
            consider(np.array([node.vantage], dtype=np.int64))
            dv = float(np.sqrt(_sqdist(self.embeddings, np.array([node.vantage]), q64)[0]))
            ordered = sorted(node.children,
                             key=lambda ch: max(0.0, dv - ch[1], ch[0] - dv))
            for dmin, dmax, child in ordered:
                lb = max(0.0, dv - dmax, dmin - dv)
                if len(heap) == k:
                    worst = -heap[0][0]
                    # tiny relative slack so float rounding never prunes a tie
                    if lb * lb * (1.0 - 1e-9) > worst:
                        continue
                visit(child)

        visit(self.root)
        out = sorted(((-nd, -ni) for nd, ni, _ in heap))
        return [(ident, dist) for dist, ident in out]


@dataclass
class ApproxReconstruction:
    """Scene window assembled from the rank-th neighbor at every chunk slot."""

    rank: int
    scene: ScalarGrid3


@dataclass
class ChunkDatabase:
    chunk_dim: int
    embed_dim: int
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))
    tags: list[str] = field(default_factory=list)
    embeddings: np.ndarray | None = None
    chunks: np.ndarray | None = None
    version: int = 0
    _index: VPIndex | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.embeddings is None:
            self.embeddings = np.zeros((0, self.embed_dim), dtype=np.float32)
        if self.chunks is None:
            self.chunks = np.zeros((0, self.chunk_dim ** 3), dtype=np.float32)

    def __len__(self) -> int:
        return len(self.ids)

    def add_entries(self, chunks: np.ndarray, embeddings: np.ndarray, tags: list[str]):
        chunks = np.asarray(chunks, dtype=np.float32).reshape(len(tags), -1)
        if chunks.shape[1] != self.chunk_dim ** 3:
            raise ValueError(f"chunk payload size {chunks.shape[1]} != {self.chunk_dim ** 3}")
        embeddings = np.asarray(embeddings, dtype=np.float32).reshape(len(tags), self.embed_dim)
        next_id = int(self.ids.max()) + 1 if len(self.ids) else 0
        new_ids = np.arange(next_id, next_id + len(tags), dtype=np.uint64)
        self.ids = np.concatenate([self.ids, new_ids])
        self.tags.extend(tags)
        self.embeddings = np.concatenate([self.embeddings, embeddings])
        self.chunks = np.concatenate([self.chunks, chunks])
        self._index = None

    def build_index(self):
        self._index = VPIndex(self.embeddings, self.ids)

    def chunk_grid(self, row: int, voxel_size: float = 1.0, origin=(0, 0, 0)) -> ScalarGrid3:
        c = self.chunk_dim
        return ScalarGrid3(self.chunks[row].reshape(c, c, c), voxel_size, np.asarray(origin))

    def row_of_id(self, ident: int) -> int:
        rows = np.nonzero(self.ids == ident)[0]
        if not len(rows):
            raise KeyError(f"no chunk with id {ident}")
        return int(rows[0])


def knn_bruteforce(db: ChunkDatabase, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Oracle scanner: ascending squared l2, ties broken by lower id."""
    if k > len(db):
        raise ValueError(f"k={k} exceeds database size {len(db)}")
    q64 = np.asarray(query, dtype=np.float64).reshape(-1)
    d = _sqdist(db.embeddings, np.arange(len(db), dtype=np.int64), q64)
    order = np.lexsort((db.ids, d))[:k]
    return [(int(db.ids[r]), float(d[r])) for r in order]


def knn(db: ChunkDatabase, query: np.ndarray, k: int,
        use_index: bool = True) -> list[tuple[int, float]]:
    """k nearest database entries by squared l2 embedding distance."""
    if k > len(db):
        raise ValueError(f"k={k} exceeds database size {len(db)}")
    if not use_index:
        return knn_bruteforce(db, query, k)
    if db._index is None:
        db.build_index()
    return db._index.query(query, k)


def select_training_pairs(input_chunks: np.ndarray, target_chunks: np.ndarray,
                          min_occupancy: float = 0.01,
                          occ_threshold: float = OCCUPANCY_TDF_THRESHOLD
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Drop pairs whose target chunk is (near-)empty, keeping one canonical
    empty pair so empty regions still learn an empty retrieval."""
    targets = np.asarray(target_chunks, dtype=np.float32)
    flat = targets.reshape(len(targets), -1)
    occ = (flat < occ_threshold).mean(axis=1)
    keep = occ >= min_occupancy
    empties = np.nonzero(~keep)[0]
    if len(empties):
        keep[empties[0]] = True
    return np.asarray(input_chunks, dtype=np.float32)[keep], targets[keep]


def build(encoders: ChunkEncoderPair, scenes: list[ScalarGrid3], layout: ChunkLayout,
          scene_tags: list[str] | None = None, min_occupancy: float = 0.01,
          occ_threshold: float = OCCUPANCY_TDF_THRESHOLD) -> ChunkDatabase:
    """Embed every retained target chunk of the train windows into a database.

    With min_occupancy > 0, (near-)empty chunks are dropped and one synthetic
    canonical empty chunk is kept so empty queries retrieve emptiness;
    min_occupancy = 0 stores every chunk unfiltered.
    """
    if not scenes:
        raise ValueError("no scenes to build a database from")
    if scene_tags is None:
        scene_tags = [f"scene{num}" for num in range(len(scenes))]
    c = layout.chunk_dim
    all_chunks, all_tags = [], []
    if min_occupancy > 0:
        all_chunks.append(np.ones(c ** 3, dtype=np.float32))
        all_tags.append(EMPTY_CHUNK_TAG)
    for scene, tag in zip(scenes, scene_tags):
        for chunk in unfold_values(scene.values, layout):
            if min_occupancy > 0:
                if (chunk < occ_threshold).mean() < min_occupancy:
                    continue
            all_chunks.append(chunk.ravel().astype(np.float32))
            all_tags.append(tag)
    stack = np.stack(all_chunks)
    db = ChunkDatabase(chunk_dim=c, embed_dim=encoders.embed_dim)
    db.add_entries(stack, encoders.encode_targets(stack), all_tags)
    db.build_index()
    return db


def unfold_values(values: np.ndarray, layout: ChunkLayout) -> list[np.ndarray]:
    """Raw n^3 chunk arrays of one window, lexicographic (i, j, k)."""
    d, c, n = layout.scene_dim, layout.chunk_dim, layout.n
    if values.shape != (d, d, d):
        raise ValueError(f"window shape {values.shape} != {(d,) * 3}")
    out = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                out.append(np.ascontiguousarray(
                    values[i * c:(i + 1) * c, j * c:(j + 1) * c, k * c:(k + 1) * c]))
    return out


def assemble_approximations(db: ChunkDatabase, encoders: ChunkEncoderPair,
                            input_window: ScalarGrid3, layout: ChunkLayout,
                            k: int) -> list[ApproxReconstruction]:
    """k candidate windows: rank-r uses the r-th neighbor at every chunk slot."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(db):
        raise ValueError(f"k={k} exceeds database size {len(db)}")
    n = layout.n
    in_dim = input_window.dims[0]
    if in_dim % n:
        raise ValueError(f"input window side {in_dim} not divisible into {n} chunks")
    in_layout = ChunkLayout(scene_dim=in_dim, chunk_dim=in_dim // n, patch_dim=1)
    in_chunks = np.stack([ch.ravel() for ch in unfold_values(input_window.values, in_layout)])
    embeds = encoders.encode_inputs(in_chunks)
    neighbor_rows = np.empty((len(in_chunks), k), dtype=np.int64)
    for slot, e in enumerate(embeds):
        hits = knn(db, e, k)
        neighbor_rows[slot] = [db.row_of_id(ident) for ident, _ in hits]

    target_vs = input_window.voxel_size * in_dim / layout.scene_dim
    out = []
    for r in range(k):
        chunk_grids = [db.chunk_grid(neighbor_rows[slot, r], target_vs)
                       for slot in range(len(in_chunks))]
        scene = fold(chunk_grids, layout)
        scene = ScalarGrid3(scene.values, target_vs, input_window.origin)
        out.append(ApproxReconstruction(rank=r + 1, scene=scene))
    return out


def extend(db: ChunkDatabase, new_chunks: np.ndarray, encoders: ChunkEncoderPair,
           tag: str = "extension", min_occupancy: float = 0.01,
           occ_threshold: float = OCCUPANCY_TDF_THRESHOLD) -> ChunkDatabase:
    """Append chunks embedded with the frozen target encoder; ids stay stable."""
    new_chunks = np.asarray(new_chunks, dtype=np.float32).reshape(-1, db.chunk_dim ** 3)
    if new_chunks.shape[1] != db.chunk_dim ** 3:
        raise ValueError("extension chunk dims do not match the database")
    if min_occupancy > 0 and len(new_chunks):
        occ = (new_chunks < occ_threshold).mean(axis=1)
        new_chunks = new_chunks[occ >= min_occupancy]
    if len(new_chunks):
        db.add_entries(new_chunks, encoders.encode_targets(new_chunks),
                       [tag] * len(new_chunks))
        db.build_index()
    db.version += 1
    return db


# ---------------------------------------------------------------------------
# RFDB serialization
# ---------------------------------------------------------------------------

def save_db(path, db: ChunkDatabase) -> None:
    with open(path, "wb") as f:
        f.write(DB_MAGIC)
        f.write(struct.pack("<IIQ", db.chunk_dim, db.embed_dim, len(db)))
        for row in range(len(db)):
            f.write(struct.pack("<Q", int(db.ids[row])))
            tag = db.tags[row].encode("utf-8")
            f.write(struct.pack("<H", len(tag)))
            f.write(tag)
            f.write(np.ascontiguousarray(db.embeddings[row], dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(db.chunks[row], dtype="<f4").tobytes())


def load_db(path) -> ChunkDatabase:
    with open(path, "rb") as f:
        if f.read(4) != DB_MAGIC:
            raise ValueError(f"{path}: not an RFDB file")
        chunk_dim, embed_dim, count = struct.unpack("<IIQ", f.read(16))
        ids, tags, embeds, chunks = [], [], [], []
        for _ in range(count):
            (ident,) = struct.unpack("<Q", f.read(8))
            (tlen,) = struct.unpack("<H", f.read(2))
            tags.append(f.read(tlen).decode("utf-8"))
            ids.append(ident)
            embeds.append(np.frombuffer(f.read(4 * embed_dim), dtype="<f4"))
            chunks.append(np.frombuffer(f.read(4 * chunk_dim ** 3), dtype="<f4"))
    db = ChunkDatabase(chunk_dim=chunk_dim, embed_dim=embed_dim)
    if count:
        db.ids = np.asarray(ids, dtype=np.uint64)
        db.tags = tags
        db.embeddings = np.vstack(embeds).astype(np.float32)
        db.chunks = np.vstack(chunks).astype(np.float32)
    return db
