"""Hierarchical residual quantization: per-level k-means codebooks, SID
encoding/decoding, token-string rendering, and the catalog SID trie.

Encoding picks, at each level, the centroid nearest to the current residual
(smallest index wins ties) and subtracts it before descending to the next
level. Decoding sums the selected centroids. Fitting runs k-means on the
residual vectors of each level in turn.

Determinism notes: centroids are held in float32 (the on-disk precision) and
all distance work happens in float64 upcasts, so a saved and reloaded model
encodes identically to the freshly fitted one. Assignment work is sharded over
fixed-size row blocks, which makes results independent of the worker count.
"""

from __future__ import annotations

import hashlib
import json
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .datamodel import (
    EMBEDDING_MAGIC,
    EmbeddingIOError,
    EmbeddingSet,
    read_matrix_block,
    write_matrix_block,
)

SidSequence = tuple[int, ...]

MODEL_FORMAT = "sidforge-rq-v1"
ASSIGNMENT_FORMAT = "sidforge-sids-v1"

_ROW_BLOCK = 4096  # fixed sharding unit so outputs never depend on worker count


class RqError(ValueError):
    """Raised for invalid quantizer configs, inputs, SIDs, or model files."""


@dataclass(frozen=True)
class RqConfig:
    levels: int
    codebook_sizes: tuple[int, ...]
    kmeans_max_iters: int = 50
    kmeans_rel_tol: float = 1e-4
    seed: int = 0
    normalize_inputs: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "codebook_sizes", tuple(int(k) for k in self.codebook_sizes))
        if self.levels < 1:
            raise RqError("levels must be >= 1")
        if len(self.codebook_sizes) != self.levels:
            raise RqError(
                f"codebook_sizes has {len(self.codebook_sizes)} entries for {self.levels} levels"
            )
        if any(k < 1 for k in self.codebook_sizes):
            raise RqError("every codebook size must be >= 1")
        if self.kmeans_max_iters < 0:
            raise RqError("kmeans_max_iters must be >= 0")
        if not self.kmeans_rel_tol >= 0.0:
            raise RqError("kmeans_rel_tol must be >= 0")


@dataclass(frozen=True)
class Codebook:
    level: int  # 1-based
    centroids: np.ndarray  # size x dim float32, read-only

    @property
    def size(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class LevelFitStats:
    level: int
    configured_size: int
    effective_size: int
    mse_trace: tuple[float, ...]  # nonincreasing; entry 0 is the post-init error


@dataclass(frozen=True)
class RqModel:
    config: RqConfig
    codebooks: tuple[Codebook, ...]
    dim: int
    fit_stats: tuple[LevelFitStats, ...]

    @property
    def levels(self) -> int:
        return len(self.codebooks)

    @property
    def effective_sizes(self) -> tuple[int, ...]:
        return tuple(cb.size for cb in self.codebooks)

    def model_hash(self) -> str:
        digest = hashlib.sha256()
        for cb in self.codebooks:
            digest.update(np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes(order="C"))
        return digest.hexdigest()


@dataclass(frozen=True)
class SidAssignment:
    """Per-item SID sequences, keyed by item_id in embedding order, tagged with
    the hash of the model that produced them."""

    sids: dict[str, SidSequence]
    model_hash: str

    def __len__(self) -> int:
        return len(self.sids)

    def __getitem__(self, item_id: str) -> SidSequence:
        return self.sids[item_id]

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.sids

    def distinct_sids(self) -> set[SidSequence]:
        return set(self.sids.values())


def _frozen_f32(matrix: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(matrix, dtype=np.float32)
    out.setflags(write=False)
    return out


def _nearest(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest centroid per point and the squared distance to it.

    Ties go to the smallest centroid index. Distances are direct squared
    differences in float64 (no norm-expansion shortcut), so results agree
    exactly with a per-level linear scan.
    """
    cents = centroids.astype(np.float64)
    k, d = cents.shape
    n = points.shape[0]
    idx = np.empty(n, dtype=np.int64)
    sq = np.empty(n, dtype=np.float64)
    step = max(1, (1 << 22) // max(1, k * d))
    for start in range(0, n, step):
        block = points[start:start + step]
        d2 = np.square(block[:, None, :] - cents[None, :, :]).sum(axis=2)
        best = np.argmin(d2, axis=1)
        idx[start:start + step] = best
        sq[start:start + step] = d2[np.arange(best.shape[0]), best]
    return idx, sq


def _nearest_sharded(points: np.ndarray, centroids: np.ndarray, workers: int):
    """Same values as _nearest; optionally threads over fixed row blocks."""
    n = points.shape[0]
    if workers <= 1 or n <= _ROW_BLOCK:
        return _nearest(points, centroids)
    spans = [(s, min(s + _ROW_BLOCK, n)) for s in range(0, n, _ROW_BLOCK)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda span: _nearest(points[span[0]:span[1]], centroids), spans))
    idx = np.concatenate([p[0] for p in parts])
    sq = np.concatenate([p[1] for p in parts])
    return idx, sq


def _kmeanspp_init(points: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    """Greedy D^2-weighted seeding; returns float32 centroids (possibly < k rows
    if the remaining distance mass hits zero)."""
    n = points.shape[0]
    chosen = [int(gen.integers(n))]
    d2 = np.square(points - points[chosen[0]]).sum(axis=1)
    while len(chosen) < k:
        cum = np.cumsum(d2)
        total = float(cum[-1])
        if total <= 0.0:
            break
        u = gen.random() * total
        j = int(np.searchsorted(cum, u, side="right"))
        if j >= n:
            j = n - 1
        if d2[j] <= 0.0:
            j = int(np.flatnonzero(d2 > 0.0)[0])
        chosen.append(j)
        d2 = np.minimum(d2, np.square(points - points[j]).sum(axis=1))
    return points[np.array(chosen, dtype=np.int64)].astype(np.float32)


def _assign_with_repair(points: np.ndarray, centroids: np.ndarray, workers: int):
    """Nearest-centroid assignment where every empty cluster is re-seeded with
    the point currently farthest from its assigned centroid (one at a time,
    smallest cluster index first)."""
    cents = centroids.copy()
    k = cents.shape[0]
    idx, sq = _nearest_sharded(points, cents, workers)
    for _ in range(k):
        counts = np.bincount(idx, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        cents[int(empty[0])] = points[int(np.argmax(sq))].astype(np.float32)
        idx, sq = _nearest_sharded(points, cents, workers)
    return idx, sq, cents


def _update_centroids(points: np.ndarray, idx: np.ndarray, k: int, old: np.ndarray) -> np.ndarray:
    sums = np.zeros((k, points.shape[1]), dtype=np.float64)
    np.add.at(sums, idx, points)
    counts = np.bincount(idx, minlength=k).astype(np.float64)
    new = old.astype(np.float64)
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled, None]
    return new.astype(np.float32)


def _fit_level(points, k_conf, gen, max_iters, rel_tol, workers):
    distinct = np.unique(points, axis=0).shape[0]
    cents = _kmeanspp_init(points, min(k_conf, distinct), gen)
    idx, sq, cents = _assign_with_repair(points, cents, workers)
    mse = float(sq.mean())
    trace = [mse]
    for _ in range(max_iters):
        new_cents = _update_centroids(points, idx, cents.shape[0], cents)
        new_idx, new_sq, new_cents = _assign_with_repair(points, new_cents, workers)
        new_mse = float(new_sq.mean())
        if new_mse > mse:
            break  # numerical wobble; keep the previous, better state
        cents, idx = new_cents, new_idx
        trace.append(new_mse)
        if mse == 0.0 or (mse - new_mse) < rel_tol * mse:
            mse = new_mse
            break
        mse = new_mse
    return cents, idx, trace


def _prepare(points: np.ndarray, cfg: RqConfig) -> np.ndarray:
    if not cfg.normalize_inputs:
        return points
    norms = np.sqrt(np.square(points).sum(axis=1, keepdims=True))
    norms[norms == 0.0] = 1.0
    return points / norms


def fit_codebooks(emb: EmbeddingSet, cfg: RqConfig, workers: int = 1) -> RqModel:
    """Fit one k-means codebook per level on the residuals of the previous
    levels. A level whose residuals have fewer distinct values than its
    configured size shrinks to that count (recorded in fit_stats)."""
    if emb.count == 0:
        raise RqError("cannot fit codebooks on an empty embedding set")
    residual = _prepare(emb.rows.astype(np.float64), cfg)
    codebooks = []
    stats = []
    for level in range(1, cfg.levels + 1):
        gen = rng.stream(cfg.seed, rng.CODEBOOK_LEVEL, level)
        k_conf = cfg.codebook_sizes[level - 1]
        cents, idx, trace = _fit_level(
            residual, k_conf, gen, cfg.kmeans_max_iters, cfg.kmeans_rel_tol, workers
        )
        codebooks.append(Codebook(level=level, centroids=_frozen_f32(cents)))
        stats.append(
            LevelFitStats(
                level=level,
                configured_size=k_conf,
                effective_size=cents.shape[0],
                mse_trace=tuple(trace),
            )
        )
        residual = residual - cents.astype(np.float64)[idx]
    return RqModel(config=cfg, codebooks=tuple(codebooks), dim=emb.dim, fit_stats=tuple(stats))


def encode_batch(model: RqModel, rows, workers: int = 1) -> np.ndarray:
    """Token matrix (n x levels, int64) for a batch of embedding rows."""
    points = np.asarray(rows, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != model.dim:
        raise RqError(f"expected shape (n, {model.dim}), got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise RqError("embedding rows contain non-finite values")
    residual = _prepare(points, model.config)
    out = np.empty((points.shape[0], model.levels), dtype=np.int64)
    for level, cb in enumerate(model.codebooks):
        idx, _ = _nearest_sharded(residual, cb.centroids, workers)
        out[:, level] = idx
        residual = residual - cb.centroids.astype(np.float64)[idx]
    return out


def encode(model: RqModel, x) -> SidSequence:
    """SID of one vector: per level, the nearest centroid to the running
    residual, smallest index winning ties."""
    vec = np.asarray(x, dtype=np.float64).reshape(-1)
    if vec.shape[0] != model.dim:
        raise RqError(f"expected a {model.dim}-dimensional vector, got {vec.shape[0]}")
    return tuple(int(t) for t in encode_batch(model, vec[None, :])[0])


def validate_sid(model: RqModel, s: SidSequence) -> None:
    if len(s) != model.levels:
        raise RqError(f"SID has {len(s)} tokens for a {model.levels}-level model")
    for level, token in enumerate(s):
        size = model.codebooks[level].size
        if not 0 <= int(token) < size:
            raise RqError(f"token {token} out of range [0, {size}) at level {level + 1}")


def decode(model: RqModel, s: SidSequence, depth: int | None = None) -> np.ndarray:
    """Sum of the first `depth` selected centroids (default: all levels).
    Reconstructs the embedding as quantized (after normalization, if the model
    normalizes its inputs)."""
    validate_sid(model, s)
    if depth is None:
        depth = model.levels
    if not 0 <= depth <= model.levels:
        raise RqError(f"depth {depth} out of range [0, {model.levels}]")
    out = np.zeros(model.dim, dtype=np.float64)
    for level in range(depth):
        out += model.codebooks[level].centroids[s[level]].astype(np.float64)
    return out


def decode_batch(model: RqModel, tokens, depth: int | None = None) -> np.ndarray:
    """Reconstruction matrix for a token matrix (n x levels)."""
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 2 or toks.shape[1] != model.levels:
        raise RqError(f"expected shape (n, {model.levels}), got {toks.shape}")
    if depth is None:
        depth = model.levels
    if not 0 <= depth <= model.levels:
        raise RqError(f"depth {depth} out of range [0, {model.levels}]")
    out = np.zeros((toks.shape[0], model.dim), dtype=np.float64)
    for level in range(depth):
        cb = model.codebooks[level]
        col = toks[:, level]
        if col.size and (col.min() < 0 or col.max() >= cb.size):
            raise RqError(f"token out of range at level {level + 1}")
        out += cb.centroids.astype(np.float64)[col]
    return out


def level_letter(level: int) -> str:
    """Letter tag for a 1-based level: a, b, c, ..."""
    if not 1 <= level <= 26:
        raise RqError("token rendering supports at most 26 levels")
    return string.ascii_lowercase[level - 1]


_TOKEN_RE = re.compile(r"<([a-z])_(0|[1-9][0-9]*)>")


def render_sid(s: SidSequence) -> str:
    """Token string like "<a_239><b_112><c_7>": one <letter_index> group per
    level, concatenated without separators."""
    if not s:
        raise RqError("cannot render an empty SID")
    return "".join(f"<{level_letter(h + 1)}_{int(t)}>" for h, t in enumerate(s))


def parse_sid(text: str, model: RqModel | None = None) -> SidSequence:
    """Exact inverse of render_sid. Level letters must run a, b, c, ... with no
    gaps; token indices take no leading zeros. With a model, range-checks too."""
    tokens: list[int] = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise RqError(f"malformed SID token at position {pos} in {text!r}")
        expected = level_letter(len(tokens) + 1)
        if match.group(1) != expected:
            raise RqError(
                f"expected level letter {expected!r} at position {pos}, got {match.group(1)!r}"
            )
        tokens.append(int(match.group(2)))
        pos = match.end()
    if not tokens:
        raise RqError("empty SID string")
    s = tuple(tokens)
    if model is not None:
        validate_sid(model, s)
    return s


def assign_all(model: RqModel, emb: EmbeddingSet, workers: int = 1) -> SidAssignment:
    """Encode every row of an embedding set; output order follows the set."""
    if emb.dim != model.dim:
        raise RqError(f"model dim {model.dim} != embedding dim {emb.dim}")
    tokens = encode_batch(model, emb.rows, workers=workers)
    sids = {
        item_id: tuple(int(t) for t in row)
        for item_id, row in zip(emb.item_ids, tokens)
    }
    return SidAssignment(sids=sids, model_hash=model.model_hash())


class TrieNode:
    __slots__ = ("children", "item_ids")

    def __init__(self) -> None:
        self.children: dict[int, TrieNode] = {}
        self.item_ids: list[str] = []


@dataclass(frozen=True)
class SidTrie:
    """Prefix tree over token sequences; level-H leaves carry the sorted
    item_ids sharing that full SID."""

    root: TrieNode
    depth: int
    n_sids: int
    n_items: int

    def node_at(self, prefix) -> TrieNode | None:
        node = self.root
        for token in prefix:
            node = node.children.get(int(token))
            if node is None:
                return None
        return node

    def __contains__(self, tokens) -> bool:
        node = self.node_at(tokens)
        return node is not None and bool(node.item_ids)

    def items_for(self, tokens) -> tuple[str, ...]:
        node = self.node_at(tokens)
        if node is None or len(tuple(tokens)) != self.depth:
            return ()
        return tuple(node.item_ids)

    def iter_sids(self):
        """Yield (tokens, item_ids) over all distinct SIDs in lexicographic
        token order."""

        def walk(node: TrieNode, prefix: tuple[int, ...]):
            if len(prefix) == self.depth:
                yield prefix, tuple(node.item_ids)
                return
            for token in sorted(node.children):
                yield from walk(node.children[token], prefix + (token,))

        yield from walk(self.root, ())


def build_trie(assign: SidAssignment) -> SidTrie:
    if len(assign.sids) == 0:
        raise RqError("cannot build a trie from an empty assignment")
    depth = len(next(iter(assign.sids.values())))
    root = TrieNode()
    n_sids = 0
    for item_id, s in assign.sids.items():
        if len(s) != depth:
            raise RqError("assignment mixes SID lengths")
        node = root
        for token in s:
            child = node.children.get(int(token))
            if child is None:
                child = TrieNode()
                node.children[int(token)] = child
            node = child
        if not node.item_ids:
            n_sids += 1
        node.item_ids.append(item_id)

    def sort_leaves(node: TrieNode) -> None:
        node.item_ids.sort()
        for child in node.children.values():
            sort_leaves(child)

    sort_leaves(root)
    return SidTrie(root=root, depth=depth, n_sids=n_sids, n_items=len(assign.sids))


def save_model(model: RqModel, path) -> None:
    """One-line JSON header followed by one binary centroid block per level."""
    header = {
        "format": MODEL_FORMAT,
        "levels": model.levels,
        "dim": model.dim,
        "codebook_sizes": list(model.config.codebook_sizes),
        "effective_sizes": list(model.effective_sizes),
        "kmeans_max_iters": model.config.kmeans_max_iters,
        "kmeans_rel_tol": model.config.kmeans_rel_tol,
        "seed": model.config.seed,
        "normalize_inputs": model.config.normalize_inputs,
        "model_hash": model.model_hash(),
        "fit_stats": [
            {
                "level": st.level,
                "configured_size": st.configured_size,
                "effective_size": st.effective_size,
                "mse_trace": list(st.mse_trace),
            }
            for st in model.fit_stats
        ],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for cb in model.codebooks:
            write_matrix_block(fh, cb.centroids)


def load_model(path) -> RqModel:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise RqError(f"unreadable model header: {exc}") from exc
        if header.get("format") != MODEL_FORMAT:
            raise RqError(f"unsupported model format {header.get('format')!r}")
        offset = len(header_line)
        codebooks = []
        for level in range(1, int(header["levels"]) + 1):
            try:
                matrix = read_matrix_block(fh, base_offset=offset)
            except EmbeddingIOError as exc:
                raise RqError(f"level {level} centroid block: {exc}") from exc
            offset += len(EMBEDDING_MAGIC) + 8 + matrix.nbytes + 4
            codebooks.append(Codebook(level=level, centroids=_frozen_f32(matrix)))
        if fh.read(1):
            raise RqError("trailing bytes after the last codebook block")
    cfg = RqConfig(
        levels=int(header["levels"]),
        codebook_sizes=tuple(header["codebook_sizes"]),
        kmeans_max_iters=int(header["kmeans_max_iters"]),
        kmeans_rel_tol=float(header["kmeans_rel_tol"]),
        seed=int(header["seed"]),
        normalize_inputs=bool(header["normalize_inputs"]),
    )
    stats = tuple(
        LevelFitStats(
            level=int(st["level"]),
            configured_size=int(st["configured_size"]),
            effective_size=int(st["effective_size"]),
            mse_trace=tuple(float(v) for v in st["mse_trace"]),
        )
        for st in header["fit_stats"]
    )
    dims = {cb.centroids.shape[1] for cb in codebooks}
    if dims != {int(header["dim"])}:
        raise RqError(f"codebook dims {sorted(dims)} do not match header dim {header['dim']}")
    model = RqModel(config=cfg, codebooks=tuple(codebooks), dim=int(header["dim"]), fit_stats=stats)
    if list(model.effective_sizes) != list(header["effective_sizes"]):
        raise RqError("codebook sizes do not match the header")
    if model.model_hash() != header["model_hash"]:
        raise RqError("model hash mismatch; file corrupted or edited")
    return model


def save_assignment(assign: SidAssignment, path) -> None:
    """One-line JSON meta record, then one JSON line per item."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        meta = {"format": ASSIGNMENT_FORMAT, "model_hash": assign.model_hash, "count": len(assign.sids)}
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for item_id, s in assign.sids.items():
            fh.write(
                json.dumps(
                    {"item_id": item_id, "sid": render_sid(s), "tokens": list(s)},
                    sort_keys=True,
                )
                + "\n"
            )


def load_assignment(path) -> SidAssignment:
    sids: dict[str, SidSequence] = {}
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        try:
            meta = json.loads(first)
        except json.JSONDecodeError as exc:
            raise RqError(f"unreadable assignment meta line: {exc.msg}") from exc
        if meta.get("format") != ASSIGNMENT_FORMAT:
            raise RqError(f"unsupported assignment format {meta.get('format')!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RqError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            item_id = obj["item_id"]
            tokens = tuple(int(t) for t in obj["tokens"])
            if item_id in sids:
                raise RqError(f"line {lineno}: duplicate item_id {item_id!r}")
            if render_sid(tokens) != obj["sid"]:
                raise RqError(f"line {lineno}: sid text does not match tokens")
            sids[item_id] = tokens
    if len(sids) != int(meta.get("count", len(sids))):
        raise RqError("assignment count does not match the meta line")
    return SidAssignment(sids=sids, model_hash=str(meta["model_hash"]))
