"""Embedding dumps, exact nearest-neighbour search and recall@N at a metric radius."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_module
from .encoders import ImageEncoderConfig, build_image_encoder, encode_images
from .geodata import GeoRecord, load_images

DUMP_MAGIC = b"PGEO"
DUMP_VERSION = 1


class DumpFormatError(ValueError):
    pass


@dataclass
class EmbeddingDump:
    ids: List[str]
    vectors: np.ndarray
    source_hash: str = ""

    def __post_init__(self) -> None:
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or len(self.ids) != self.vectors.shape[0]:
            raise ValueError(f"{len(self.ids)} ids for a {self.vectors.shape} matrix")
        if not np.isfinite(self.vectors).all():
            raise ValueError("embedding rows must be finite")

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def write_dump(dump: EmbeddingDump, path: str | os.PathLike) -> None:
    for i in dump.ids:
        if "\n" in i or "\r" in i:
            raise ValueError(f"id {i!r} contains a line break")
    body = (DUMP_MAGIC + struct.pack("<BII", DUMP_VERSION, dump.count, dump.dim)
            + dump.vectors.astype("<f4").tobytes()
            + "".join(i + "\n" for i in dump.ids).encode("utf-8"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body)
    os.replace(tmp, path)
    if dump.source_hash:
        meta = path.with_name(path.name + ".source")
        meta.write_text(dump.source_hash + "\n", encoding="utf-8")


def read_dump(path: str | os.PathLike) -> EmbeddingDump:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != DUMP_MAGIC:
        raise DumpFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 13:
        raise DumpFormatError(f"{path}: truncated header")
    version, count, dim = struct.unpack("<BII", raw[4:13])
    if version != DUMP_VERSION:
        raise DumpFormatError(f"{path}: unsupported dump version {version} "
                              f"(reader supports {DUMP_VERSION})")
    end = 13 + 4 * count * dim
    if len(raw) < end:
        raise DumpFormatError(f"{path}: truncated vector block")
    vectors = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=13)
    ids = raw[end:].decode("utf-8").split("\n")
    if ids and ids[-1] == "":
        ids.pop()
    if len(ids) != count:
        raise DumpFormatError(f"{path}: header says {count} rows but found {len(ids)} ids")
    meta = path.with_name(path.name + ".source")
    source = meta.read_text(encoding="utf-8").strip() if meta.exists() else ""
    return EmbeddingDump(ids, vectors.astype(np.float32).reshape(count, dim), source)


def load_image_encoder(checkpoint_path: str | os.PathLike):
    """Rebuild the image tower only; text tower tensors in the file are never touched."""
    ckpt = load_checkpoint(checkpoint_path)
    cfg = ImageEncoderConfig(**ckpt["config"]["image_encoder"])
    torch.manual_seed(0)
    encoder = build_image_encoder(cfg)
    load_module(encoder, ckpt["tensors"], "image")
    encoder.eval()
    return encoder, ckpt


def embed(encoder, images: np.ndarray, normalize: bool = True) -> np.ndarray:
    feats = encode_images(encoder, torch.from_numpy(images))
    if normalize and len(feats):
        feats = F.normalize(feats, dim=1)
    return feats.numpy().astype(np.float32)


def extract_embeddings(checkpoint_path: str | os.PathLike, records: Sequence[GeoRecord],
                       split: Optional[str] = None) -> EmbeddingDump:
    encoder, ckpt = load_image_encoder(checkpoint_path)
    recs = [r for r in records if split is None or r.split == split]
    normalize = ckpt["config"].get("losses", {}).get("normalize", True)
    vectors = embed(encoder, load_images(recs), normalize)
    if not recs:
        vectors = np.zeros((0, encoder.cfg.output_dim), dtype=np.float32)
    return EmbeddingDump([r.image_id for r in recs], vectors, ckpt["hash"])


def knn_search(queries: EmbeddingDump, database: EmbeddingDump, k: int,
               chunk: int = 256) -> List[List[str]]:
    """Top-k database ids per query by descending inner product; ties by ascending id."""
    if queries.dim != database.dim:
        raise ValueError(f"dim mismatch: queries {queries.dim}, database {database.dim}")
    if not 1 <= k <= database.count:
        raise ValueError(f"k={k} outside [1, {database.count}]")
    by_id = sorted(range(database.count), key=lambda i: database.ids[i])
    db = database.vectors[by_id]
    db_ids = np.asarray(database.ids, dtype=object)[by_id]
    out: List[List[str]] = []
    for s in range(0, queries.count, chunk):
        scores = queries.vectors[s:s + chunk] @ db.T
        # stable sort on the id-ordered database realises the id tie-break
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        out.extend(db_ids[row].tolist() for row in order)
    return out


@dataclass
class RecallReport:
    thresholds_n: List[int] = field(default_factory=lambda: [1, 5])
    positive_radius_m: float = 25.0
    r_at_n: Dict[int, float] = field(default_factory=dict)
    rankings: Dict[str, List[str]] = field(default_factory=dict)
    correct: Dict[str, List[bool]] = field(default_factory=dict)
    dataset: str = "val"
    frozen_layer_count: Optional[int] = None
    trainable_params: Optional[int] = None


def recall_at_n(rankings: Sequence[Sequence[str]], queries: Sequence[GeoRecord],
                database: Sequence[GeoRecord], thresholds_n: Sequence[int] = (1, 5),
                positive_radius_m: float = 25.0, dataset: str = "val") -> RecallReport:
    """A query is correct at n when one of its top-n matches lies within the radius."""
    if len(rankings) != len(queries):
        raise ValueError("one ranking per query expected")
    coords = {r.image_id: (r.utm_east, r.utm_north) for r in database}
    thresholds_n = sorted(set(int(n) for n in thresholds_n))
    report = RecallReport(list(thresholds_n), positive_radius_m, dataset=dataset)
    hits = np.zeros(len(thresholds_n))
    for q, ranked in zip(queries, rankings):
        if len(ranked) == 0:
            raise ValueError(f"query {q.image_id} has no database entries")
        try:
            xy = np.array([coords[i] for i in ranked], dtype=np.float64)
        except KeyError as exc:
            raise ValueError(f"ranked id {exc.args[0]} not in the database records") from None
        dist = np.hypot(xy[:, 0] - q.utm_east, xy[:, 1] - q.utm_north)
        within = (dist <= positive_radius_m).tolist()
        report.rankings[q.image_id] = list(ranked)
        report.correct[q.image_id] = within
        first = next((i for i, w in enumerate(within) if w), None)
        if first is not None:
            hits += [first < n for n in thresholds_n]
    total = len(queries)
    report.r_at_n = {n: (float(h) / total if total else 0.0) for n, h in zip(thresholds_n, hits)}
    return report


def evaluate_dumps(query_dump: EmbeddingDump, db_dump: EmbeddingDump,
                   records: Sequence[GeoRecord], thresholds_n: Sequence[int] = (1, 5),
                   positive_radius_m: float = 25.0, dataset: str = "val") -> RecallReport:
    by_id = {r.image_id: r for r in records}
    missing = [i for i in query_dump.ids + db_dump.ids if i not in by_id]
    if missing:
        raise ValueError(f"ids missing from manifest: {', '.join(missing[:10])}")
    k = min(max(thresholds_n), db_dump.count)
    ranked = knn_search(query_dump, db_dump, k) if query_dump.count else []
    return recall_at_n(ranked, [by_id[i] for i in query_dump.ids],
                       [by_id[i] for i in db_dump.ids], thresholds_n, positive_radius_m, dataset)
