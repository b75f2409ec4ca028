"""Embedding extraction, Euclidean retrieval, CMC and mAP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import archive
from .data.render import to_grayscale
from .errors import ConfigError, EvaluationError
from .models import ModelBundle, shape_encode

MODALITIES = ("rgb", "gray")
CLOTHING_MODES = ("any", "same", "changed")
_CODE = {"r": "rgb", "g": "gray"}


@dataclass(frozen=True)
class Protocol:
    """Query/gallery modalities plus junk rules.

    ``clothing`` restricts which same-identity gallery images count:
    ``same`` keeps only the query's outfit, ``changed`` only other outfits,
    ``any`` keeps both. Excluded same-identity images are dropped from the
    ranking, as are same-identity same-view images when
    ``same_view_exclusion`` is on.
    """

    query_modality: str = "rgb"
    gallery_modality: str = "rgb"
    same_view_exclusion: bool = True
    clothing: str = "any"

    def __post_init__(self):
        if self.query_modality not in MODALITIES or self.gallery_modality not in MODALITIES:
            raise ConfigError(f"modalities must be in {MODALITIES}")
        if self.clothing not in CLOTHING_MODES:
            raise ConfigError(f"clothing mode must be in {CLOTHING_MODES}, got {self.clothing!r}")

    @classmethod
    def parse(cls, text: str, same_view_exclusion: bool = True) -> "Protocol":
        """``rr``, ``gr``, ``rg``, ``gg``, optionally suffixed ``:same`` / ``:changed``."""
        code, _, clothing = text.partition(":")
        if len(code) != 2 or any(c not in _CODE for c in code):
            raise ConfigError(f"unknown protocol {text!r}; expected rr, gr, rg or gg (optionally ':same'/':changed')")
        return cls(_CODE[code[0]], _CODE[code[1]], same_view_exclusion, clothing or "any")

    @property
    def name(self) -> str:
        code = self.query_modality[0] + self.gallery_modality[0]
        return code if self.clothing == "any" else f"{code}:{self.clothing}"

    def to_dict(self) -> dict:
        return {"name": self.name, "query_modality": self.query_modality,
                "gallery_modality": self.gallery_modality,
                "same_view_exclusion": self.same_view_exclusion, "clothing": self.clothing}


@dataclass
class EmbeddingTable:
    features: np.ndarray
    identity_id: np.ndarray
    clothing_id: np.ndarray
    view_id: np.ndarray
    modality: str
    pose_id: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.features)
        for name in ("identity_id", "clothing_id", "view_id"):
            if len(getattr(self, name)) != n:
                raise EvaluationError(f"{name} has {len(getattr(self, name))} rows, features have {n}")
        if not np.isfinite(self.features).all():
            raise EvaluationError("embedding table contains non-finite features")

    def __len__(self):
        return len(self.features)

    def save(self, path) -> None:
        recs = {
            "features": self.features,
            "identity_id": self.identity_id.astype(np.int64),
            "clothing_id": self.clothing_id.astype(np.int64),
            "view_id": self.view_id.astype(np.int64),
            "modality": np.frombuffer(self.modality.encode(), dtype=np.uint8),
        }
        if self.pose_id is not None:
            recs["pose_id"] = self.pose_id.astype(np.int64)
        archive.save(path, recs)

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        r = archive.load(path)
        return cls(r["features"], r["identity_id"], r["clothing_id"], r["view_id"],
                   bytes(r["modality"]).decode(), r.get("pose_id"))


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    protocol: Protocol
    n_query: int
    n_gallery: int
    dropped_queries: int = 0
    extra: dict = field(default_factory=dict)

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol.name,
            "protocol_detail": self.protocol.to_dict(),
            "cmc": [float(v) for v in self.cmc],
            "map": float(self.map),
            "rank1": self.rank(1), "rank5": self.rank(5), "rank10": self.rank(10),
            "n_query": self.n_query,
            "n_gallery": self.n_gallery,
            "dropped_queries": self.dropped_queries,
        }


def embed(bundle: ModelBundle, manifest, split: str, modality: str = "rgb", batch_size: int = 256,
          normalize: bool = False) -> EmbeddingTable:
    """Shape-feature vectors for every image of a split."""
    if modality not in MODALITIES:
        raise ConfigError(f"unknown modality {modality!r}")
    recs = manifest.records(split)
    if not recs:
        raise EvaluationError(f"split {split!r} is empty")
    images = torch.from_numpy(manifest.images(split))
    return embed_images(bundle, images, recs, modality, batch_size, normalize)


def embed_images(bundle, images, recs, modality="rgb", batch_size=256, normalize=False) -> EmbeddingTable:
    was_training = bundle.training
    bundle.eval()
    chunks = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = images[i:i + batch_size]
            if modality == "gray":
                x = to_grayscale(x)
            chunks.append(shape_encode(bundle, x).vector.double().numpy())
    bundle.train(was_training)
    feats = np.concatenate(chunks)
    if normalize:
        feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    return EmbeddingTable(
        features=feats,
        identity_id=np.array([r.identity_id for r in recs]),
        clothing_id=np.array([r.clothing_id for r in recs]),
        view_id=np.array([r.view_id for r in recs]),
        modality=modality,
        pose_id=np.array([r.pose_id for r in recs]),
    )


def exclusion_mask(identity_id: int, clothing_id: int, view_id: int, gallery: EmbeddingTable,
                   protocol: Protocol) -> np.ndarray:
    """Boolean mask of gallery rows removed from this query's ranking."""
    same_id = gallery.identity_id == identity_id
    drop = np.zeros(len(gallery), dtype=bool)
    if protocol.same_view_exclusion:
        drop |= same_id & (gallery.view_id == view_id)
    if protocol.clothing == "same":
        drop |= same_id & (gallery.clothing_id != clothing_id)
    elif protocol.clothing == "changed":
        drop |= same_id & (gallery.clothing_id == clothing_id)
    return drop


def rank_gallery(query: np.ndarray, gallery_features: np.ndarray, exclude: np.ndarray | None = None) -> np.ndarray:
    """Gallery indices by ascending Euclidean distance; ties go to the lower index."""
    diff = gallery_features - query[None, :]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.argsort(dist, kind="stable")
    if exclude is not None:
        order = order[~exclude[order]]
    return order


def retrieve(query: np.ndarray, gallery: EmbeddingTable, k: int | None = None,
             exclude: np.ndarray | None = None) -> np.ndarray:
    """Top-``k`` gallery indices for one query feature vector."""
    order = rank_gallery(np.asarray(query, dtype=np.float64), gallery.features, exclude)
    if len(order) == 0:
        raise EvaluationError("gallery is empty after exclusions")
    if k is None:
        return order
    if k > len(order):
        raise EvaluationError(f"k={k} exceeds the {len(order)} gallery items left after exclusions")
    return order[:k]


def _hits(rank_lists, relevance):
    out = []
    for ranks, rel in zip(rank_lists, relevance):
        rel = np.asarray(rel, dtype=bool)
        out.append(rel[np.asarray(ranks, dtype=np.int64)])
    return out


def valid_queries(rank_lists, relevance) -> np.ndarray:
    """Mask of queries with at least one relevant item in their ranked list."""
    return np.array([h.any() for h in _hits(rank_lists, relevance)], dtype=bool)


def cmc(rank_lists, relevance, max_rank: int | None = None) -> np.ndarray:
    """Rank-k accuracy for k = 1..max_rank over queries with a relevant item.

    ``rank_lists[q]`` holds gallery indices in ranked order;
    ``relevance[q]`` is a boolean vector over all gallery indices.
    """
    hits = [h for h in _hits(rank_lists, relevance) if h.any()]
    if not hits:
        raise EvaluationError("no query has a relevant gallery item")
    if max_rank is None:
        max_rank = max(len(h) for h in hits)
    curve = np.zeros(max_rank)
    for h in hits:
        first = int(np.argmax(h))
        if first < max_rank:
            curve[first:] += 1
    return curve / len(hits)


def average_precision(hits: np.ndarray) -> float:
    hits = np.asarray(hits, dtype=bool)
    n_rel = hits.sum()
    if n_rel == 0:
        raise EvaluationError("average precision needs at least one relevant item")
    positions = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_rel + 1) / positions
    return float(precision.mean())


def mean_average_precision(rank_lists, relevance) -> float:
    hits = [h for h in _hits(rank_lists, relevance) if h.any()]
    if not hits:
        raise EvaluationError("no query has a relevant gallery item")
    return float(np.mean([average_precision(h) for h in hits]))


def evaluate_tables(query: EmbeddingTable, gallery: EmbeddingTable, protocol: Protocol,
                    max_rank: int = 50) -> EvalReport:
    rank_lists, relevance = [], []
    for i in range(len(query)):
        pid, cid, vid = query.identity_id[i], query.clothing_id[i], query.view_id[i]
        excl = exclusion_mask(pid, cid, vid, gallery, protocol)
        rank_lists.append(rank_gallery(query.features[i], gallery.features, excl))
        relevance.append(gallery.identity_id == pid)
    valid = valid_queries(rank_lists, relevance)
    curve = cmc(rank_lists, relevance, max_rank=min(max_rank, len(gallery)))
    mAP = mean_average_precision(rank_lists, relevance)
    return EvalReport(curve, mAP, protocol, int(valid.sum()), len(gallery), int((~valid).sum()))


def evaluate(bundle: ModelBundle, manifest, protocol: Protocol, normalize: bool = False,
             max_rank: int = 50, cache: dict | None = None) -> EvalReport:
    """Embed query and gallery under the protocol's modalities, rank, score.

    ``cache`` (keyed by (split, modality)) lets several protocols share embeddings.
    """
    cache = {} if cache is None else cache

    def table(split, modality):
        key = (split, modality)
        if key not in cache:
            cache[key] = embed(bundle, manifest, split, modality, normalize=normalize)
        return cache[key]

    return evaluate_tables(table("query", protocol.query_modality), table("gallery", protocol.gallery_modality),
                           protocol, max_rank=max_rank)
