"""Retrieval metrics and inference-time post-processing for re-ID embeddings."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import ContractViolation


class ParameterError(ValueError):
    pass


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), eps)


def pairwise_distances(query: np.ndarray, gallery: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Euclidean distance matrix ``(|Q|, |G|)``, rows L2-normalized first by default."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ContractViolation(f"feature dimensions differ: {query.shape} vs {gallery.shape}")
    if normalize:
        query, gallery = l2_normalize(query), l2_normalize(gallery)
    d2 = (query ** 2).sum(1)[:, None] + (gallery ** 2).sum(1)[None, :] - 2.0 * query @ gallery.T
    return np.sqrt(np.maximum(d2, 0.0))


@dataclass
class EvalReport:
    mAP: float
    cmc: list[float]
    max_rank: int | None
    truncated_mAP: float | None = None
    num_queries: int = 0
    num_valid_queries: int = 0
    protocol: dict = field(default_factory=dict)

    @property
    def rank1(self) -> float:
        return self.cmc[0]

    @property
    def rank5(self) -> float:
        return self.cmc[min(4, len(self.cmc) - 1)]

    def to_dict(self) -> dict:
        out = {"mAP": self.mAP, "rank1": self.rank1, "rank5": self.rank5}
        if self.max_rank is not None:
            out[f"rank{self.max_rank}_mAP"] = self.truncated_mAP
        out.update(num_queries=self.num_queries, num_valid_queries=self.num_valid_queries,
                   skipped_queries=self.num_queries - self.num_valid_queries,
                   cmc=self.cmc, max_rank=self.max_rank, protocol=self.protocol)
        return out

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def compute_cmc_map(distmat: np.ndarray, q_ids, g_ids, q_cams, g_cams, max_rank: int | None = None,
                    exclude_same_camera: bool = True, protocol: dict | None = None) -> EvalReport:
    """CMC curve and mAP over a query x gallery distance matrix.

    Gallery entries sharing both identity and camera with the query are
    dropped. Ranking is by ascending distance with ties broken by gallery
    index. ``max_rank`` truncates the ranked list for ``truncated_mAP`` (the
    positives' count in the denominator is not truncated) and the CMC length;
    ``mAP`` is always over the full list.
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    num_q, num_g = distmat.shape
    if len(q_ids) != num_q or len(q_cams) != num_q or len(g_ids) != num_g or len(g_cams) != num_g:
        raise ContractViolation("metadata lengths do not match the distance matrix")
    cmc_len = num_g if max_rank is None else min(max_rank, num_g)

    order = np.argsort(distmat, axis=1, kind="stable")
    all_cmc, all_ap, all_trunc = [], [], []
    for qi in range(num_q):
        ranked = order[qi]
        if exclude_same_camera:
            keep = ~((g_ids[ranked] == q_ids[qi]) & (g_cams[ranked] == q_cams[qi]))
            ranked = ranked[keep]
        hits = (g_ids[ranked] == q_ids[qi]).astype(np.float64)
        num_rel = hits.sum()
        if num_rel == 0:
            continue
        cum = np.cumsum(hits)
        curve = np.zeros(cmc_len)
        first = int(np.argmax(hits))
        curve[first:] = 1.0
        all_cmc.append(curve)
        precision = cum / np.arange(1, len(hits) + 1)
        all_ap.append(float((precision * hits).sum() / num_rel))
        if max_rank is not None:
            all_trunc.append(float((precision[:max_rank] * hits[:max_rank]).sum() / num_rel))

    if not all_ap:
        raise ContractViolation("no query has a valid positive in the gallery")
    proto = {"distance": "euclidean-l2normalized", "exclude_same_camera": exclude_same_camera,
             "truncation": max_rank}
    proto.update(protocol or {})
    return EvalReport(
        mAP=float(np.mean(all_ap)),
        cmc=[float(v) for v in np.mean(all_cmc, axis=0)],
        max_rank=max_rank,
        truncated_mAP=float(np.mean(all_trunc)) if max_rank is not None else None,
        num_queries=num_q,
        num_valid_queries=len(all_ap),
        protocol=proto,
    )


def track_compress(gallery: np.ndarray, track_ids) -> np.ndarray:
    """Replace every row by the mean of the rows sharing its track id.

    Tracks whose rows are already identical are left untouched, which makes the
    operation exactly idempotent despite floating-point rounding in the mean.
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    track_ids = np.asarray(track_ids)
    if len(track_ids) != len(gallery):
        raise ContractViolation("track ids must cover every gallery row")
    if track_ids.dtype.kind in "OUS" and any(str(t) == "" for t in track_ids):
        raise ContractViolation("empty track id")
    uniq, inverse = np.unique(track_ids, return_inverse=True)
    out = np.empty_like(gallery)
    for t in range(len(uniq)):
        rows = np.flatnonzero(inverse == t)
        block = gallery[rows]
        out[rows] = block[0] if np.all(block == block[0]) else block.mean(axis=0)
    return out


def _reciprocal_neighbors(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, :k + 1]
    backward = initial_rank[forward, :k + 1]
    return forward[np.where(backward == i)[0]]


def rerank_base_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Query-to-all squared distance on L2-normalized features, each row scaled by its maximum."""
    feats = l2_normalize(np.concatenate([query, gallery]))
    d = pairwise_distances(feats, feats, normalize=False) ** 2
    return (d / d.max(axis=1, keepdims=True))


def k_reciprocal_rerank(query: np.ndarray, gallery: np.ndarray, k1: int = 20, k2: int = 6,
                        lambda_value: float = 0.3) -> np.ndarray:
    """k-reciprocal re-ranked query x gallery distances.

    Returns ``lambda * original + (1 - lambda) * jaccard`` where ``original`` is
    :func:`rerank_base_distances` restricted to query rows and gallery columns.
    """
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    num_q = len(query)
    n = num_q + len(gallery)
    if not (k1 > k2 >= 1):
        raise ParameterError(f"need k1 > k2 >= 1, got k1={k1}, k2={k2}")
    if k1 >= n:
        raise ParameterError(f"k1={k1} must be smaller than the number of samples ({n})")
    if not 0.0 <= lambda_value <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lambda_value}")

    original = rerank_base_distances(query, gallery)
    initial_rank = np.argsort(original, axis=1, kind="stable")
    half = int(round(k1 / 2))

    V = np.zeros((n, n))
    for i in range(n):
        reciprocal = _reciprocal_neighbors(initial_rank, i, k1)
        expansion = reciprocal
        for candidate in reciprocal:
            cand = _reciprocal_neighbors(initial_rank, candidate, half)
            if len(np.intersect1d(cand, reciprocal)) > 2.0 / 3.0 * len(cand):
                expansion = np.append(expansion, cand)
        expansion = np.unique(expansion)
        weight = np.exp(-original[i, expansion])
        V[i, expansion] = weight / weight.sum()

    if k2 != 1:
        V = np.stack([V[initial_rank[i, :k2]].mean(axis=0) for i in range(n)])

    inv_index = [np.where(V[:, j] != 0)[0] for j in range(n)]
    jaccard = np.zeros((num_q, n))
    for i in range(num_q):
        overlap = np.zeros(n)
        nonzero = np.where(V[i] != 0)[0]
        for j in nonzero:
            rows = inv_index[j]
            overlap[rows] += np.minimum(V[i, j], V[rows, j])
        jaccard[i] = 1.0 - overlap / (2.0 - overlap)

    final = lambda_value * original[:num_q] + (1.0 - lambda_value) * jaccard
    return final[:, num_q:]


@dataclass
class EvalProtocol:
    normalize: bool = True
    exclude_same_camera: bool = True
    max_rank: int | None = 100
    track_compress: bool = False
    rerank: bool = False
    k1: int = 8
    k2: int = 3
    lambda_value: float = 0.3

    def describe(self) -> dict:
        return asdict(self)


def evaluate_features(q_feats, g_feats, q_ids, g_ids, q_cams, g_cams, g_tracks=None,
                      protocol: EvalProtocol | None = None) -> EvalReport:
    """Optional track compression, then optional re-ranking, then CMC/mAP."""
    protocol = protocol or EvalProtocol()
    g_feats = np.asarray(g_feats, dtype=np.float64)
    if protocol.track_compress:
        if g_tracks is None:
            raise ContractViolation("track compression needs gallery track ids")
        g_feats = track_compress(g_feats, g_tracks)
    if protocol.rerank:
        distmat = k_reciprocal_rerank(q_feats, g_feats, protocol.k1, protocol.k2, protocol.lambda_value)
    else:
        distmat = pairwise_distances(q_feats, g_feats, normalize=protocol.normalize)
    distance = "k-reciprocal" if protocol.rerank else (
        "euclidean-l2normalized" if protocol.normalize else "euclidean")
    return compute_cmc_map(distmat, q_ids, g_ids, q_cams, g_cams, protocol.max_rank,
                           protocol.exclude_same_camera,
                           protocol={**protocol.describe(), "distance": distance,
                                     "ap_truncation": "ranked list only"})


def save_embeddings(path, features: np.ndarray, records) -> None:
    """Flat little-endian float64 matrix plus a ``.tsv`` sample list and shape header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    features = np.ascontiguousarray(features, dtype="<f8")
    features.tofile(path)
    lines = [f"# rows={features.shape[0]} dim={features.shape[1]} dtype=float64-le",
             "path\tid\tcamera\ttrack"]
    lines += [f"{r.path}\t{r.id}\t{r.camera}\t{r.track}" for r in records]
    path.with_suffix(".tsv").write_text("\n".join(lines) + "\n")


def load_embeddings(path) -> tuple[np.ndarray, list[dict]]:
    path = Path(path)
    lines = path.with_suffix(".tsv").read_text().splitlines()
    header = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
    rows, dim = int(header["rows"]), int(header["dim"])
    feats = np.fromfile(path, dtype="<f8")
    if feats.size != rows * dim:
        raise ContractViolation(f"{path}: expected {rows}x{dim} values, found {feats.size}")
    names = lines[1].split("\t")
    samples = [dict(zip(names, line.split("\t"))) for line in lines[2:]]
    for s in samples:
        for k in ("id", "camera", "track"):
            s[k] = int(s[k])
    return feats.reshape(rows, dim), samples
