"""Top-k ranking metrics, overall and stratified evaluation reports, and the
2-D projection export for representation inspection."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import InteractionDataset, StrataLabels
from .intent import IntentPrototypes, assign_intent, silhouette_score
from .model import RecDiffModel, pad_batch

SUBSET_ORDER = ("overall", "tail_item", "head_item", "cold_user", "hot_user")


def hr_at_k(ranks, k: int) -> float:
    """Fraction of ranks landing in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranks = list(ranks)
    if not ranks:
        raise ValueError("hr_at_k needs at least one rank")
    return sum(1 for r in ranks if r <= k) / len(ranks)


def ndcg_at_k(ranks, k: int) -> float:
    """Single-relevant-item NDCG: 1 / log2(rank + 1) inside the top k, else 0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranks = list(ranks)
    if not ranks:
        raise ValueError("ndcg_at_k needs at least one rank")
    return sum(1.0 / math.log2(r + 1) for r in ranks if r <= k) / len(ranks)


def compute_rank(scores: np.ndarray, target: int) -> int:
    """1-based rank of the target under descending scores; ties are broken
    toward the lower item index."""
    scores = np.asarray(scores)
    s = scores[target]
    higher = int((scores > s).sum())
    tied_before = int((scores[:target] == s).sum())
    return 1 + higher + tied_before


def ranks_from_scores(scores: np.ndarray, targets) -> list[int]:
    return [compute_rank(scores[i], t) for i, t in enumerate(targets)]


@dataclass
class SubsetMetrics:
    users: int
    hr: dict[int, float]
    ndcg: dict[int, float]


@dataclass
class EvalReport:
    ks: list[int]
    subsets: dict[str, SubsetMetrics]
    silhouette: float | None = None
    masked_train_items: bool = False

    def to_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "masked_train_items": self.masked_train_items,
            "silhouette": self.silhouette,
            "subsets": {
                name: {
                    "users": m.users,
                    "hr": {str(k): m.hr.get(k) for k in self.ks},
                    "ndcg": {str(k): m.ndcg.get(k) for k in self.ks},
                }
                for name, m in self.subsets.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def format_table(self) -> str:
        headers = {"overall": "Overall", "tail_item": "Tail Item", "head_item": "Head Item",
                   "cold_user": "Cold User", "hot_user": "Hot User"}
        cols = [name for name in SUBSET_ORDER if name in self.subsets]
        lines = []
        width = 11
        lines.append("metric".ljust(10) + "".join(headers[c].rjust(width) for c in cols))
        for k in self.ks:
            for label, attr in ((f"HR@{k}", "hr"), (f"NDCG@{k}", "ndcg")):
                cells = []
                for c in cols:
                    value = getattr(self.subsets[c], attr).get(k)
                    cells.append(("-" if value is None else f"{value:.4f}").rjust(width))
                lines.append(label.ljust(10) + "".join(cells))
        lines.append("users".ljust(10) +
                     "".join(str(self.subsets[c].users).rjust(width) for c in cols))
        if self.silhouette is not None:
            lines.append(f"silhouette {self.silhouette:.4f}")
        return "\n".join(lines) + "\n"


def _subset_metrics(ranks: list[int], ks) -> SubsetMetrics:
    if not ranks:
        return SubsetMetrics(users=0, hr={k: None for k in ks}, ndcg={k: None for k in ks})
    return SubsetMetrics(users=len(ranks),
                         hr={k: hr_at_k(ranks, k) for k in ks},
                         ndcg={k: ndcg_at_k(ranks, k) for k in ks})


def evaluate(model: RecDiffModel, ds: InteractionDataset, strata: StrataLabels,
             prototypes: IntentPrototypes | None = None, ks=(5, 10),
             mask_train_items: bool = False, compute_silhouette: bool = True,
             batch_size: int = 512) -> EvalReport:
    """Rank each user's held-out test item from the encoding of the training
    prefix plus the validation item, scored over the full vocabulary, then
    aggregate per stratum. Tail/head keys on the test item's stratum;
    cold/hot on the user's."""
    if model.num_items != ds.num_items:
        raise ValueError(f"checkpoint covers {model.num_items} items but dataset has "
                         f"{ds.num_items}: vocabulary mismatch")
    ks = sorted(ks)
    model.eval()
    all_ranks: list[int] = []
    encodings: list[np.ndarray] = []
    with torch.no_grad():
        fused = model.fused_item_embeddings()
        table = model.scoring_table(fused).cpu().numpy()
        for start in range(0, ds.num_users, batch_size):
            chunk = list(range(start, min(start + batch_size, ds.num_users)))
            seqs = [ds.train_prefix(u) + [ds.valid_item(u)] for u in chunk]
            indices, lengths = pad_batch(seqs, ds.padding_index)
            _, h = model.encode(indices, lengths, fused=fused)
            h = h.cpu().numpy()
            encodings.append(h)
            scores = h @ table.T
            for row, u in enumerate(chunk):
                target = ds.test_item(u)
                if mask_train_items:
                    row_scores = scores[row].copy()
                    for idx in ds.train_prefix(u):
                        if idx != target:
                            row_scores[idx] = -np.inf
                else:
                    row_scores = scores[row]
                all_ranks.append(compute_rank(row_scores, target))

    tail_ranks, head_ranks, cold_ranks, hot_ranks = [], [], [], []
    for u in range(ds.num_users):
        rank = all_ranks[u]
        (tail_ranks if strata.item_is_tail[ds.test_item(u)] else head_ranks).append(rank)
        (cold_ranks if strata.user_is_cold[u] else hot_ranks).append(rank)

    subsets = {
        "overall": _subset_metrics(all_ranks, ks),
        "tail_item": _subset_metrics(tail_ranks, ks),
        "head_item": _subset_metrics(head_ranks, ks),
        "cold_user": _subset_metrics(cold_ranks, ks),
        "hot_user": _subset_metrics(hot_ranks, ks),
    }

    silhouette = None
    if compute_silhouette and prototypes is not None and ds.num_users >= 3:
        points = np.concatenate(encodings, axis=0).astype(np.float64)
        labels, _ = assign_intent(points, prototypes)
        if len(np.unique(labels)) >= 2:
            silhouette = silhouette_score(points, labels)

    return EvalReport(ks=list(ks), subsets=subsets, silhouette=silhouette,
                      masked_train_items=mask_train_items)


def export_projection(encodings: np.ndarray, method: str = "pca2d") -> np.ndarray:
    """Deterministic 2-D PCA coordinates (component signs are fixed by making
    each component's largest-magnitude loading positive)."""
    if method != "pca2d":
        raise ValueError(f"unknown projection method {method!r} (only 'pca2d')")
    points = np.asarray(encodings, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 3:
        raise ValueError(f"projection needs at least 3 points, got shape {points.shape}")
    if points.shape[1] < 2:
        raise ValueError("projection needs at least 2 input dimensions")
    centered = points - points.mean(axis=0, keepdims=True)
    if not np.any(np.abs(centered) > 0):
        raise ValueError("degenerate covariance: all points are identical")
    cov = centered.T @ centered / (points.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    basis = eigvecs[:, order]
    for j in range(basis.shape[1]):
        pivot = int(np.abs(basis[:, j]).argmax())
        if basis[pivot, j] < 0:
            basis[:, j] = -basis[:, j]
    return centered @ basis


def write_projection_csv(coords: np.ndarray, labels, path: str | Path) -> None:
    coords = np.asarray(coords)
    labels = list(labels) if labels is not None else [0] * coords.shape[0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y,cluster\n")
        for (x, y), label in zip(coords, labels):
            fh.write(f"{float(x)!r},{float(y)!r},{label}\n")
