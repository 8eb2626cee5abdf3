"""Descriptor similarity, ranking, and retrieval metrics.

The similarity of two descriptors is their channel-wise scalar product with
each side scaled by a per-image normalization term (the reciprocal root of
its own energy), i.e. cosine similarity of the pooled vectors. A literal
variant that multiplies by the root energies instead of dividing is kept
behind a flag for auditing; it is not ranking-equivalent and nothing in the
pipeline uses it.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pooling import Descriptor, load_descriptor, save_descriptor
from .tensor import GradientTape, TapeEntry, register_backward

# Below this, a descriptor is treated as degenerate (zero norm): similarity 0.
ZERO_NORM_TOL = 1e-12


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Descriptor) else np.asarray(x, dtype=np.float64)


def similarity(x, y, normalization: str = "reciprocal") -> float:
    """Similarity of two descriptors (Descriptor objects or plain vectors).

    "reciprocal" divides the scalar product by both root energies (cosine,
    self-similarity 1); "literal" multiplies by them instead, for audit only.
    Zero-norm descriptors get similarity 0 with a degenerate-descriptor
    warning.
    """
    u, v = _values(x), _values(y)
    if u.ndim != 1 or v.ndim != 1:
        raise ValueError("similarity compares pooled descriptor vectors; pool feature "
                         "maps first (sqp_pool / rmac_pool)")
    if u.shape != v.shape:
        raise ValueError(f"descriptor lengths differ: {u.shape} vs {v.shape}")
    if isinstance(x, Descriptor) and isinstance(y, Descriptor) and x.kind != y.kind:
        raise ValueError(f"pooling kinds differ: {x.kind} vs {y.kind}")
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu < ZERO_NORM_TOL or nv < ZERO_NORM_TOL:
        warnings.warn("degenerate zero-norm descriptor; similarity defined as 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    dot = float(u @ v)
    if normalization == "reciprocal":
        return dot / (nu * nv)
    if normalization == "literal":
        return dot * nu * nv
    raise ValueError(f"unknown normalization {normalization!r}")


def similarity_op(u: np.ndarray, v: np.ndarray, tape: GradientTape) -> np.ndarray:
    """Tape-recorded normalized similarity of two descriptor vectors.

    Returns a 0-d array so the hinge loss can consume it on the same tape.
    """
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    degenerate = nu < ZERO_NORM_TOL or nv < ZERO_NORM_TOL
    if degenerate:
        warnings.warn("degenerate zero-norm descriptor; similarity defined as 0",
                      RuntimeWarning, stacklevel=2)
        k = 0.0
    else:
        k = float(u @ v) / (nu * nv)
    out = np.array(k)
    tape.record("similarity", (u, v), out,
                {"nu": nu, "nv": nv, "k": k, "degenerate": degenerate})
    return out


def _similarity_backward(entry: TapeEntry, upstream: np.ndarray):
    u, v = entry.inputs
    if entry.ctx["degenerate"]:
        return np.zeros_like(u), np.zeros_like(v)
    nu, nv, k = entry.ctx["nu"], entry.ctx["nv"], entry.ctx["k"]
    g = float(upstream)
    du = g * (v / (nu * nv) - k * u / (nu * nu))
    dv = g * (u / (nu * nv) - k * v / (nv * nv))
    return du, dv


register_backward("similarity", _similarity_backward)


# ---------------------------------------------------------------------------
# Index and ranking
# ---------------------------------------------------------------------------

@dataclass
class IndexEntry:
    item_id: str
    descriptor: Descriptor
    label: int


@dataclass
class DescriptorIndex:
    entries: list[IndexEntry]

    def __post_init__(self):
        ids = [e.item_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate item ids in index")
        if self.entries:
            kind = self.entries[0].descriptor.kind
            length = self.entries[0].descriptor.values.shape[0]
            for e in self.entries:
                if e.descriptor.kind != kind:
                    raise ValueError(f"index mixes pooling kinds ({kind} and {e.descriptor.kind})")
                if e.descriptor.values.shape[0] != length:
                    raise ValueError("index mixes descriptor lengths")

    @property
    def kind(self) -> str | None:
        return self.entries[0].descriptor.kind if self.entries else None

    def labels(self) -> dict[str, int]:
        return {e.item_id: e.label for e in self.entries}

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        for e in self.entries:
            save_descriptor(e.descriptor, e.item_id, directory)
        (directory / "labels.json").write_text(
            json.dumps({e.item_id: e.label for e in self.entries}, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "DescriptorIndex":
        directory = Path(directory)
        labels = json.loads((directory / "labels.json").read_text())
        entries = [IndexEntry(item_id, load_descriptor(item_id, directory), int(label))
                   for item_id, label in sorted(labels.items())]
        return cls(entries=entries)


def rank(query: Descriptor, index: DescriptorIndex, exclude_id: str | None = None) -> list[str]:
    """Item ids sorted by similarity to the query, best first.

    Ties break by item id ascending; `exclude_id` (normally the query's own
    id) is dropped from the ranking.
    """
    scored = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # degenerate entries rank by id
        for e in index.entries:
            if exclude_id is not None and e.item_id == exclude_id:
                continue
            scored.append((-similarity(query, e.descriptor), e.item_id))
    scored.sort()
    return [item_id for _, item_id in scored]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def average_precision(ranking: list[str], relevant: set[str]) -> float:
    """Mean of precision-at-hit over the relevant set; absentees count 0."""
    if not relevant:
        raise ValueError("relevant set must be nonempty")
    hits = 0
    total = 0.0
    for pos, item_id in enumerate(ranking, start=1):
        if item_id in relevant:
            hits += 1
            total += hits / pos
    return total / len(relevant)


def recall4(ranking: list[str], relevant: set[str]) -> int:
    """Count of relevant items in the top 4 positions (0..4)."""
    return sum(1 for item_id in ranking[:4] if item_id in relevant)


@dataclass
class EvalResult:
    per_query_ap: dict[str, float]
    per_query_recall4: dict[str, int]
    query_count: int
    mean_ap: float = field(init=False)
    mean_recall4: float | None = field(init=False)

    def __post_init__(self):
        aps = list(self.per_query_ap.values())
        self.mean_ap = float(np.mean(aps)) if aps else 0.0
        counts = list(self.per_query_recall4.values())
        self.mean_recall4 = float(np.mean(counts)) if counts else None

    def to_json(self) -> str:
        return json.dumps({
            "mean_ap": self.mean_ap,
            "recall4": self.mean_recall4,
            "query_count": self.query_count,
            "per_query_ap": self.per_query_ap,
            "per_query_recall4": self.per_query_recall4,
        }, indent=2)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query", "ap", "recall4"])
            for qid in sorted(self.per_query_ap):
                r4 = self.per_query_recall4.get(qid, "")
                writer.writerow([qid, f"{self.per_query_ap[qid]:.12g}", r4])
            writer.writerow(["mean", f"{self.mean_ap:.12g}",
                             "" if self.mean_recall4 is None else f"{self.mean_recall4:.12g}"])


def evaluate(index: DescriptorIndex, queries: list[tuple[str, Descriptor, set[str]]]) -> EvalResult:
    """Rank every (query id, descriptor, relevant ids) against the index.

    mAP aggregates over all queries; the recall@4 score only over queries
    whose relevant set has exactly 4 items (others are excluded with a
    warning, following the 4-per-query benchmark convention).
    """
    per_ap: dict[str, float] = {}
    per_r4: dict[str, int] = {}
    for qid, desc, relevant in queries:
        ranking = rank(desc, index, exclude_id=qid)
        per_ap[qid] = average_precision(ranking, relevant)
        if len(relevant) == 4:
            per_r4[qid] = recall4(ranking, relevant)
        else:
            warnings.warn(f"query {qid!r} has {len(relevant)} relevant items, not 4; "
                          "excluded from the recall@4 aggregate", RuntimeWarning, stacklevel=2)
    return EvalResult(per_query_ap=per_ap, per_query_recall4=per_r4, query_count=len(queries))
