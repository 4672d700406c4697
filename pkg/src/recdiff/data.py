"""Interaction ingestion, five-core filtering, leave-one-out splitting,
popularity/activity strata, and per-dataset prompt rendering.

Canonical dataset file: JSON with item/user vocabularies and per-user dense
index sequences (last two positions are the validation and test items).
Prompt records: JSON-lines `{"item_index": int, "prompt": str}`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .config import ConfigError

DATASET_FORMAT_TAG = "recdiff-dataset-v1"

# Slot substitution uses case-insensitive attribute keys; a missing attribute
# renders as the literal string "unknown".
PROMPT_TEMPLATES = {
    "beauty": (
        "The beauty item has following attributes: \n name is {title}; "
        "brand is {brand}; price is {price}. \n The item has following "
        "features: {categories}. \n The item has following descriptions: {description}."
    ),
    "sports": (
        "The Sports and Outdoors item has following attributes: \n name is {title}; "
        "brand is {brand}; price is {price}. \n The item has following "
        "features: {categories}. \n The item has following descriptions: {description}."
    ),
    "toys": (
        "The Toys & Games item has following attributes: \n name is {title}; "
        "brand is {brand}; price is {price}. \n The item has following "
        "features: {categories}. \n The item has following descriptions: {description}."
    ),
    "yelp": (
        "The point of interest has the following attributes: \n name is {name}; "
        "category is {category}; type is {type}; open status is {open}; "
        "review count is {count}; city is {city}; average score is {stars}."
    ),
    "ml1m": (
        "The movie item has following attributes: \n Title: {title} \n "
        "Genres: {genres} \n Year: {year}"
    ),
}

DEFAULT_MAX_LEN = {"beauty": 50, "sports": 50, "toys": 50, "yelp": 50, "ml1m": 200}


class DataFormatError(ValueError):
    """Raised for malformed input rows or files (message carries line context)."""


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class InteractionDataset:
    """Filtered, split per-user sequences over dense indices.

    `sequences[u]` is user u's chronological item-index sequence; the last
    position is the test item, the second-to-last the validation item, and
    everything before is the training prefix. The padding sentinel is
    `len(item_vocab)`; index 0 is a real item.
    """

    item_vocab: list[str]
    user_vocab: list[str]
    sequences: list[list[int]]
    min_count: int = 5
    max_len: int = 50

    @property
    def num_items(self) -> int:
        return len(self.item_vocab)

    @property
    def num_users(self) -> int:
        return len(self.user_vocab)

    @property
    def padding_index(self) -> int:
        return len(self.item_vocab)

    def train_prefix(self, u: int) -> list[int]:
        return self.sequences[u][:-2]

    def valid_item(self, u: int) -> int:
        return self.sequences[u][-2]

    def test_item(self, u: int) -> int:
        return self.sequences[u][-1]


@dataclass
class StrataLabels:
    item_is_tail: list[bool]
    user_is_cold: list[bool]
    tail_fraction: float = 0.2
    cold_threshold: int = 5


@dataclass(frozen=True)
class PromptRecord:
    item_index: int
    prompt: str


def load_interactions(path: str | Path, fmt: str | None = None) -> list[Interaction]:
    """Read raw interactions in file order; no filtering or sorting.

    CSV needs a `user,item,timestamp` header; JSON-lines needs the same keys.
    A missing timestamp column falls back to the row's file ordinal.
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"input file not found: {path}")
    if fmt is None:
        fmt = {".csv": "csv", ".jsonl": "jsonl", ".json": "jsonl"}.get(path.suffix.lower())
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "jsonl":
        return _load_jsonl(path)
    raise ConfigError(f"unknown interaction format {fmt!r} (expected 'csv' or 'jsonl')")


def _parse_timestamp(raw, line_no: int, ordinal: int) -> int:
    if raw is None or raw == "":
        return ordinal
    try:
        return int(float(raw))
    except (TypeError, ValueError):
        raise DataFormatError(f"line {line_no}: invalid timestamp {raw!r}") from None


def _load_csv(path: Path) -> list[Interaction]:
    rows: list[Interaction] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        cols = {name.strip().lower(): i for i, name in enumerate(header)}
        for required in ("user", "item"):
            if required not in cols:
                raise DataFormatError(f"line 1: missing column {required}")
        ts_col = cols.get("timestamp")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            for name in ("user", "item"):
                if cols[name] >= len(row) or not row[cols[name]].strip():
                    raise DataFormatError(f"line {line_no}: missing field {name}")
            ts_raw = row[ts_col] if ts_col is not None and ts_col < len(row) else None
            rows.append(Interaction(
                user_id=row[cols["user"]].strip(),
                item_id=row[cols["item"]].strip(),
                timestamp=_parse_timestamp(ts_raw, line_no, len(rows)),
            ))
    return rows


def _load_jsonl(path: Path) -> list[Interaction]:
    rows: list[Interaction] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                raise DataFormatError(f"line {line_no}: invalid JSON") from None
            for name in ("user", "item"):
                if name not in obj or obj[name] in ("", None):
                    raise DataFormatError(f"line {line_no}: missing field {name}")
            rows.append(Interaction(
                user_id=str(obj["user"]),
                item_id=str(obj["item"]),
                timestamp=_parse_timestamp(obj.get("timestamp"), line_no, len(rows)),
            ))
    return rows


def build_dataset(rows: Iterable[Interaction], min_count: int = 5,
                  max_len: int = 50) -> InteractionDataset:
    """Iterated five-core style filter, then per-user leave-one-out split.

    Users and items with fewer than `min_count` interactions are removed
    repeatedly until a fixed point. Surviving per-user sequences are ordered
    by (timestamp, input order), truncated to the most recent `max_len + 2`
    interactions, and split so the last item is test, the second-to-last is
    validation, and the rest is the training prefix. Users left with fewer
    than 3 interactions are dropped.
    """
    if min_count < 1:
        raise ConfigError(f"min_count must be >= 1, got {min_count}")
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")

    indexed = [(order, r) for order, r in enumerate(rows)]
    for _, r in indexed:
        if not r.user_id or not r.item_id:
            raise DataFormatError("interaction with empty user or item id")

    kept = indexed
    while True:
        user_counts: dict[str, int] = {}
        item_counts: dict[str, int] = {}
        for _, r in kept:
            user_counts[r.user_id] = user_counts.get(r.user_id, 0) + 1
            item_counts[r.item_id] = item_counts.get(r.item_id, 0) + 1
        filtered = [(o, r) for o, r in kept
                    if user_counts[r.user_id] >= min_count and item_counts[r.item_id] >= min_count]
        if len(filtered) == len(kept):
            break
        kept = filtered
    if not kept:
        raise DataFormatError("dataset empty after filtering")

    by_user: dict[str, list[tuple[int, Interaction]]] = {}
    user_order: list[str] = []
    for o, r in kept:
        if r.user_id not in by_user:
            by_user[r.user_id] = []
            user_order.append(r.user_id)
        by_user[r.user_id].append((o, r))

    # Vocabulary over all surviving rows (pre-truncation), first appearance order.
    item_vocab: list[str] = []
    item_index: dict[str, int] = {}
    for _, r in kept:
        if r.item_id not in item_index:
            item_index[r.item_id] = len(item_vocab)
            item_vocab.append(r.item_id)

    user_vocab: list[str] = []
    sequences: list[list[int]] = []
    for uid in user_order:
        entries = sorted(by_user[uid], key=lambda pair: (pair[1].timestamp, pair[0]))
        seq = [item_index[r.item_id] for _, r in entries][-(max_len + 2):]
        if len(seq) < 3:
            continue
        user_vocab.append(uid)
        sequences.append(seq)
    if not sequences:
        raise DataFormatError("dataset empty after filtering")

    return InteractionDataset(item_vocab=item_vocab, user_vocab=user_vocab,
                              sequences=sequences, min_count=min_count, max_len=max_len)


def compute_strata(ds: InteractionDataset, tail_fraction: float = 0.2,
                   cold_threshold: int = 5) -> StrataLabels:
    """Tail items are the floor(tail_fraction * |I|) least popular items by
    training-prefix count (ties broken toward lower dense index); cold users
    have training prefixes of length <= cold_threshold."""
    if not (0.0 < tail_fraction < 1.0):
        raise ConfigError(f"tail_fraction must be in (0, 1), got {tail_fraction}")
    if cold_threshold < 1:
        raise ConfigError(f"cold_threshold must be >= 1, got {cold_threshold}")

    counts = [0] * ds.num_items
    for u in range(ds.num_users):
        for idx in ds.train_prefix(u):
            counts[idx] += 1
    quota = int(tail_fraction * ds.num_items)
    order = sorted(range(ds.num_items), key=lambda i: (counts[i], i))
    item_is_tail = [False] * ds.num_items
    for idx in order[:quota]:
        item_is_tail[idx] = True

    user_is_cold = [len(ds.train_prefix(u)) <= cold_threshold for u in range(ds.num_users)]
    return StrataLabels(item_is_tail=item_is_tail, user_is_cold=user_is_cold,
                        tail_fraction=tail_fraction, cold_threshold=cold_threshold)


class _UnknownSlots(dict):
    def __missing__(self, key):
        return "unknown"


def render_prompt(item_attributes: Mapping[str, object], template_name: str) -> str:
    """Fill the dataset's prompt template; attribute keys are matched
    case-insensitively and missing slots render as "unknown"."""
    if template_name not in PROMPT_TEMPLATES:
        raise ConfigError(f"unknown template {template_name!r} "
                          f"(valid: {', '.join(sorted(PROMPT_TEMPLATES))})")
    slots = _UnknownSlots()
    for key, value in item_attributes.items():
        if value is not None and value != "":
            slots[str(key).lower()] = value
    return PROMPT_TEMPLATES[template_name].format_map(slots)


def build_prompt_records(ds: InteractionDataset, template_name: str,
                         attributes_by_item: Mapping[str, Mapping[str, object]] | None = None,
                         ) -> list[PromptRecord]:
    """Render one prompt per vocabulary item, in dense index order."""
    attributes_by_item = attributes_by_item or {}
    records = []
    for idx, item_id in enumerate(ds.item_vocab):
        attrs = attributes_by_item.get(item_id, {})
        records.append(PromptRecord(item_index=idx, prompt=render_prompt(attrs, template_name)))
    return records


def write_prompt_records(records: list[PromptRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"item_index": rec.item_index, "prompt": rec.prompt},
                                sort_keys=True))
            fh.write("\n")


def load_prompt_records(path: str | Path) -> list[PromptRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "item_index" not in obj or "prompt" not in obj:
                raise DataFormatError(f"line {line_no}: missing field item_index or prompt")
            records.append(PromptRecord(item_index=int(obj["item_index"]), prompt=obj["prompt"]))
    records.sort(key=lambda r: r.item_index)
    return records


def save_dataset(ds: InteractionDataset, path: str | Path) -> None:
    payload = {
        "format": DATASET_FORMAT_TAG,
        "min_count": ds.min_count,
        "max_len": ds.max_len,
        "item_vocab": ds.item_vocab,
        "user_vocab": ds.user_vocab,
        "sequences": ds.sequences,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_dataset(path: str | Path) -> InteractionDataset:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"dataset file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != DATASET_FORMAT_TAG:
        raise DataFormatError(f"{path}: not a {DATASET_FORMAT_TAG} file")
    return InteractionDataset(
        item_vocab=list(payload["item_vocab"]),
        user_vocab=list(payload["user_vocab"]),
        sequences=[list(map(int, s)) for s in payload["sequences"]],
        min_count=int(payload.get("min_count", 5)),
        max_len=int(payload.get("max_len", 50)),
    )


def save_strata(labels: StrataLabels, path: str | Path) -> None:
    payload = {
        "tail_fraction": labels.tail_fraction,
        "cold_threshold": labels.cold_threshold,
        "item_is_tail": labels.item_is_tail,
        "user_is_cold": labels.user_is_cold,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_strata(path: str | Path) -> StrataLabels:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return StrataLabels(
        item_is_tail=[bool(v) for v in payload["item_is_tail"]],
        user_is_cold=[bool(v) for v in payload["user_is_cold"]],
        tail_fraction=float(payload.get("tail_fraction", 0.2)),
        cold_threshold=int(payload.get("cold_threshold", 5)),
    )
