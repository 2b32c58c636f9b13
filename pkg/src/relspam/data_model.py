"""Core data types: messages, relation groups, dataset validation, chronological splits.

Messages are ingested from line-delimited JSON records. Groups ("hubs") collect
messages that share a relation key: same author, same normalized text, same
link, and so on. All downstream modules consume these types read-only.
"""

from __future__ import annotations

import json
import string
import unicodedata
from dataclasses import dataclass, field, asdict
from typing import Iterable, Mapping, Optional


class ConfigError(ValueError):
    """Raised for invalid configuration (unknown relation tags, bad fractions, ...)."""


class DataError(ValueError):
    """Raised for datasets that cannot satisfy an operation's preconditions."""


SPAM = 1
HAM = 0

RELATION_NAMES = ("user", "text", "link", "hashtag", "mention", "track", "user_hashtag")


@dataclass
class Message:
    id: str
    user_id: str
    text: str = ""
    timestamp: int = 0
    target_id: Optional[str] = None
    links: list = field(default_factory=list)
    hashtags: list = field(default_factory=list)
    mentions: list = field(default_factory=list)
    is_retweet: bool = False
    label: Optional[int] = None  # 1 spam, 0 ham, None unlabeled


def normalize_text(text: str) -> str:
    """Canonical text key: NFC, lowercase, collapsed whitespace, ends stripped of punctuation."""
    s = unicodedata.normalize("NFC", text).lower()
    s = " ".join(s.split())
    start, end = 0, len(s)
    while start < end and unicodedata.category(s[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(s[end - 1]).startswith("P"):
        end -= 1
    return s[start:end]


def normalize_link(url: str) -> str:
    """Lowercase the scheme and host of a URL, leave path/query untouched."""
    from urllib.parse import urlsplit, urlunsplit

    parts = urlsplit(url.strip())
    if not parts.netloc:
        return url.strip()
    return urlunsplit((parts.scheme.lower(), parts.netloc.lower(), parts.path, parts.query, parts.fragment))


def _extract_hashtags(text: str) -> list:
    return [w[1:] for w in text.split() if w.startswith("#") and len(w) > 1]


def _extract_mentions(text: str) -> list:
    return [w[1:].rstrip(string.punctuation) for w in text.split() if w.startswith("@") and len(w) > 1]


def _extract_links(text: str) -> list:
    return [w for w in text.split() if w.startswith(("http://", "https://"))]


def message_hashtags(m: Message) -> list:
    """Explicit hashtag annotations, falling back to #tokens parsed from the text."""
    return list(m.hashtags) if m.hashtags else _extract_hashtags(m.text)


def message_mentions(m: Message) -> list:
    return list(m.mentions) if m.mentions else _extract_mentions(m.text)


def message_links(m: Message) -> list:
    return list(m.links) if m.links else _extract_links(m.text)


@dataclass(frozen=True)
class RelationType:
    """A grouping relation: maps each message to zero or more grouping keys."""

    name: str

    def __post_init__(self):
        if self.name not in RELATION_NAMES:
            raise ConfigError(f"unknown relation tag: {self.name!r} (expected one of {RELATION_NAMES})")

    def keys_for(self, m: Message) -> list:
        if self.name == "user":
            return [m.user_id]
        if self.name == "text":
            key = normalize_text(m.text)
            return [key] if key else []
        if self.name == "link":
            return sorted({normalize_link(u) for u in message_links(m)})
        if self.name == "hashtag":
            return sorted({h.lower() for h in message_hashtags(m)})
        if self.name == "mention":
            return sorted({x.lower() for x in message_mentions(m)})
        if self.name == "track":
            return [m.target_id] if m.target_id else []
        if self.name == "user_hashtag":
            return sorted({f"{m.user_id}\x1f{h.lower()}" for h in message_hashtags(m)})
        raise ConfigError(f"unknown relation tag: {self.name!r}")


def relations_from_names(names: Iterable[str]) -> list:
    return [RelationType(n) for n in names]


@dataclass(frozen=True)
class Group:
    """A hub: all message ids sharing one relation key. Always has >= 2 members."""

    relation: str
    key: str
    member_ids: tuple

    def __len__(self):
        return len(self.member_ids)


def build_groups(messages: list, relations: list) -> list:
    """Group messages by relation key; singleton groups are dropped.

    Deterministic and permutation-invariant: the output is sorted by
    (relation, key) and member ids are sorted within each group.
    """
    buckets: dict = {}
    for rel in relations:
        if not isinstance(rel, RelationType):
            rel = RelationType(str(rel))
        for m in messages:
            for key in rel.keys_for(m):
                buckets.setdefault((rel.name, key), set()).add(m.id)
    out = []
    for (rel_name, key) in sorted(buckets):
        members = buckets[(rel_name, key)]
        if len(members) >= 2:
            out.append(Group(relation=rel_name, key=key, member_ids=tuple(sorted(members))))
    return out


def groups_by_relation(groups: Iterable[Group]) -> dict:
    by_rel: dict = {}
    for g in groups:
        by_rel.setdefault(g.relation, []).append(g)
    return by_rel


def member_index(groups: Iterable[Group]) -> dict:
    """Map message id -> list of groups containing it."""
    idx: dict = {}
    for g in groups:
        for mid in g.member_ids:
            idx.setdefault(mid, []).append(g)
    return idx


@dataclass
class ValidationReport:
    n_messages: int = 0
    duplicate_ids: list = field(default_factory=list)
    bad_timestamps: list = field(default_factory=list)
    label_coverage: float = 0.0
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_dataset(messages: list) -> ValidationReport:
    """Report duplicate ids, invalid timestamps and label coverage. Never mutates."""
    report = ValidationReport(n_messages=len(messages))
    seen = set()
    dups = set()
    n_labeled = 0
    for m in messages:
        if m.id in seen:
            dups.add(m.id)
        seen.add(m.id)
        if not isinstance(m.timestamp, int) or m.timestamp < 0:
            report.bad_timestamps.append(m.id)
        if m.label is not None:
            n_labeled += 1
    report.duplicate_ids = sorted(dups)
    report.label_coverage = n_labeled / len(messages) if messages else 0.0
    for mid in report.duplicate_ids:
        report.errors.append(f"duplicate message id: {mid}")
    for mid in report.bad_timestamps:
        report.errors.append(f"invalid timestamp on message: {mid}")
    return report


def sort_chronologically(messages: list) -> list:
    """Sort by (timestamp, id); id breaks timestamp ties deterministically."""
    return sorted(messages, key=lambda m: (m.timestamp, m.id))


@dataclass(frozen=True)
class SubsetSplit:
    train: tuple  # (start, end) half-open index range over the sorted dataset
    validation: tuple
    test: tuple


@dataclass
class SplitPlan:
    n_messages: int
    n_subsets: int
    subsets: list

    def to_json(self) -> str:
        payload = {
            "version": 1,
            "n_messages": self.n_messages,
            "n_subsets": self.n_subsets,
            "subsets": [
                {"train": list(s.train), "validation": list(s.validation), "test": list(s.test)}
                for s in self.subsets
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        payload = json.loads(text)
        subsets = [
            SubsetSplit(tuple(s["train"]), tuple(s["validation"]), tuple(s["test"]))
            for s in payload["subsets"]
        ]
        return cls(n_messages=payload["n_messages"], n_subsets=payload["n_subsets"], subsets=subsets)


def chronological_split(messages: list, n_subsets: int, fractions: tuple) -> SplitPlan:
    """Partition the timestamp-sorted dataset into contiguous subsets, each split
    into train / validation / test slices in temporal order.
    """
    if n_subsets < 1:
        raise ConfigError("n_subsets must be >= 1")
    if len(fractions) != 3:
        raise ConfigError("fractions must be (train, validation, test)")
    f_train, f_val, f_test = fractions
    if min(fractions) < 0 or abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be non-negative and sum to 1, got {fractions}")
    n = len(messages)
    if n < n_subsets:
        raise DataError(f"dataset of {n} messages cannot be split into {n_subsets} subsets")

    subsets = []
    for i in range(n_subsets):
        a = (i * n) // n_subsets
        b = ((i + 1) * n) // n_subsets
        size = b - a
        t_end = a + int(size * f_train)
        v_end = a + int(size * (f_train + f_val))
        subsets.append(SubsetSplit(train=(a, t_end), validation=(t_end, v_end), test=(v_end, b)))
    return SplitPlan(n_messages=n, n_subsets=n_subsets, subsets=subsets)


# --- line-delimited ingestion / serialization ---

_MESSAGE_FIELDS = ("id", "user_id", "text", "timestamp", "target_id",
                   "links", "hashtags", "mentions", "is_retweet", "label")


def message_from_record(rec: Mapping, fallback_index: int = 0) -> Message:
    """Build a Message from a parsed record; unknown fields are ignored.

    A missing or null timestamp falls back to the record's position in the file,
    so datasets without true time are still processable in a stable order.
    """
    ts = rec.get("timestamp")
    if ts is None:
        ts = fallback_index
    label = rec.get("label")
    if label is not None:
        label = int(label)
        if label not in (HAM, SPAM):
            raise DataError(f"label must be 0, 1 or absent, got {label!r}")
    return Message(
        id=str(rec["id"]),
        user_id=str(rec.get("user_id", "")),
        text=str(rec.get("text", "")),
        timestamp=int(ts),
        target_id=rec.get("target_id"),
        links=list(rec.get("links", [])),
        hashtags=list(rec.get("hashtags", [])),
        mentions=list(rec.get("mentions", [])),
        is_retweet=bool(rec.get("is_retweet", False)),
        label=label,
    )


def message_to_record(m: Message) -> dict:
    rec = asdict(m)
    if rec["label"] is None:
        del rec["label"]
    if rec["target_id"] is None:
        del rec["target_id"]
    return rec


def read_messages(path) -> list:
    messages = []
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            messages.append(message_from_record(json.loads(line), fallback_index=i))
    return messages


def write_messages(path, messages: Iterable[Message]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in messages:
            fh.write(json.dumps(message_to_record(m), sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def read_follows(path) -> list:
    """Read (follower, followee) pairs from a two-column tab-separated file."""
    follows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"malformed follows line: {line!r}")
            follows.append((parts[0], parts[1]))
    return follows


def write_follows(path, follows: Iterable[tuple]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in follows:
            fh.write(f"{a}\t{b}\n")


def labels_of(messages: Iterable[Message]) -> dict:
    """Map id -> gold label for the labeled subset of messages."""
    return {m.id: m.label for m in messages if m.label is not None}
