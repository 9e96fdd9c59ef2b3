"""Dialogues, reply links, thread partitions and their on-disk text formats.

Dialogue file (UTF-8): dialogues are separated by blank lines. Each utterance
is one line ``<id>\\t<speaker>\\t<tok> <tok> ...``; an optional trailing block
of ``L <child> <parent>`` lines carries gold reply links. Link files hold one
``<child> <parent>`` pair per line and partition files one cluster per line
(space separated ids); in both, blank lines separate dialogues.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed input or a violated data invariant."""


class ParseError(DataError):
    def __init__(self, path: str | Path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class IntegrityError(DataError):
    pass


@dataclass(frozen=True)
class Utterance:
    id: int
    speaker: str
    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.id < 0:
            raise DataError(f"negative utterance id {self.id}")
        if not self.tokens:
            raise DataError(f"utterance {self.id} has no tokens")
        if any(t < 0 for t in self.tokens):
            raise DataError(f"utterance {self.id} has a negative token id")


@dataclass(frozen=True, order=True)
class ReplyLink:
    child: int
    parent: int

    def __post_init__(self) -> None:
        if self.parent > self.child:
            raise DataError(f"link {self.child}->{self.parent} points forward")
        if self.parent < 0:
            raise DataError(f"link {self.child}->{self.parent} has a negative id")

    @property
    def is_self(self) -> bool:
        return self.parent == self.child


@dataclass(frozen=True)
class Dialogue:
    utterances: tuple[Utterance, ...]
    gold_links: tuple[ReplyLink, ...] | None = None

    def __post_init__(self) -> None:
        for i, u in enumerate(self.utterances):
            if u.id != i:
                raise IntegrityError(f"utterance at position {i} has id {u.id}")
        if self.gold_links is not None:
            n = len(self.utterances)
            for link in self.gold_links:
                if link.child >= n or link.parent >= n:
                    raise IntegrityError(
                        f"link {link.child}->{link.parent} references a missing utterance"
                    )

    def __len__(self) -> int:
        return len(self.utterances)

    def without_links(self) -> Dialogue:
        return Dialogue(self.utterances, None)

    def gold_parents(self) -> dict[int, set[int]]:
        """Map each child id to the set of its gold parents."""
        if self.gold_links is None:
            raise DataError("dialogue carries no gold links")
        parents: dict[int, set[int]] = {}
        for link in self.gold_links:
            parents.setdefault(link.child, set()).add(link.parent)
        return parents


@dataclass(frozen=True)
class ThreadPartition:
    clusters: frozenset[frozenset[int]]

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for c in self.clusters:
            if not c:
                raise DataError("empty cluster")
            if seen & c:
                raise DataError("clusters overlap")
            seen |= c

    @classmethod
    def from_clusters(cls, clusters: Iterable[Iterable[int]]) -> ThreadPartition:
        return cls(frozenset(frozenset(c) for c in clusters))

    @property
    def elements(self) -> frozenset[int]:
        return frozenset().union(*self.clusters)

    def labels(self) -> dict[int, int]:
        """Element -> cluster index, clusters numbered by their smallest member."""
        out = {}
        for k, c in enumerate(sorted(self.clusters, key=min)):
            for e in c:
                out[e] = k
        return out

    def sorted_clusters(self) -> list[list[int]]:
        return sorted((sorted(c) for c in self.clusters), key=lambda c: c[0])


@dataclass(frozen=True)
class ResponseSelectionExample:
    context: tuple[Utterance, ...]
    candidates: tuple[Utterance, ...]
    correct_index: int
    # per-candidate flag: True for the true next utterance
    labels: tuple[bool, ...] = field(init=False)

    def __post_init__(self) -> None:
        if len(self.context) < 1:
            raise DataError("context must hold at least one utterance")
        if len(self.candidates) < 2:
            raise DataError("need at least two candidates")
        if not 0 <= self.correct_index < len(self.candidates):
            raise DataError(f"correct_index {self.correct_index} out of range")
        object.__setattr__(
            self, "labels", tuple(k == self.correct_index for k in range(len(self.candidates)))
        )


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1


def partition_from_links(links: Iterable[ReplyLink], n_utterances: int) -> ThreadPartition:
    """Connected components of the undirected reply-link graph.

    Every child in ``0..n_utterances-1`` needs at least one link; extra links
    for the same child (multi-parent gold) are also merged.
    """
    uf = _UnionFind(n_utterances)
    covered = set()
    for link in links:
        if link.child >= n_utterances or link.parent >= n_utterances:
            raise IntegrityError(f"link {link.child}->{link.parent} beyond {n_utterances} utterances")
        covered.add(link.child)
        uf.union(link.child, link.parent)
    missing = sorted(set(range(n_utterances)) - covered)
    if missing:
        raise DataError(f"no link for utterance ids {missing}")
    groups: dict[int, set[int]] = {}
    for i in range(n_utterances):
        groups.setdefault(uf.find(i), set()).add(i)
    return ThreadPartition.from_clusters(groups.values())


# ---------------------------------------------------------------- file formats


def _blocks(path: str | Path) -> list[list[tuple[int, str]]]:
    """Split a file into blank-line separated blocks of (lineno, text)."""
    blocks: list[list[tuple[int, str]]] = []
    cur: list[tuple[int, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                if cur:
                    blocks.append(cur)
                    cur = []
                continue
            cur.append((lineno, line))
    if cur:
        blocks.append(cur)
    return blocks


def _parse_dialogue(path: str | Path, block: list[tuple[int, str]]) -> Dialogue:
    rows: list[tuple[int, int, str, tuple[int, ...]]] = []
    raw_links: list[tuple[int, int, int]] = []
    for lineno, line in block:
        if line.startswith("L "):
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(path, lineno, "link line must be 'L <child> <parent>'")
            try:
                raw_links.append((lineno, int(parts[1]), int(parts[2])))
            except ValueError:
                raise ParseError(path, lineno, "non-integer link id") from None
            continue
        if raw_links:
            raise ParseError(path, lineno, "utterance line after link lines")
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(path, lineno, "expected '<id>\\t<speaker>\\t<tokens>'")
        try:
            uid = int(parts[0])
            tokens = tuple(int(t) for t in parts[2].split())
        except ValueError:
            raise ParseError(path, lineno, "non-integer id or token") from None
        if uid < 0 or not tokens or any(t < 0 for t in tokens):
            raise ParseError(path, lineno, "ids and tokens must be non-negative; tokens non-empty")
        rows.append((lineno, uid, parts[1], tokens))

    ids = [r[1] for r in rows]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise IntegrityError(f"{path}: duplicate utterance id {dup}")
    remap = {uid: k for k, uid in enumerate(ids)}
    if ids != list(range(len(ids))):
        log.warning("%s:%d: sparse utterance ids renumbered densely", path, rows[0][0])

    links = []
    for lineno, child, parent in raw_links:
        if child not in remap or parent not in remap:
            raise IntegrityError(f"{path}:{lineno}: link {child}->{parent} references a missing id")
        try:
            links.append(ReplyLink(remap[child], remap[parent]))
        except DataError as e:
            raise IntegrityError(f"{path}:{lineno}: {e}") from None
    utts = tuple(Utterance(remap[uid], spk, toks) for _, uid, spk, toks in rows)
    return Dialogue(utts, tuple(links) if raw_links else None)


def load_dialogues(path: str | Path) -> list[Dialogue]:
    return [_parse_dialogue(path, b) for b in _blocks(path)]


def format_dialogue(d: Dialogue) -> str:
    lines = [f"{u.id}\t{u.speaker}\t{' '.join(map(str, u.tokens))}" for u in d.utterances]
    if d.gold_links:
        lines += [f"L {l.child} {l.parent}" for l in sorted(d.gold_links)]
    return "\n".join(lines) + "\n"


def save_dialogues(dialogues: Sequence[Dialogue], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(format_dialogue(d) for d in dialogues))


def save_links(links: Sequence[ReplyLink] | Sequence[Sequence[ReplyLink]], path: str | Path) -> None:
    """Write ``child parent`` lines sorted by child.

    Accepts a single link list or one list per dialogue; per-dialogue blocks
    are separated by a blank line.
    """
    groups = _as_groups(links)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join("".join(f"{l.child} {l.parent}\n" for l in sorted(g)) for g in groups))


def load_links(path: str | Path) -> list[list[ReplyLink]]:
    out = []
    for block in _blocks(path):
        links = []
        for lineno, line in block:
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(path, lineno, "expected '<child> <parent>'")
            try:
                links.append(ReplyLink(int(parts[0]), int(parts[1])))
            except ValueError as e:
                raise ParseError(path, lineno, str(e)) from None
        out.append(links)
    return out


def save_partitions(partitions: Sequence[ThreadPartition], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(
            "\n".join(
                "".join(" ".join(map(str, c)) + "\n" for c in p.sorted_clusters()) for p in partitions
            )
        )


def load_partitions(path: str | Path) -> list[ThreadPartition]:
    out = []
    for block in _blocks(path):
        try:
            out.append(ThreadPartition.from_clusters([int(x) for x in line.split()] for _, line in block))
        except ValueError as e:
            raise ParseError(path, block[0][0], str(e)) from None
    return out


def _as_groups(links) -> list[list[ReplyLink]]:
    if not links:
        return [[]]
    if isinstance(links[0], ReplyLink):
        return [list(links)]
    return [list(g) for g in links]
