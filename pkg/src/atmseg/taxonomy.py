"""Fine-grained lumbar spine class space.

Class ids follow anatomical order: 0 is background, then every vertebral body
(VB) and intervertebral disc (ID) from superior to inferior, then the spinal
canal (SC) when the dataset annotates it.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

SC_RANK = 1000

_THORACIC = ("T9", "T10", "T11", "T12")
_LUMBAR = ("L1", "L2", "L3", "L4", "L5")


class Kind(str, enum.Enum):
    BG = "BG"
    VB = "VB"
    ID = "ID"
    SC = "SC"


class InvalidClassError(ValueError):
    pass


@dataclass(frozen=True)
class ClassEntry:
    id: int
    name: str
    kind: Kind
    rank: int
    descriptor: str = ""
    # for discs: the (superior, inferior) vertebra names
    between: tuple[str, str] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["between"] = list(self.between) if self.between else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassEntry":
        between = d.get("between")
        return cls(
            id=int(d["id"]),
            name=str(d["name"]),
            kind=Kind(d["kind"]),
            rank=int(d["rank"]),
            descriptor=str(d.get("descriptor", "")),
            between=tuple(between) if between else None,
        )


def vertebra_descriptor(name: str) -> str:
    if name in _THORACIC:
        return "thoracic vertebra"
    if name in _LUMBAR:
        return "lumbar vertebra"
    if name == "S":
        return "sacrum"
    raise InvalidClassError(f"unknown vertebra {name!r}")


class ClassTaxonomy:
    """Immutable, id-indexed list of :class:`ClassEntry`."""

    def __init__(self, name: str, entries: Iterable[ClassEntry]):
        self.name = name
        self.entries: tuple[ClassEntry, ...] = tuple(sorted(entries, key=lambda e: e.id))
        self._validate()
        self._by_name = {e.name: e for e in self.entries}

    def _validate(self) -> None:
        ids = [e.id for e in self.entries]
        if ids != list(range(len(ids))):
            raise InvalidClassError(f"ids must be exactly 0..{len(ids) - 1}, got {ids}")
        if not ids or self.entries[0].kind is not Kind.BG:
            raise InvalidClassError("id 0 must be background")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise InvalidClassError("class names must be unique")
        ranks = [e.rank for e in self.entries[1:]]
        if len(set(ranks)) != len(ranks):
            raise InvalidClassError("ranks must be a strict total order")
        for e in self.entries[1:]:
            if e.kind is Kind.BG:
                raise InvalidClassError("only id 0 may be background")
            if not e.descriptor:
                raise InvalidClassError(f"{e.name}: empty descriptor")
        max_rank = max(ranks, default=0)
        for e in self.entries:
            if e.kind is Kind.SC and e.rank != max_rank:
                raise InvalidClassError("spinal canal must carry the maximal rank")

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def num_foreground(self) -> int:
        return len(self.entries) - 1

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, class_id: int) -> ClassEntry:
        if not 0 <= class_id < len(self.entries):
            raise InvalidClassError(f"class id {class_id} out of range for {self.name}")
        return self.entries[class_id]

    def by_name(self, name: str) -> ClassEntry:
        try:
            return self._by_name[name]
        except KeyError:
            raise InvalidClassError(f"unknown class name {name!r}") from None

    def of_kind(self, kind: Kind) -> list[ClassEntry]:
        return [e for e in self.entries if e.kind is kind]

    def table_order(self) -> list[ClassEntry]:
        """Column order of the per-class result tables: SC/sacrum, VBs and
        then IDs, each running inferior to superior."""
        sc = self.of_kind(Kind.SC)
        vbs = sorted(self.of_kind(Kind.VB), key=lambda e: -e.rank)
        ids = sorted(self.of_kind(Kind.ID), key=lambda e: -e.rank)
        head = sc + [e for e in vbs if e.name == "S"]
        rest = [e for e in vbs if e.name != "S"]
        return head + rest + ids

    def to_json(self) -> str:
        return json.dumps(
            {"name": self.name, "entries": [e.to_dict() for e in self.entries]}, indent=2
        )

    @classmethod
    def from_json(cls, text: str) -> "ClassTaxonomy":
        doc = json.loads(text)
        return cls(doc.get("name", "custom"), [ClassEntry.from_dict(d) for d in doc["entries"]])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ClassTaxonomy) and self.entries == other.entries

    def __hash__(self) -> int:
        return hash(self.entries)

    def __repr__(self) -> str:
        return f"ClassTaxonomy({self.name!r}, {self.num_classes} classes)"


def _spine_entries(vertebrae: list[str]) -> list[ClassEntry]:
    # vertebrae listed superior to inferior
    entries = [ClassEntry(0, "background", Kind.BG, 0)]
    rank = 0
    for k, vb in enumerate(vertebrae):
        rank += 1
        entries.append(ClassEntry(rank, vb, Kind.VB, rank, vertebra_descriptor(vb)))
        if k + 1 < len(vertebrae):
            rank += 1
            below = vertebrae[k + 1]
            entries.append(
                ClassEntry(rank, f"{vb}/{below}", Kind.ID, rank, "intervertebral disc", (vb, below))
            )
    return entries


def builtin_taxonomy(dataset: str) -> ClassTaxonomy:
    """20-class taxonomy (background + 19 substructures) of a supported dataset."""
    key = dataset.strip().lower()
    full = list(_THORACIC + _LUMBAR) + ["S"]
    if key == "mrspineseg":
        return ClassTaxonomy("MRSpineSeg", _spine_entries(full))
    if key == "spider":
        entries = _spine_entries(full)
        # SPIDER labels the L5/S disc but not the sacrum; the canal takes its place
        entries = [e for e in entries if e.name != "S"]
        entries.append(
            ClassEntry(len(entries), "Spinal Canal", Kind.SC, SC_RANK, "spinal canal")
        )
        return ClassTaxonomy("SPIDER", entries)
    raise InvalidClassError(f"unsupported dataset {dataset!r} (MRSpineSeg or SPIDER)")


def load_taxonomy(spec: str | Path) -> ClassTaxonomy:
    """Builtin name or a path to a taxonomy JSON document."""
    p = Path(spec)
    if p.suffix == ".json" and p.exists():
        return ClassTaxonomy.from_json(p.read_text())
    return builtin_taxonomy(str(spec))


def ordered_present(taxonomy: ClassTaxonomy, present_ids: Iterable[int]) -> list[ClassEntry]:
    """Present foreground classes, superior to inferior, spinal canal last."""
    out = []
    for cid in set(int(i) for i in present_ids):
        if cid <= 0 or cid >= taxonomy.num_classes:
            raise InvalidClassError(f"class id {cid} is not a foreground id of {taxonomy.name}")
        out.append(taxonomy[cid])
    return sorted(out, key=lambda e: e.rank)
