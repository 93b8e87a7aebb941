"""Anatomy-aware text prompts generated from label maps.

Every slice gets one holistic prompt (three granularity options) and one
presence sentence per class channel. Wording lives in
``templates/prompts.json``; this module only fills the templates in.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .dataio import SliceSample
from .taxonomy import ClassEntry, ClassTaxonomy, Kind, ordered_present


class PromptOption(enum.IntEnum):
    OPT1 = 1
    OPT2 = 2
    OPT3 = 3

    @classmethod
    def parse(cls, value) -> "PromptOption":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().removeprefix("opt").removeprefix(".")
        return cls(int(text))


class SliceThird(str, enum.Enum):
    UPPER = "upper"
    MIDDLE = "middle"
    LOWER = "lower"


@dataclass(frozen=True)
class PromptTemplates:
    opt1: str
    opt2: str
    opt3: str
    third: dict
    relation: str
    empty: str
    separator: str
    item: dict
    channel_present: str
    channel_absent: str
    channel_background: str
    holistic_descriptors: dict = field(default_factory=dict)
    channel_descriptors: dict = field(default_factory=dict)


def load_templates(verbatim: bool = False, path: str | Path | None = None) -> PromptTemplates:
    """Default wording, or the ``paper_verbatim`` variant whose vertebra
    descriptors copy the published example prompts."""
    if path is None:
        text = resources.files("atmseg").joinpath("templates/prompts.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    merged = dict(doc["default"])
    if verbatim:
        merged.update(doc.get("paper_verbatim", {}))
    return PromptTemplates(**merged)


def classify_slice_third(slice_index: int, slice_count: int) -> SliceThird:
    if slice_count <= 0:
        raise ValueError("slice_count must be positive")
    if not 0 <= slice_index < slice_count:
        raise ValueError(f"slice_index {slice_index} outside [0, {slice_count})")
    # half-open thirds, compared in integers: [0, 1/3), [1/3, 2/3), [2/3, 1]
    if 3 * slice_index < slice_count:
        return SliceThird.UPPER
    if 3 * slice_index < 2 * slice_count:
        return SliceThird.MIDDLE
    return SliceThird.LOWER


def _item(entry: ClassEntry, tpl: PromptTemplates, descriptors: dict) -> str:
    descriptor = descriptors.get(entry.kind.value, entry.descriptor)
    return tpl.item[entry.kind.value].format(descriptor=descriptor, name=entry.name)


def _present_ids(label) -> set[int]:
    return {int(v) for v in np.unique(np.asarray(label)) if v != 0}


def generate_holistic(
    label,
    third: SliceThird | str,
    taxonomy: ClassTaxonomy,
    option=PromptOption.OPT3,
    templates: PromptTemplates | None = None,
) -> str:
    tpl = templates or load_templates()
    option = PromptOption.parse(option)
    if option is PromptOption.OPT1:
        return tpl.opt1
    present = ordered_present(taxonomy, _present_ids(label))
    structures = (
        tpl.separator.join(_item(e, tpl, tpl.holistic_descriptors) for e in present)
        if present
        else tpl.empty
    )
    if option is PromptOption.OPT2:
        return tpl.opt2.format(structures=structures)

    names = {e.name for e in present}
    relations = "".join(
        tpl.relation.format(disc=e.name, upper=e.between[0], lower=e.between[1])
        for e in present
        if e.kind is Kind.ID and e.between and set(e.between) <= names
    )
    return tpl.opt3.format(
        third=tpl.third[SliceThird(third).value], structures=structures, relations=relations
    )


def generate_channel_prompts(
    label, taxonomy: ClassTaxonomy, templates: PromptTemplates | None = None
) -> list[str]:
    tpl = templates or load_templates()
    present = _present_ids(label)
    out = [tpl.channel_background]
    for e in taxonomy.entries[1:]:
        item = _item(e, tpl, tpl.channel_descriptors)
        out.append((tpl.channel_present if e.id in present else tpl.channel_absent).format(item=item))
    return out


@dataclass(frozen=True)
class PromptBundle:
    holistic: str
    channel: tuple[str, ...]
    option: PromptOption
    slice_third: SliceThird

    def to_record(self, volume_id: str, slice_index: int) -> dict:
        return {
            "volume_id": volume_id,
            "slice_index": slice_index,
            "option": int(self.option),
            "slice_third": self.slice_third.value,
            "holistic": self.holistic,
            "channel": list(self.channel),
        }


def generate_bundle(
    sample: SliceSample,
    taxonomy: ClassTaxonomy,
    option=PromptOption.OPT3,
    templates: PromptTemplates | None = None,
) -> PromptBundle:
    tpl = templates or load_templates()
    third = classify_slice_third(sample.slice_index, sample.slice_count)
    return PromptBundle(
        holistic=generate_holistic(sample.label, third, taxonomy, option, tpl),
        channel=tuple(generate_channel_prompts(sample.label, taxonomy, tpl)),
        option=PromptOption.parse(option),
        slice_third=third,
    )


def token_count(text: str) -> int:
    return len(text.split())
