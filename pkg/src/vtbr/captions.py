"""Template captions with rare-attribute selection, corpus dedup, and vocabulary.

A template is written as a string where plain words are fixed and each
``{...}`` group is one attribute slot holding exactly one ``<category>``::

    "a person {with <hair> hair} {wearing a <upper> top} {in <weather> weather}"

A slot is rendered (lead words, value, trail words) only when the appearance
probability of the record's value is at most ``alpha``; otherwise the whole
group disappears.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from vtbr.attributes import AttributeRecord, AttributeSchema, FrequencyTable
from vtbr.errors import LengthMismatchError, TemplateError

SOS, EOS, PAD, UNK = "[SOS]", "[EOS]", "[PAD]", "[UNK]"
RESERVED = (SOS, EOS, PAD, UNK)
SOS_ID, EOS_ID, PAD_ID, UNK_ID = 0, 1, 2, 3


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class FixedPhrase:
    words: tuple[str, ...]


@dataclass(frozen=True)
class AttributeSlot:
    category: str
    lead_words: tuple[str, ...] = ()
    trail_words: tuple[str, ...] = ()


@dataclass(frozen=True)
class CaptionTemplate:
    slots: tuple[FixedPhrase | AttributeSlot, ...]

    def __post_init__(self):
        cats = [s.category for s in self.slots if isinstance(s, AttributeSlot)]
        if not cats:
            raise TemplateError("template needs at least one attribute slot")
        dup = [c for c, n in Counter(cats).items() if n > 1]
        if dup:
            raise TemplateError(f"category referenced more than once: {dup}")

    @property
    def categories(self) -> list[str]:
        return [s.category for s in self.slots if isinstance(s, AttributeSlot)]

    def check_schema(self, schema: AttributeSchema):
        names = set(schema.names)
        missing = [c for c in self.categories if c not in names]
        if missing:
            raise TemplateError(f"template references unknown categories {missing}")

    @classmethod
    def parse(cls, text: str) -> "CaptionTemplate":
        slots: list[FixedPhrase | AttributeSlot] = []
        pos = 0
        for m in re.finditer(r"\{([^{}]*)\}", text):
            fixed = tokenize(text[pos:m.start()])
            if fixed:
                slots.append(FixedPhrase(tuple(fixed)))
            slots.append(_parse_slot(m.group(1)))
            pos = m.end()
        tail = text[pos:]
        if "{" in tail or "}" in tail:
            raise TemplateError(f"unbalanced braces in template {text!r}")
        if tokenize(tail):
            slots.append(FixedPhrase(tuple(tokenize(tail))))
        return cls(tuple(slots))


def _parse_slot(body: str) -> AttributeSlot:
    cats = re.findall(r"<([^<>\s]+)>", body)
    if len(cats) != 1:
        raise TemplateError(f"slot {{{body}}} must name exactly one <category>")
    lead, _, trail = body.partition(f"<{cats[0]}>")
    return AttributeSlot(cats[0], tuple(tokenize(lead)), tuple(tokenize(trail)))


@dataclass(frozen=True)
class RSConfig:
    alpha: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class Caption:
    tokens: tuple[str, ...]
    source_identity: int = -1
    camera_id: int = -1

    def __post_init__(self):
        t = self.tokens
        if len(t) < 3 or t[0] != SOS or t[-1] != EOS:
            raise TemplateError(f"caption must be [SOS] <words>+ [EOS], got {t!r}")
        for tok in t[1:-1]:
            if tok != tok.lower() or not tok or any(ch.isspace() for ch in tok):
                raise TemplateError(f"bad caption token {tok!r}")

    @property
    def interior(self) -> tuple[str, ...]:
        return self.tokens[1:-1]

    @property
    def text(self) -> str:
        return " ".join(self.interior)

    @classmethod
    def from_text(cls, text: str, source_identity: int = -1, camera_id: int = -1) -> "Caption":
        return cls((SOS, *tokenize(text), EOS), source_identity, camera_id)


def generate_caption(
    record: AttributeRecord,
    template: CaptionTemplate,
    freq: FrequencyTable,
    rs: RSConfig,
) -> Caption:
    words: list[str] = []
    for slot in template.slots:
        if isinstance(slot, FixedPhrase):
            words.extend(slot.words)
            continue
        if slot.category not in record.values:
            raise TemplateError(f"record has no value for template category {slot.category!r}")
        value = record.values[slot.category]
        p = freq.get(slot.category, value)
        if p is None:
            raise KeyError(f"frequency table lacks ({slot.category!r}, {value!r})")
        if p <= rs.alpha:
            words.extend(slot.lead_words)
            words.extend(tokenize(value.replace("_", " ")))
            words.extend(slot.trail_words)
    if not words:
        raise TemplateError("every slot was filtered out and the template has no fixed words")
    return Caption((SOS, *words, EOS), record.identity_id, record.camera_id)


def select_template(record: AttributeRecord, templates: Sequence[CaptionTemplate]) -> CaptionTemplate:
    # one template per identity keeps same-identity captions comparable for dedup
    return templates[record.identity_id % len(templates)]


def generate_corpus(
    records: Sequence[AttributeRecord],
    templates: Sequence[CaptionTemplate],
    freq: FrequencyTable,
    rs: RSConfig,
) -> list[Caption]:
    return [generate_caption(r, select_template(r, templates), freq, rs) for r in records]


def rs_select(records: Sequence[AttributeRecord], captions: Sequence[Caption]) -> list[int]:
    """Indices of records kept after same-identity caption dedup, in input order."""
    if len(records) != len(captions):
        raise LengthMismatchError(f"{len(records)} records vs {len(captions)} captions")
    seen: set[tuple[int, tuple[str, ...]]] = set()
    kept = []
    for i, (rec, cap) in enumerate(zip(records, captions)):
        key = (rec.identity_id, cap.tokens)
        if key in seen:
            continue
        seen.add(key)
        kept.append(i)
    return kept


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def save(self, path: str | Path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.id_to_token, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls(list(json.load(fh)))


def build_vocabulary(captions: Iterable[Caption], min_freq: int = 1) -> Vocabulary:
    if min_freq < 1:
        raise ValueError("min_freq must be positive")
    counts = Counter(tok for cap in captions for tok in cap.interior)
    kept = sorted((t for t, n in counts.items() if n >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


def encode_caption(caption: Caption, vocab: Vocabulary) -> list[int]:
    return [vocab.token_to_id.get(t, UNK_ID) for t in caption.tokens]


def decode_ids(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    return [vocab.id_to_token[i] for i in ids]


def save_corpus(captions: Sequence[Caption], path: str | Path, meta: dict | None = None):
    """Write the caption corpus sorted by (identity, camera); sort is stable."""
    order = sorted(range(len(captions)), key=lambda i: (captions[i].source_identity, captions[i].camera_id))
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for i in order:
            c = captions[i]
            fh.write(json.dumps({"id": c.source_identity, "cam": c.camera_id, "caption": c.text}, sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> list[Caption]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "meta" in obj and len(obj) == 1:
                continue
            out.append(Caption.from_text(obj["caption"], obj["id"], obj["cam"]))
    return out
