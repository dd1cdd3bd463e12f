"""Corpus records, entity-pair sample construction and the synthetic corpus generator."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .embeddings import E1_CLOSE, E1_OPEN, E2_CLOSE, E2_OPEN, Vocabulary, tokenize
from .errors import DataError, SampleError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Entity:
    id: str
    mention: str
    char_start: int
    char_end: int
    entity_type: str
    attributes: Tuple[str, ...] = ()


@dataclass(frozen=True)
class RelationAnnotation:
    head_entity_id: str
    tail_entity_id: str
    label_id: int


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    entities: Tuple[Entity, ...] = ()
    relations: Tuple[RelationAnnotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "relations", tuple(self.relations))

    def validate(self, num_classes: Optional[int] = None) -> None:
        ids = set()
        for ent in self.entities:
            if ent.id in ids:
                raise DataError(f"document {self.id}: duplicate entity id {ent.id!r}")
            ids.add(ent.id)
            if not 0 <= ent.char_start < ent.char_end <= len(self.text):
                raise DataError(
                    f"document {self.id}: entity {ent.id!r} offsets [{ent.char_start}, {ent.char_end}) "
                    f"fall outside the text"
                )
            if self.text[ent.char_start:ent.char_end] != ent.mention:
                raise DataError(
                    f"document {self.id}: entity {ent.id!r} mention {ent.mention!r} does not match "
                    f"text {self.text[ent.char_start:ent.char_end]!r} at its offsets"
                )
        for rel in self.relations:
            where = f"document {self.id}: relation ({rel.head_entity_id} -> {rel.tail_entity_id}, {rel.label_id})"
            if rel.head_entity_id not in ids or rel.tail_entity_id not in ids:
                raise DataError(f"{where} references an unknown entity")
            if rel.head_entity_id == rel.tail_entity_id:
                raise DataError(f"{where} links an entity to itself")
            if rel.label_id < 0 or (num_classes is not None and rel.label_id >= num_classes):
                raise DataError(f"{where} has a label outside [0, {num_classes})")

    def entity(self, entity_id: str) -> Entity:
        for ent in self.entities:
            if ent.id == entity_id:
                return ent
        raise DataError(f"document {self.id}: no entity {entity_id!r}")


@dataclass
class PairSample:
    doc_id: str
    head_id: str
    tail_id: str
    token_ids: np.ndarray  # [max_seq_len], PAD-filled
    mask: np.ndarray  # [max_seq_len] bool
    labels: np.ndarray  # [C] in {0, 1}

    @property
    def length(self) -> int:
        return int(self.mask.sum())


# -- pair construction ------------------------------------------------------------


def marked_tokens(doc: Document, e_i: Entity, e_j: Entity) -> Tuple[List[str], Tuple[int, int], Tuple[int, int]]:
    """Tokenise ``doc.text`` with marker tokens inserted at the entities' offsets.

    Returns the tokens and the inclusive token spans (open marker .. close
    marker) of the head and the tail.
    """
    # (offset, priority, marker): closing markers sort before opening ones at equal offsets
    inserts = [
        (e_i.char_start, 1, E1_OPEN), (e_i.char_end, 0, E1_CLOSE),
        (e_j.char_start, 1, E2_OPEN), (e_j.char_end, 0, E2_CLOSE),
    ]
    inserts.sort(key=lambda x: (x[0], x[1]))
    tokens: List[str] = []
    where = {}
    cursor = 0
    for offset, _, marker in inserts:
        tokens.extend(tokenize(doc.text[cursor:offset]))
        where[marker] = len(tokens)
        tokens.append(marker)
        cursor = offset
    tokens.extend(tokenize(doc.text[cursor:]))
    return tokens, (where[E1_OPEN], where[E1_CLOSE]), (where[E2_OPEN], where[E2_CLOSE])


def encode_pair(
    doc: Document, e_i: Entity, e_j: Entity, vocab: Vocabulary, max_seq_len: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Token ids with E1/E2 markers around the two mentions, padded to ``max_seq_len``.

    Sequences that are too long are cut to a ``max_seq_len`` window centred on
    the midpoint between the two marked mentions.
    """
    tokens, span1, span2 = marked_tokens(doc, e_i, e_j)
    lo = min(span1[0], span2[0])
    hi = max(span1[1], span2[1])
    if hi - lo + 1 > max_seq_len:
        raise SampleError(
            f"document {doc.id}: pair ({e_i.id}, {e_j.id}) spans {hi - lo + 1} tokens, "
            f"more than max_seq_len={max_seq_len}"
        )
    if len(tokens) > max_seq_len:
        mid = ((span1[0] + span1[1]) / 2 + (span2[0] + span2[1]) / 2) / 2
        start = int(math.floor(mid - max_seq_len / 2 + 0.5))
        start = min(max(start, hi - max_seq_len + 1, 0), lo, len(tokens) - max_seq_len)
        tokens = tokens[start:start + max_seq_len]
    ids = np.full(max_seq_len, vocab.pad_id, dtype=np.int64)
    ids[: len(tokens)] = vocab.encode(tokens)
    mask = np.zeros(max_seq_len, dtype=bool)
    mask[: len(tokens)] = True
    return ids, mask


def label_vector(doc: Document, head_id: str, tail_id: str, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes, dtype=np.int64)
    for rel in doc.relations:
        if rel.head_entity_id == head_id and rel.tail_entity_id == tail_id:
            y[rel.label_id] = 1
    return y


def build_pairs(doc: Document, vocab: Vocabulary, config) -> List[PairSample]:
    """One sample per ordered pair of distinct entities; unrelated pairs get all-zero labels.

    Pairs whose marked span cannot fit ``config.max_seq_len`` are skipped and logged.
    """
    ids = {e.id for e in doc.entities}
    for rel in doc.relations:
        if rel.head_entity_id not in ids or rel.tail_entity_id not in ids:
            raise DataError(
                f"document {doc.id}: relation ({rel.head_entity_id} -> {rel.tail_entity_id}, "
                f"{rel.label_id}) references an unknown entity"
            )
        if not 0 <= rel.label_id < config.num_classes:
            raise DataError(
                f"document {doc.id}: relation ({rel.head_entity_id} -> {rel.tail_entity_id}) "
                f"label {rel.label_id} outside [0, {config.num_classes})"
            )
    samples = []
    for e_i in doc.entities:
        for e_j in doc.entities:
            if e_i.id == e_j.id:
                continue
            try:
                token_ids, mask = encode_pair(doc, e_i, e_j, vocab, config.max_seq_len)
            except SampleError as exc:
                logger.warning("skipping sample: %s", exc)
                continue
            samples.append(PairSample(
                doc.id, e_i.id, e_j.id, token_ids, mask,
                label_vector(doc, e_i.id, e_j.id, config.num_classes),
            ))
    return samples


@dataclass
class PairDataset:
    samples: List[PairSample]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.stack([s.labels for s in self.samples])


def build_dataset(
    docs: Iterable[Document], vocab: Vocabulary, config, rng: Optional[np.random.Generator] = None
) -> PairDataset:
    """Pairs for every document; with ``config.neg_ratio > 0`` negatives are capped at
    ``neg_ratio`` times the positive count (random subset drawn from ``rng``)."""
    samples: List[PairSample] = []
    expected = 0
    for doc in docs:
        n = len(doc.entities)
        expected += n * (n - 1)
        samples.extend(build_pairs(doc, vocab, config))
    skipped = expected - len(samples)
    if skipped:
        logger.warning("%d entity pairs skipped (marked span longer than max_seq_len)", skipped)
    ratio = getattr(config, "neg_ratio", 0.0)
    if ratio > 0:
        pos = [s for s in samples if s.labels.any()]
        neg = [s for s in samples if not s.labels.any()]
        cap = int(math.ceil(ratio * len(pos)))
        if len(neg) > cap:
            rng = rng if rng is not None else np.random.default_rng(0)
            keep = set(rng.choice(len(neg), size=cap, replace=False).tolist())
            neg_ids = {id(s) for i, s in enumerate(neg) if i in keep}
            samples = [s for s in samples if s.labels.any() or id(s) in neg_ids]
    return PairDataset(samples, skipped)


def collate(samples: Sequence[PairSample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into ``ids [B, T]``, ``mask [B, T]``, ``labels [B, C]``.

    Trailing columns that are padding in every sample are dropped; masked
    attention and masked pooling make this invisible to the model output.
    """
    width = max(s.length for s in samples)
    ids = np.stack([s.token_ids[:width] for s in samples])
    mask = np.stack([s.mask[:width] for s in samples])
    labels = np.stack([s.labels for s in samples]).astype(np.float64)
    return ids, mask, labels


# -- JSONL corpus format ----------------------------------------------------------


def document_to_json(doc: Document) -> dict:
    return {
        "id": doc.id,
        "text": doc.text,
        "entities": [
            {"id": e.id, "mention": e.mention, "start": e.char_start, "end": e.char_end,
             "type": e.entity_type, "attributes": list(e.attributes)}
            for e in doc.entities
        ],
        "relations": [
            {"head": r.head_entity_id, "tail": r.tail_entity_id, "label": r.label_id}
            for r in doc.relations
        ],
    }


def _field(record: dict, key: str, kind, doc_id: str, where: str = "document"):
    if key not in record:
        raise DataError(f"document {doc_id}: {where} is missing field {key!r}")
    value = record[key]
    ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
    if not ok:
        raise DataError(f"document {doc_id}: {where} field {key!r} has the wrong type")
    return value


def document_from_json(record, num_classes: Optional[int] = None, lineno: int = 0) -> Document:
    if not isinstance(record, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    doc_id = record.get("id", f"<line {lineno}>")
    doc_id = _field(record, "id", str, str(doc_id))
    text = _field(record, "text", str, doc_id)
    entities = []
    for raw in _field(record, "entities", list, doc_id):
        if not isinstance(raw, dict):
            raise DataError(f"document {doc_id}: entity entries must be objects")
        eid = raw.get("id", "?")
        where = f"entity {eid!r}"
        attrs = raw.get("attributes", [])
        if not isinstance(attrs, list) or not all(isinstance(a, str) for a in attrs):
            raise DataError(f"document {doc_id}: {where} field 'attributes' must be a list of strings")
        entities.append(Entity(
            id=_field(raw, "id", str, doc_id, where),
            mention=_field(raw, "mention", str, doc_id, where),
            char_start=_field(raw, "start", int, doc_id, where),
            char_end=_field(raw, "end", int, doc_id, where),
            entity_type=_field(raw, "type", str, doc_id, where),
            attributes=tuple(attrs),
        ))
    relations = []
    for raw in record.get("relations", []) or []:
        if not isinstance(raw, dict):
            raise DataError(f"document {doc_id}: relation entries must be objects")
        relations.append(RelationAnnotation(
            _field(raw, "head", str, doc_id, "relation"),
            _field(raw, "tail", str, doc_id, "relation"),
            _field(raw, "label", int, doc_id, "relation"),
        ))
    doc = Document(doc_id, text, tuple(entities), tuple(relations))
    doc.validate(num_classes)
    return doc


def load_corpus(path: str, num_classes: Optional[int] = None) -> List[Document]:
    docs = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            doc = document_from_json(record, num_classes, lineno)
            if doc.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate document id {doc.id!r}")
            seen.add(doc.id)
            docs.append(doc)
    return docs


def dumps_corpus(docs: Iterable[Document]) -> str:
    return "".join(json.dumps(document_to_json(d), ensure_ascii=False) + "\n" for d in docs)


def save_corpus(docs: Iterable[Document], path: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(dumps_corpus(docs))
    os.replace(tmp, path)


# -- synthetic corpora ------------------------------------------------------------

ENTITY_LEXICON = {
    "PERSONNE": ["Alice", "Bruno", "Chloe", "Damien", "Elise", "Fabien", "Gaelle", "Hugo",
                 "Ines", "Julien", "Karim", "Lea", "Marc", "Nadia"],
    "ORGANISATION": ["Astra", "Boreal", "Cobalt", "Delta", "Eolis", "Fenix", "Granit", "Helios",
                     "Iris", "Jade", "Krypton", "Lumen", "Mistral", "Nova"],
    "LIEU": ["Lyon", "Nantes", "Brest", "Dijon", "Lille", "Metz", "Nice", "Pau",
             "Reims", "Rouen", "Tours", "Caen", "Laval", "Vannes"],
    "VEHICULE": ["camion", "fourgon", "bateau", "avion", "tracteur", "scooter", "helicoptere",
                 "chalutier", "autocar", "remorque", "voilier", "moto", "taxi", "tramway"],
}
TRIGGERS = ["dirige", "finance", "visite", "surveille", "possede", "conduit", "attaque", "recrute",
            "protege", "quitte", "rejoint", "contacte", "livre", "menace", "soutient", "vend"]
NEUTRAL_LINKS = ["et", "ainsi que", "puis", "avec", "comme"]
FILLER = ["hier", "selon", "la", "source", "le", "rapport", "indique", "que", "matin", "vers",
          "midi", "officiellement", "discretement", "semble", "il", "apparait", "enfin"]


@dataclass(frozen=True)
class RelationSchema:
    trigger: str
    head_type: str
    tail_type: str


def relation_schemas(num_classes: int, seed: int) -> List[RelationSchema]:
    """Class ``c`` is signalled by its trigger word between a head of one type and a tail of
    another. Classes come in pairs sharing a type signature so that two relations can hold
    between the same ordered pair (multi-label samples)."""
    rng = np.random.default_rng([seed, 1])
    types = sorted(ENTITY_LEXICON)
    signatures = [(h, t) for h in types for t in types]
    order = rng.permutation(len(signatures))
    schemas = []
    for c in range(num_classes):
        head, tail = signatures[order[(c // 2) % len(signatures)]]
        trigger = TRIGGERS[c] if c < len(TRIGGERS) else f"relation{c}"
        schemas.append(RelationSchema(trigger, head, tail))
    return schemas


class _Cycle:
    """Draws class ids in shuffled rounds so every class recurs at a regular rate."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng, self.pool = n, rng, []

    def next(self) -> int:
        if not self.pool:
            self.pool = self.rng.permutation(self.n).tolist()
        return self.pool.pop()


def generate_synthetic(
    num_docs: int, entities_per_doc: int, num_classes: int, seed: int,
    relation_rate: float = 0.75, multi_label_rate: float = 0.25,
) -> List[Document]:
    """Seeded corpus where labels are a learnable function of entity types and trigger words.

    Entities are laid out two per clause. A relation clause reads
    ``<head> <trigger> <tail>`` with the entity types of the trigger's class; a
    neutral clause joins its two entities with a connective and carries no
    relation. Each document holds exactly ``entities_per_doc`` entities.
    """
    if num_docs <= 0 or entities_per_doc <= 0 or num_classes <= 0:
        raise ValueError("num_docs, entities_per_doc and num_classes must be positive")
    schemas = relation_schemas(num_classes, seed)
    by_signature = {}
    for c, s in enumerate(schemas):
        by_signature.setdefault((s.head_type, s.tail_type), []).append(c)
    types = sorted(ENTITY_LEXICON)
    rng = np.random.default_rng(seed)
    cycle = _Cycle(num_classes, rng)
    docs = []
    for d in range(num_docs):
        # clause plans: list of (entity types, link words, labels) for 1 or 2 entities
        plans = []
        remaining = entities_per_doc
        while remaining > 0:
            if remaining == 1:
                plans.append(([types[rng.integers(len(types))]], None, []))
                remaining -= 1
                continue
            if rng.random() < relation_rate:
                c = cycle.next()
                sig = (schemas[c].head_type, schemas[c].tail_type)
                labels = [c]
                partners = [k for k in by_signature[sig] if k != c]
                if partners and rng.random() < multi_label_rate:
                    labels.append(partners[0])
                words = " et ".join(schemas[k].trigger for k in labels)
                plans.append((list(sig), words, labels))
            else:
                pair = [types[rng.integers(len(types))] for _ in range(2)]
                plans.append((pair, NEUTRAL_LINKS[rng.integers(len(NEUTRAL_LINKS))], []))
            remaining -= 2
        plans = [plans[i] for i in rng.permutation(len(plans))]

        used = {t: 0 for t in types}
        lex_order = {t: rng.permutation(len(ENTITY_LEXICON[t])).tolist() for t in types}

        def mention_for(etype: str) -> str:
            k = used[etype]
            used[etype] += 1
            lex = ENTITY_LEXICON[etype]
            name = lex[lex_order[etype][k % len(lex)]]
            return name if k < len(lex) else f"{name}{k // len(lex)}"

        text = ""
        entities: List[Entity] = []
        relations: List[RelationAnnotation] = []

        def emit(word: str) -> None:
            nonlocal text
            text += (" " if text else "") + word

        def emit_entity(etype: str) -> Entity:
            nonlocal text
            mention = mention_for(etype)
            if text:
                text += " "
            ent = Entity(f"T{len(entities) + 1}", mention, len(text), len(text) + len(mention), etype)
            text += mention
            entities.append(ent)
            return ent

        for etypes, link, labels in plans:
            for _ in range(int(rng.integers(0, 3))):
                emit(FILLER[rng.integers(len(FILLER))])
            first = emit_entity(etypes[0])
            if len(etypes) == 2:
                emit(link)
                second = emit_entity(etypes[1])
                for c in labels:
                    relations.append(RelationAnnotation(first.id, second.id, c))
            for _ in range(int(rng.integers(0, 2))):
                emit(FILLER[rng.integers(len(FILLER))])
            emit(".")
        doc = Document(f"doc{d:05d}", text, tuple(entities), tuple(relations))
        doc.validate(num_classes)
        docs.append(doc)
    return docs
