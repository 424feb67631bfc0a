"""Tokenization, sentence splitting, review-corpus preparation and SemEval ingestion."""
from __future__ import annotations

import enum
import hashlib
import json
import random
import re
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InsufficientData, MalformedXml, OffsetOutOfRange

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
DEFAULT_VOCAB_SIZE = 8192

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class Domain(str, enum.Enum):
    LAPTOPS = "laptops"
    RESTAURANTS = "restaurants"
    JOINT = "joint"

    @classmethod
    def parse(cls, value: "str | Domain") -> "Domain":
        if isinstance(value, Domain):
            return value
        key = value.strip().lower()
        aliases = {"lapt": "laptops", "laptop": "laptops", "rest": "restaurants",
                   "restaurant": "restaurants", "lapt+rest": "joint"}
        return cls(aliases.get(key, key))

    @property
    def short(self) -> str:
        return {"laptops": "Lapt", "restaurants": "Rest", "joint": "Joint"}[self.value]


SINGLE_DOMAINS = (Domain.LAPTOPS, Domain.RESTAURANTS)


class Polarity(enum.IntEnum):
    # index order is the classifier's output order
    POSITIVE = 0
    NEGATIVE = 1
    NEUTRAL = 2

    @classmethod
    def parse(cls, value: str) -> "Polarity":
        return cls[value.strip().upper()]


class Vocab:
    """Token <-> id mapping with the five special tokens at ids 0..4."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        self.pad_id, self.unk_id, self.cls_id, self.sep_id, self.mask_id = range(5)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(SPECIAL_TOKENS)))

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.id_to_token).encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        return cls([t for t in lines if t])


def build_vocab(sentences: Iterable[Sequence[str]], max_size: int = DEFAULT_VOCAB_SIZE) -> Vocab:
    """Top-(max_size - 5) tokens by frequency; ties broken alphabetically."""
    counts = Counter(t for sent in sentences for t in sent if t not in SPECIAL_TOKENS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [t for t, _ in ranked[: max(0, max_size - len(SPECIAL_TOKENS))]]
    return Vocab(list(SPECIAL_TOKENS) + keep)


def token_offsets(text: str) -> list[tuple[str, int, int]]:
    return [(m.group().lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def word_tokens(text: str) -> list[str]:
    return [m.group().lower() for m in _TOKEN_RE.finditer(text)]


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Lowercased word/punctuation tokens mapped to ids; unknown words become [UNK]."""
    return vocab.encode(word_tokens(text))


def normalize_sentence(text: str) -> str:
    # token-level normalization subsumes lowercasing and whitespace collapsing
    return " ".join(word_tokens(text))


ABBREVIATIONS = frozenset({
    "mr.", "mrs.", "ms.", "dr.", "prof.", "sr.", "jr.", "st.", "vs.", "etc.",
    "e.g.", "i.e.", "approx.", "no.", "inc.", "ltd.", "co.", "ave.", "min.",
})
_BOUNDARY_RE = re.compile(r"[.!?]+[\"')\]]*(?=\s)")


def split_sentences(text: str) -> list[str]:
    """Split after terminal punctuation followed by whitespace, except after known abbreviations."""
    sentences = []
    start = 0
    for m in _BOUNDARY_RE.finditer(text):
        word_start = max(text.rfind(ws, 0, m.start()) for ws in " \t\n\r") + 1
        last_word = text[word_start:m.end()].lower()
        if m.group().startswith(".") and last_word in ABBREVIATIONS:
            continue
        piece = text[start:m.end()].strip()
        if piece:
            sentences.append(piece)
        start = m.end()
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


@dataclass
class ReviewDoc:
    doc_id: str
    sentences: list[list[str]]
    domain: Domain

    def __post_init__(self) -> None:
        self.domain = Domain.parse(self.domain)
        for sent in self.sentences:
            if any(not tok for tok in sent):
                raise ValueError(f"empty token in doc {self.doc_id}")

    @property
    def num_sentences(self) -> int:
        return len(self.sentences)


def make_doc(doc_id: str, text: str, domain: Domain | str) -> ReviewDoc:
    sents = [word_tokens(s) for s in split_sentences(text)]
    return ReviewDoc(doc_id, [s for s in sents if s], Domain.parse(domain))


def read_reviews(path: str | Path, domain: Domain | str) -> list[ReviewDoc]:
    """Read a JSON-lines review file (`text`, optional `id`) into sentence-split docs."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            record = json.loads(line)
            doc_id = str(record.get("id", f"{Path(path).stem}:{lineno}"))
            docs.append(make_doc(doc_id, record["text"], domain))
    return docs


def filter_short_reviews(docs: Sequence[ReviewDoc]) -> list[ReviewDoc]:
    return [d for d in docs if d.num_sentences >= 2]


def dedup_against_eval(docs: Sequence[ReviewDoc], eval_sentences: set[str]) -> list[ReviewDoc]:
    """Drop every document that shares at least one normalized sentence with the eval set."""
    return [d for d in docs if not any(" ".join(s) in eval_sentences for s in d.sentences)]


def sample_sentences(docs: Sequence[ReviewDoc], n: int, seed: int) -> list[ReviewDoc]:
    """Shuffle whole documents and keep them until at least `n` sentences are collected."""
    total = sum(d.num_sentences for d in docs)
    if total < n:
        raise InsufficientData(f"requested {n} sentences but corpus has {total}")
    order = list(docs)
    random.Random(seed).shuffle(order)
    picked, count = [], 0
    for doc in order:
        if count >= n:
            break
        picked.append(doc)
        count += doc.num_sentences
    return picked


@dataclass
class AtscExample:
    tokens: list[str]
    target_start: int
    target_len: int
    label: Polarity
    domain: Domain
    split: str = "train"
    sentence_id: str = ""

    def __post_init__(self) -> None:
        self.label = Polarity(self.label)
        self.domain = Domain.parse(self.domain)
        if self.target_len < 1 or self.target_start < 0 or self.target_start + self.target_len > len(self.tokens):
            raise ValueError(f"target span ({self.target_start}, {self.target_len}) invalid "
                             f"for {len(self.tokens)} tokens")

    @property
    def target(self) -> list[str]:
        return self.tokens[self.target_start:self.target_start + self.target_len]

    @property
    def target_span(self) -> tuple[int, int]:
        return self.target_start, self.target_len


@dataclass
class LabelCounts:
    counts: dict[str, dict[Polarity, int]] = field(default_factory=dict)
    conflicts: dict[str, int] = field(default_factory=dict)

    def add(self, split: str, label: Polarity) -> None:
        per = self.counts.setdefault(split, {p: 0 for p in Polarity})
        per[label] += 1

    def add_conflict(self, split: str) -> None:
        self.conflicts[split] = self.conflicts.get(split, 0) + 1
        self.counts.setdefault(split, {p: 0 for p in Polarity})

    def total(self, split: str | None = None) -> int:
        splits = [split] if split else list(self.counts)
        return sum(sum(self.counts.get(s, {}).values()) for s in splits)

    def as_tuple(self, split: str) -> tuple[int, int, int]:
        per = self.counts.get(split, {})
        return tuple(per.get(p, 0) for p in Polarity)  # type: ignore[return-value]

    def merge(self, other: "LabelCounts") -> "LabelCounts":
        out = LabelCounts()
        for src in (self, other):
            for split, per in src.counts.items():
                for p, c in per.items():
                    out.counts.setdefault(split, {q: 0 for q in Polarity})[p] += c
            for split, c in src.conflicts.items():
                out.conflicts[split] = out.conflicts.get(split, 0) + c
        return out

    def to_dict(self) -> dict:
        return {split: {**{p.name.lower(): c for p, c in per.items()},
                        "conflict": self.conflicts.get(split, 0)}
                for split, per in self.counts.items()}


# Official SemEval 2014 label counts, (positive, negative, neutral).
REFERENCE_LABEL_COUNTS = {
    (Domain.LAPTOPS, "train"): (987, 866, 460),
    (Domain.LAPTOPS, "test"): (341, 128, 169),
    (Domain.RESTAURANTS, "train"): (2164, 805, 633),
    (Domain.RESTAURANTS, "test"): (728, 196, 196),
}


def _guess_split(path: Path) -> str:
    return "test" if "test" in path.name.lower() else "train"


def _guess_domain(path: Path) -> Domain:
    name = path.name.lower()
    if "lap" in name:
        return Domain.LAPTOPS
    if "rest" in name:
        return Domain.RESTAURANTS
    raise ValueError(f"cannot infer domain from {path.name}; pass domain explicitly")


def char_span_to_tokens(offsets: Sequence[tuple[str, int, int]], start: int, end: int) -> tuple[int, int]:
    """Minimal token span (first index, length) covering characters [start, end)."""
    hits = [i for i, (_, s, e) in enumerate(offsets) if s < end and e > start]
    if start < 0 or end <= start or not hits:
        raise OffsetOutOfRange(f"character span [{start}, {end}) covers no token")
    return hits[0], hits[-1] - hits[0] + 1


def parse_semeval_xml(path: str | Path, split: str | None = None,
                      domain: Domain | str | None = None) -> tuple[list[AtscExample], LabelCounts]:
    """Read a SemEval 2014 Task 4 aspect-term file; conflict terms are counted and dropped."""
    path = Path(path)
    split = split or _guess_split(path)
    domain = Domain.parse(domain) if domain else _guess_domain(path)
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise MalformedXml(f"{path}: {exc}") from exc
    examples: list[AtscExample] = []
    counts = LabelCounts()
    counts.counts.setdefault(split, {p: 0 for p in Polarity})
    for sent in root.iter("sentence"):
        text_el = sent.find("text")
        if text_el is None or text_el.text is None:
            raise MalformedXml(f"{path}: sentence {sent.get('id')} has no text")
        text = text_el.text
        offsets = token_offsets(text)
        terms = sent.find("aspectTerms")
        for term in ([] if terms is None else terms.findall("aspectTerm")):
            polarity = term.get("polarity")
            if polarity is None or term.get("from") is None or term.get("to") is None:
                raise MalformedXml(f"{path}: incomplete aspectTerm in sentence {sent.get('id')}")
            if polarity.lower() == "conflict":
                counts.add_conflict(split)
                continue
            start, end = int(term.get("from")), int(term.get("to"))
            if end > len(text):
                raise OffsetOutOfRange(f"{path}: offset {end} beyond sentence {sent.get('id')}")
            j, m = char_span_to_tokens(offsets, start, end)
            label = Polarity.parse(polarity)
            examples.append(AtscExample([t for t, _, _ in offsets], j, m, label, domain, split,
                                        sentence_id=str(sent.get("id", ""))))
            counts.add(split, label)
    return examples, counts


def semeval_sentences(path: str | Path) -> set[str]:
    """Normalized sentence texts of a SemEval file, for leakage filtering."""
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise MalformedXml(f"{path}: {exc}") from exc
    return {normalize_sentence(el.text or "") for el in root.iter("text")}


def write_semeval_xml(path: str | Path, sentences: Sequence[tuple[str, Sequence[tuple[str, str, int, int]]]]) -> None:
    """Write (text, [(term, polarity, from, to), ...]) records in the SemEval layout."""
    root = ET.Element("sentences")
    for idx, (text, terms) in enumerate(sentences):
        sent = ET.SubElement(root, "sentence", id=str(idx))
        ET.SubElement(sent, "text").text = text
        if terms:
            holder = ET.SubElement(sent, "aspectTerms")
            for term, polarity, start, end in terms:
                ET.SubElement(holder, "aspectTerm", term=term, polarity=polarity,
                              **{"from": str(start), "to": str(end)})
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


@dataclass
class CorpusManifest:
    domain: str
    input_docs: int = 0
    dropped_short: int = 0
    dedup_removed: int = 0
    doc_count: int = 0
    sentence_count: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def prepare_corpus(docs: Sequence[ReviewDoc], eval_sentences: set[str] | None = None,
                   n_sentences: int | None = None, seed: int = 0) -> tuple[list[ReviewDoc], CorpusManifest]:
    """filter -> dedup -> sample, returning the kept docs and their manifest."""
    domain = docs[0].domain.value if docs else ""
    manifest = CorpusManifest(domain=domain, input_docs=len(docs), seed=seed)
    kept = filter_short_reviews(docs)
    manifest.dropped_short = len(docs) - len(kept)
    if eval_sentences:
        before = len(kept)
        kept = dedup_against_eval(kept, eval_sentences)
        manifest.dedup_removed = before - len(kept)
    if n_sentences is not None:
        kept = sample_sentences(kept, n_sentences, seed)
    manifest.doc_count = len(kept)
    manifest.sentence_count = sum(d.num_sentences for d in kept)
    return kept, manifest


def write_docs(path: str | Path, docs: Iterable[ReviewDoc]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps({"id": d.doc_id, "domain": d.domain.value,
                                 "sentences": d.sentences}) + "\n")


def read_docs(path: str | Path) -> list[ReviewDoc]:
    with open(path, encoding="utf-8") as fh:
        return [ReviewDoc(r["id"], r["sentences"], r["domain"])
                for r in map(json.loads, fh) if r]
