"""Synthetic review domains for desk-scale experiments and fixtures.

Both domains share function words, generic sentiment words and sentiment-bearing follow-up
phrases.  Each domain adds its own aspect nouns and its own sentiment adjectives, which never occur
in the general (pre-training) corpus.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from .text import AtscExample, Domain, Polarity, ReviewDoc

ADVERBS = ("very", "really", "quite", "so", "truly")
SHARED_SENTIMENT = {
    Polarity.POSITIVE: ("good", "great", "nice", "excellent", "fantastic"),
    Polarity.NEGATIVE: ("bad", "awful", "poor", "terrible", "horrible"),
}
FOLLOW_UPS = {
    Polarity.POSITIVE: ("i loved it .", "i will come back .", "highly recommended .", "we were happy .",
                        "five stars from me .", "what a treat ."),
    Polarity.NEGATIVE: ("i hated it .", "never again .", "what a waste .", "we were upset .",
                        "one star from me .", "what a letdown ."),
    Polarity.NEUTRAL: ("that is all .", "nothing else to add .", "we left at noon .", "it was a tuesday ."),
}
GENERIC_ASPECTS = ("thing", "item", "product", "service", "experience", "place", "order", "staff")
NEUTRAL_TEMPLATES = ("i saw the {a} today .", "the {a} is on the left .", "we talked about the {a} .",
                     "they showed us the {a} .", "there is a {a} here .")
SENTIMENT_TEMPLATES = ("the {a} was {adv} {w} .", "the {a} is {w} .", "this {a} was {w} .",
                       "honestly the {a} was {adv} {w} .")
# corpus sentences often carry a polarity cue next to the sentiment word
CUES = {
    Polarity.POSITIVE: ("and i loved it", "and we were happy", "so i will come back"),
    Polarity.NEGATIVE: ("and i hated it", "and we were upset", "so never again"),
}
CUE_RATE = 0.5

DOMAIN_ASPECTS = {
    Domain.RESTAURANTS: ("pizza", "pasta", "waiter", "soup", "dessert", "menu", "salad", "burger",
                         "sushi", "dumplings"),
    Domain.LAPTOPS: ("battery", "screen", "keyboard", "trackpad", "fan", "charger", "touchscreen",
                     "speaker", "hinge", "webcam"),
}
DOMAIN_SENTIMENT = {
    Domain.RESTAURANTS: {
        Polarity.POSITIVE: ("delicious", "tasty", "savory", "juicy", "flavorful"),
        Polarity.NEGATIVE: ("bland", "soggy", "stale", "greasy", "undercooked"),
    },
    Domain.LAPTOPS: {
        Polarity.POSITIVE: ("speedy", "snappy", "responsive", "sleek", "crisp"),
        Polarity.NEGATIVE: ("laggy", "sluggish", "buggy", "flimsy", "glitchy"),
    },
}


def _sentiment_sentence(rng: random.Random, aspect: str, word: str) -> list[str]:
    template = rng.choice(SENTIMENT_TEMPLATES)
    return template.format(a=aspect, adv=rng.choice(ADVERBS), w=word).split()


def _cued_sentence(rng: random.Random, aspect: str, word: str, polarity: Polarity) -> list[str]:
    words = _sentiment_sentence(rng, aspect, word)
    if rng.random() < CUE_RATE:
        words = words[:-1] + rng.choice(CUES[polarity]).split() + ["."]
    return words


def _pick(rng: random.Random, words, specific_rate: float) -> str:
    if isinstance(words[0], tuple):
        specific, shared = words
        return rng.choice(specific if rng.random() < specific_rate else shared)
    return rng.choice(words)


def _doc(rng: random.Random, doc_id: str, domain: Domain, aspects, words_by_pol,
         n_sentences: tuple[int, int], specific_rate: float = 0.0) -> ReviewDoc:
    # one polarity per document so sentiment words co-occur with matching follow-ups
    polarity = rng.choice([Polarity.POSITIVE, Polarity.NEGATIVE])
    sents = []
    for _ in range(rng.randint(*n_sentences)):
        r = rng.random()
        if r < 0.6:
            word = _pick(rng, words_by_pol[polarity], specific_rate)
            sents.append(_cued_sentence(rng, rng.choice(aspects), word, polarity))
        elif r < 0.85:
            sents.append(rng.choice(FOLLOW_UPS[polarity]).split())
        else:
            sents.append(rng.choice(NEUTRAL_TEMPLATES).format(a=rng.choice(aspects)).split())
    return ReviewDoc(doc_id, sents, domain)


def general_corpus(n_docs: int, seed: int, n_sentences: tuple[int, int] = (3, 6)) -> list[ReviewDoc]:
    """Domain-neutral reviews with only shared vocabulary (the pre-training stand-in)."""
    rng = random.Random(seed)
    # ReviewDoc needs a domain label; general text is tagged laptops but contains no domain words
    return [_doc(rng, f"gen-{i:06d}", Domain.LAPTOPS, GENERIC_ASPECTS, SHARED_SENTIMENT, n_sentences)
            for i in range(n_docs)]


def domain_corpus(domain: Domain, n_docs: int, seed: int, specific_rate: float = 0.5,
                  n_sentences: tuple[int, int] = (3, 6)) -> list[ReviewDoc]:
    """Domain reviews; each sentiment sentence uses a domain-specific word with probability `specific_rate`."""
    rng = random.Random(seed)
    specific = DOMAIN_SENTIMENT[domain]
    return [_doc(rng, f"{domain.value[:4]}-{i:06d}", domain, DOMAIN_ASPECTS[domain],
                 {p: (specific[p], SHARED_SENTIMENT[p]) for p in specific}, n_sentences, specific_rate)
            for i in range(n_docs)]


def atsc_dataset(domain: Domain, n: int, seed: int, split: str = "train",
                 vocabulary: str = "mixed", neutral_rate: float = 1 / 3) -> list[AtscExample]:
    """Labeled aspect-target sentences.

    vocabulary: "mixed" draws sentiment words from shared and domain-specific lists, "specific"
    only from the domain-specific list, "shared" only from the shared list.
    """
    rng = random.Random(seed)
    out = []
    for i in range(n):
        aspect = rng.choice(DOMAIN_ASPECTS[domain])
        if rng.random() < neutral_rate:
            tokens = rng.choice(NEUTRAL_TEMPLATES).format(a=aspect).split()
            label = Polarity.NEUTRAL
        else:
            label = rng.choice([Polarity.POSITIVE, Polarity.NEGATIVE])
            pools = {"mixed": SHARED_SENTIMENT[label] + DOMAIN_SENTIMENT[domain][label],
                     "specific": DOMAIN_SENTIMENT[domain][label],
                     "shared": SHARED_SENTIMENT[label]}[vocabulary]
            tokens = _sentiment_sentence(rng, aspect, rng.choice(pools))
        out.append(AtscExample(tokens, tokens.index(aspect), 1, label, domain, split, f"{domain.value}-{split}-{i}"))
    return out


def review_text(doc: ReviewDoc) -> str:
    """Surface text for a tokenized synthetic doc ("the pizza was good ." -> "The pizza was good.")."""
    out = []
    for sent in doc.sentences:
        body = " ".join(sent[:-1]) + sent[-1] if sent[-1] in ".!?" else " ".join(sent)
        out.append(body[:1].upper() + body[1:])
    return " ".join(out)


@dataclass
class SentenceCountFixture:
    """Documents with known sentence counts for corpus-stage tests."""
    texts: list[str]
    counts: list[int]


def sentence_count_fixture(n_docs: int, seed: int, max_sentences: int = 5) -> SentenceCountFixture:
    rng = random.Random(seed)
    texts, counts = [], []
    for _ in range(n_docs):
        k = rng.randint(1, max_sentences)
        sents = []
        for _ in range(k):
            words = [rng.choice(("food", "staff", "price", "view", "music", "room", "wifi")) for _ in range(rng.randint(2, 6))]
            sents.append(" ".join(words).capitalize() + rng.choice(".!?"))
        texts.append(" ".join(sents))
        counts.append(k)
    return SentenceCountFixture(texts, counts)
