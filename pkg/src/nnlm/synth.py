"""Deterministic synthetic corpora for the bundled experiments.

Articles are built from sentence templates over per-domain word pools, with
a shared pool of exact-repeat "factoid" sentences. Slot fills are Zipf
weighted, so rare entities form a long tail: the regime where explicit
retrieval of repeated contexts pays off. Everything is a pure function of
the seed, so generated files are bit-identical across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_CONSONANTS = "b c d f g h k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()


def _syllables(offset: int) -> list[str]:
    sylls = [c + v for c in _CONSONANTS for v in _VOWELS]
    return sylls[offset:] + sylls[:offset]


def _word_pool(rng: np.random.Generator, count: int, n_syll: int, offset: int, suffix: str = "") -> list[str]:
    sylls = _syllables(offset)
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < count:
        w = "".join(rng.choice(sylls) for _ in range(n_syll)) + suffix
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def _zipf_weights(n: int, exponent: float = 1.05) -> np.ndarray:
    w = 1.0 / np.arange(2, n + 2) ** exponent
    return w / w.sum()


@dataclass(frozen=True)
class DomainSpec:
    """Word pools and sentence templates for one text domain."""

    name: str
    seed: int
    syllable_offset: int = 0
    n_entities: int = 280
    n_nouns: int = 90
    n_verbs: int = 45
    n_adjectives: int = 45
    n_years: int = 50
    n_factoids: int = 220
    factoid_prob: float = 0.35
    sentences_per_article: tuple[int, int] = (18, 50)
    templates: tuple[tuple[str, ...], ...] = (
        ("the", "N", "of", "E", "V", "the", "A", "N", "."),
        ("E", "V", "the", "N", "in", "Y", "."),
        ("in", "Y", "the", "A", "N", "of", "E", "V", "."),
        ("E", "and", "E", "V", "a", "A", "N", "."),
        ("the", "N", "near", "E", "V", "in", "Y", "."),
        ("a", "A", "N", "of", "the", "N", "V", "E", "."),
        ("E", "V", "E", "during", "the", "N", "of", "Y", "."),
        ("the", "A", "A", "N", "V", "the", "N", "."),
        ("after", "Y", "E", "V", "the", "N", "of", "E", "."),
        ("the", "N", "of", "the", "N", "V", "near", "E", "in", "Y", "."),
    )


# Second domain: different syllable rotation, different sentence shapes.
DOMAIN_A = DomainSpec(name="alpha", seed=1001, syllable_offset=0)
DOMAIN_B = DomainSpec(
    name="beta",
    seed=2002,
    syllable_offset=37,
    templates=(
        ("E", "reacts", "with", "E", "to", "V", "the", "N", "."),
        ("the", "N", "contains", "a", "A", "N", "of", "E", "."),
        ("when", "E", "V", "the", "N", "becomes", "A", "."),
        ("E", "V", "at", "Y", "degrees", "in", "the", "N", "."),
        ("a", "A", "N", "binds", "the", "N", "of", "E", "."),
        ("the", "A", "N", "of", "E", "V", "the", "E", "sample", "."),
        ("E", "and", "the", "N", "V", "under", "A", "pressure", "."),
        ("each", "N", "of", "E", "V", "a", "A", "N", "."),
    ),
)


class _DomainSampler:
    def __init__(self, spec: DomainSpec, rng: np.random.Generator):
        pool_rng = np.random.default_rng(spec.seed)
        self.rng = rng
        off = spec.syllable_offset
        self.pools: dict[str, list[str]] = {
            "E": _word_pool(pool_rng, spec.n_entities, 3, off),
            "N": _word_pool(pool_rng, spec.n_nouns, 2, off),
            "V": _word_pool(pool_rng, spec.n_verbs, 2, off, suffix="s"),
            "A": _word_pool(pool_rng, spec.n_adjectives, 2, off, suffix="l"),
            "Y": [str(y) for y in pool_rng.choice(np.arange(1500, 2020), spec.n_years, replace=False)],
        }
        self.weights = {k: _zipf_weights(len(v)) for k, v in self.pools.items()}
        self.spec = spec
        self.factoids = [self._fresh_sentence(pool_rng) for _ in range(spec.n_factoids)]
        self.factoid_weights = _zipf_weights(spec.n_factoids, exponent=0.9)

    def _fresh_sentence(self, rng: np.random.Generator) -> list[str]:
        tpl = self.spec.templates[rng.integers(len(self.spec.templates))]
        out = []
        for item in tpl:
            if item in self.pools:
                pool = self.pools[item]
                out.append(pool[rng.choice(len(pool), p=self.weights[item])])
            else:
                out.append(item)
        return out

    def sentence(self) -> list[str]:
        if self.rng.random() < self.spec.factoid_prob:
            return self.factoids[self.rng.choice(self.spec.n_factoids, p=self.factoid_weights)]
        return self._fresh_sentence(self.rng)

    def article(self) -> list[str]:
        lo, hi = self.spec.sentences_per_article
        n_sent = int(self.rng.integers(lo, hi + 1))
        return [" ".join(self.sentence()) for _ in range(n_sent)]


def generate_corpus(spec: DomainSpec, n_tokens: int, stream_seed: int) -> str:
    """Roughly ``n_tokens`` of text (always whole articles), one article per
    paragraph, sentences as lines."""
    sampler = _DomainSampler(spec, np.random.default_rng(stream_seed))
    articles: list[str] = []
    total = 0
    while total < n_tokens:
        art = sampler.article()
        articles.append("\n".join(art))
        total += sum(len(s.split()) for s in art)
    return "\n\n".join(articles) + "\n"


@dataclass(frozen=True)
class MemorizationCorpus:
    train_text: str
    dev_text: str
    distinct_articles: int = field(default=0)


def generate_memorization_corpus(
    n_articles: int = 22,
    sentences_per_article: int = 9,
    repeats: int = 5,
    n_dev_articles: int = 8,
    seed: int = 3003,
) -> MemorizationCorpus:
    """Small corpus of distinct articles, each repeated ``repeats`` times.

    Each article opens with a unique topic token, so with a context window
    that covers it, every later position in the article is predictable;
    the irreducible entropy is confined to the first token of each article.
    Dev articles are fresh draws from the same templates, so retrieval from
    the training set still finds matching contexts.
    """
    spec = DomainSpec(
        name="memorize",
        seed=seed,
        n_entities=60,
        n_nouns=30,
        n_verbs=20,
        n_adjectives=20,
        n_years=20,
        n_factoids=40,
        factoid_prob=0.3,
        sentences_per_article=(sentences_per_article, sentences_per_article),
    )
    sampler = _DomainSampler(spec, np.random.default_rng(seed + 1))
    topics = _word_pool(np.random.default_rng(seed + 2), n_articles + n_dev_articles, 4, 11)
    articles = []
    for i in range(n_articles + n_dev_articles):
        body = sampler.article()
        articles.append(f"topic {topics[i]}\n" + "\n".join(body))
    train_distinct = articles[:n_articles]
    dev_articles = articles[n_articles:]
    order_rng = np.random.default_rng(seed + 3)
    repeated = [a for a in train_distinct for _ in range(repeats)]
    order = order_rng.permutation(len(repeated))
    train_text = "\n\n".join(repeated[i] for i in order) + "\n"
    dev_text = "\n\n".join(dev_articles) + "\n"
    return MemorizationCorpus(train_text=train_text, dev_text=dev_text, distinct_articles=n_articles)


PENCIL_TEXT = """the cat sat on the mat
the dog sat on the mat

the cat ran to the dog
the mat sat on the cat
"""
