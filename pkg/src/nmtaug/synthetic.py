"""Generators for small artificial bilingual corpora with controlled synonymy."""
from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from .corpus import SentencePair


def _words(rng: np.random.Generator, count: int, taken: set[str], length: int = 5) -> list[str]:
    out = []
    letters = np.array(list(string.ascii_lowercase))
    while len(out) < count:
        w = "".join(rng.choice(letters, size=length))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def synonym_pair_corpus(n_pairs: int = 2000, classes: int = 6, concepts: int = 4, seed: int = 0) -> list[SentencePair]:
    """Every slot picks a concept and one of two source synonyms, each with its own target word.

    Sentences on both sides list one word per class in a fixed order, and the
    synonym choices are independent across slots.  A masked source word is
    therefore recoverable from the aligned target word but, from the source
    sentence alone, only up to its class.
    """
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    src = [[_words(rng, 2, taken) for _ in range(concepts)] for _ in range(classes)]
    tgt = [[_words(rng, 2, taken) for _ in range(concepts)] for _ in range(classes)]
    pairs = []
    for _ in range(n_pairs):
        c = rng.integers(concepts, size=classes)
        s = rng.integers(2, size=classes)
        x = " ".join(src[k][c[k]][s[k]] for k in range(classes))
        y = " ".join(tgt[k][c[k]][s[k]] for k in range(classes))
        pairs.append(SentencePair(x, y))
    return pairs


@dataclass
class Lexicon:
    """Concept inventory: per class, per concept, source synonyms with weights and target words."""

    source: list[list[list[str]]]
    source_weights: list[list[np.ndarray]]
    target: list[list[list[str]]]
    target_of: list[list[list[int]]]
    concept_weights: list[np.ndarray]


# class order on the source side; the target side moves adjectives after nouns
# and the verb to the end
_SRC_ORDER = ("det", "adj", "noun", "verb", "det", "adj", "noun", "adv")
_CLASSES = ("det", "adj", "noun", "verb", "adv")


def build_lexicon(rng: np.random.Generator, concepts_per_class: int = 24, max_synonyms: int = 3) -> Lexicon:
    taken: set[str] = set()
    source, weights, target, target_of, concept_weights = [], [], [], [], []
    for cls in _CLASSES:
        n = 4 if cls == "det" else concepts_per_class
        zipf = 1.0 / np.arange(1, n + 1)
        concept_weights.append(zipf / zipf.sum())
        src_c, w_c, tgt_c, map_c = [], [], [], []
        for _ in range(n):
            k = 1 if cls == "det" else int(rng.integers(1, max_synonyms + 1))
            syn = _words(rng, k, taken, length=int(rng.integers(4, 8)))
            w = np.array([0.8**i * (1.0 if i == 0 else 0.35) for i in range(k)])
            # a concept renders as one target word, or two when it has 3 source synonyms
            n_tgt = 2 if k == 3 else 1
            tw = _words(rng, n_tgt, taken, length=int(rng.integers(4, 8)))
            mapping = [0] * k if n_tgt == 1 else [0, 0, 1]
            src_c.append(syn)
            w_c.append(w / w.sum())
            tgt_c.append(tw)
            map_c.append(mapping)
        source.append(src_c)
        weights.append(w_c)
        target.append(tgt_c)
        target_of.append(map_c)
    return Lexicon(source, weights, target, target_of, concept_weights)


def _sentence(lex: Lexicon, rng: np.random.Generator, uniform_synonyms: bool) -> SentencePair:
    cls_index = {c: i for i, c in enumerate(_CLASSES)}
    picks = []
    for role, cls in enumerate(_SRC_ORDER):
        k = cls_index[cls]
        if cls == "adj" and rng.random() < 0.5:
            continue
        if role >= 4 and cls != "adv" and rng.random() < 0.4:
            continue
        if cls == "adv" and rng.random() < 0.5:
            continue
        c = int(rng.choice(len(lex.concept_weights[k]), p=lex.concept_weights[k]))
        syn = lex.source[k][c]
        w = np.full(len(syn), 1.0 / len(syn)) if uniform_synonyms else lex.source_weights[k][c]
        s = int(rng.choice(len(syn), p=w))
        picks.append((role, cls, k, c, s))
    x = [lex.source[k][c][s] for _, _, k, c, s in picks]
    # target: noun before adjective within each phrase, verb last
    phrases: list[list[tuple]] = [[], []]
    verb = adv = None
    for item in picks:
        role, cls = item[0], item[1]
        if cls == "verb":
            verb = item
        elif cls == "adv":
            adv = item
        else:
            phrases[0 if role < 4 else 1].append(item)
    order = []
    for phrase in phrases:
        order += [p for p in phrase if p[1] == "det"] + [p for p in phrase if p[1] == "noun"]
        order += [p for p in phrase if p[1] == "adj"]
    order += [p for p in (adv, verb) if p is not None]
    y = [lex.target[k][c][lex.target_of[k][c][s]] for _, _, k, c, s in order]
    return SentencePair(" ".join(x), " ".join(y))


def synonym_rich_corpus(
    n_train: int = 5000, n_test: int = 500, seed: int = 0, concepts_per_class: int = 120
) -> tuple[list[SentencePair], list[SentencePair]]:
    """A reordering translation task whose source side has skewed synonym usage.

    Training sentences draw source synonyms with skewed weights, so rare
    synonyms are seen only a few times; held-out sentences draw them uniformly.
    """
    rng = np.random.default_rng(seed)
    lex = build_lexicon(rng, concepts_per_class)
    train = [_sentence(lex, rng, uniform_synonyms=False) for _ in range(n_train)]
    test = [_sentence(lex, rng, uniform_synonyms=True) for _ in range(n_test)]
    return train, test
