"""Augmentation operators.

* soft substitution: replace a token embedding by the expectation of the
  embedding matrix under a CMLM distribution;
* hard substitution: replace token ids by draws (or argmax) from that
  distribution;
* context-free noise baselines: swap, drop, blank, smooth.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cmlm import example_with_positions, predict_masked_batch
from .corpus import BOS, CLS, EOS, MASK, PAD, SEP, PaddedBatch, TokenizedPair
from .errors import ConfigError
from .model import CmlmModel
from .numcore import Tensor
from .numcore import functional as F

NEVER_SUBSTITUTE = (PAD, BOS, EOS, SEP, CLS, MASK)
N_SPECIAL = 7


@dataclass
class SoftDistribution:
    probs: np.ndarray
    position: int

    def __post_init__(self):
        if self.probs.ndim != 1:
            raise ValueError("a distribution is a 1-D probability vector")


def renormalize(probs: np.ndarray) -> np.ndarray:
    """Zero the mass on structural specials and rescale to sum to one."""
    out = np.array(probs, dtype=np.float64)
    out[list(NEVER_SUBSTITUTE)] = 0.0
    total = out.sum()
    if total <= 0.0:
        out[:] = 0.0
        out[N_SPECIAL:] = 1.0
        total = out.sum()
    return out / total


def soft_embedding(dist: SoftDistribution | np.ndarray, E) -> np.ndarray:
    """The probability-weighted average of the embedding rows."""
    probs = dist.probs if isinstance(dist, SoftDistribution) else np.asarray(dist)
    matrix = E.data if isinstance(E, Tensor) else np.asarray(E)
    if matrix.ndim != 2 or matrix.shape[0] != probs.shape[0]:
        raise ValueError(f"distribution over {probs.shape[0]} tokens vs embedding matrix {matrix.shape}")
    return probs.astype(matrix.dtype) @ matrix


@dataclass
class SubstitutionPlan:
    row: int
    side: str
    gamma: float
    entries: list[tuple[int, SoftDistribution]] = field(default_factory=list)

    @property
    def positions(self) -> list[int]:
        return [p for p, _ in self.entries]


def _sentence(batch: PaddedBatch, side: str, row: int) -> np.ndarray:
    if side == "source":
        return batch.x_ids[row, : batch.x_len[row]]
    return batch.y_ids[row, : batch.y_len[row]]


def _select(tokens: np.ndarray, gamma: float, rng: np.random.Generator) -> np.ndarray:
    draws = rng.random(len(tokens)) < gamma
    return np.nonzero(draws & (tokens >= N_SPECIAL))[0]


def _check_cmlm(cmlm: CmlmModel, side: str) -> None:
    if cmlm.side != side:
        raise ConfigError(f"a {cmlm.side}-side CMLM cannot plan {side}-side substitutions")


def _pair_of(batch: PaddedBatch, row: int) -> TokenizedPair:
    return TokenizedPair(batch.x_ids[row, : batch.x_len[row]], batch.y_ids[row, : batch.y_len[row]])


def _distributions(cmlm, side, pairs, selections):
    """Renormalized CMLM distributions for the selected positions of each pair."""
    todo = [i for i, sel in enumerate(selections) if len(sel)]
    examples = [example_with_positions(pairs[i], side, cmlm.mode, selections[i]) for i in todo]
    predicted = predict_masked_batch(cmlm, examples)
    out: list[list[np.ndarray]] = [[] for _ in pairs]
    for i, dists in zip(todo, predicted):
        out[i] = [renormalize(d) for d in dists]
    return out


def plan_soft_substitution(
    batch: PaddedBatch, side: str, cmlm: CmlmModel, gamma: float, rng: np.random.Generator
) -> list[SubstitutionPlan]:
    """Pick each eligible token with probability ``gamma``; attach its CMLM distribution.

    All positions picked in one sentence are masked together and predicted in
    a single forward pass over the whole batch.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    _check_cmlm(cmlm, side)
    plans = [SubstitutionPlan(row, side, gamma) for row in range(batch.size)]
    if gamma == 0.0:
        return plans
    selections = [_select(_sentence(batch, side, r), gamma, rng) for r in range(batch.size)]
    if not any(len(s) for s in selections):
        return plans
    pairs = [_pair_of(batch, r) for r in range(batch.size)]
    for plan, sel, dists in zip(plans, selections, _distributions(cmlm, side, pairs, selections)):
        plan.entries = [(int(p), SoftDistribution(d, int(p))) for p, d in zip(sel, dists)]
    return plans


def apply_plan(embeddings: Tensor, plans: Sequence[SubstitutionPlan], E: Tensor) -> Tensor:
    """Overwrite planned positions of a B x L x d embedding tensor with soft embeddings.

    Gradients reach ``E`` through the weighted sums.  With nothing planned the
    input tensor itself is returned.
    """
    rows, cols, probs = [], [], []
    for plan in plans:
        for pos, dist in plan.entries:
            rows.append(plan.row)
            cols.append(pos)
            probs.append(dist.probs)
    if not rows:
        return embeddings
    weights = Tensor(np.stack(probs).astype(E.dtype))
    return F.scatter_rows(embeddings, (np.array(rows), np.array(cols)), weights @ E)


def hard_substitute_batch(
    pairs: Sequence[TokenizedPair],
    side: str,
    cmlm: CmlmModel,
    gamma: float,
    rng: np.random.Generator,
    strategy: str = "sample",
) -> tuple[list[TokenizedPair], list[list[int]]]:
    """Hard substitution for many pairs with one CMLM pass; also returns replaced positions."""
    if strategy not in ("sample", "argmax"):
        raise ConfigError(f"unknown hard substitution strategy {strategy!r}")
    _check_cmlm(cmlm, side)
    if gamma == 0.0:
        return list(pairs), [[] for _ in pairs]
    selections = [_select(np.asarray(p.x if side == "source" else p.y), gamma, rng) for p in pairs]
    if not any(len(s) for s in selections):
        return list(pairs), [[] for _ in pairs]
    out = []
    for pair, sel, dists in zip(pairs, selections, _distributions(cmlm, side, pairs, selections)):
        if not len(sel):
            out.append(pair)
            continue
        tokens = list(pair.x if side == "source" else pair.y)
        for pos, d in zip(sel, dists):
            tokens[pos] = int(np.argmax(d)) if strategy == "argmax" else int(rng.choice(len(d), p=d))
        out.append(TokenizedPair(tokens, pair.y) if side == "source" else TokenizedPair(pair.x, tokens))
    return out, [s.tolist() for s in selections]


def hard_substitute(
    pair: TokenizedPair,
    side: str,
    cmlm: CmlmModel,
    gamma: float,
    rng: np.random.Generator,
    strategy: str = "sample",
) -> TokenizedPair:
    return hard_substitute_batch([pair], side, cmlm, gamma, rng, strategy)[0][0]


def write_synthetic(
    pairs: Sequence[TokenizedPair],
    origins: Sequence[int],
    replaced: Sequence[Sequence[int]],
    side: str,
    vocab,
    src_path,
    tgt_path,
    provenance_path,
) -> None:
    """Write hard-substituted pairs as a parallel corpus plus a provenance sidecar.

    Each sidecar line reads ``line=<origin line> side=<side> positions=<i,j,...>``.
    """
    from .corpus import detokenize

    with open(src_path, "w", encoding="utf-8") as fs, open(tgt_path, "w", encoding="utf-8") as ft, open(
        provenance_path, "w", encoding="utf-8"
    ) as fp:
        for pair, origin, pos in zip(pairs, origins, replaced):
            fs.write(detokenize(pair.x, vocab) + "\n")
            ft.write(detokenize(pair.y, vocab) + "\n")
            fp.write(f"line={origin + 1} side={side} positions={','.join(str(p) for p in pos)}\n")


# -- context-independent noise -------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    scheme: str
    k: int = 3
    p: float = 0.1

    def __post_init__(self):
        if self.scheme not in ("swap", "drop", "blank", "smooth"):
            raise ConfigError(f"unknown noise scheme {self.scheme!r}")
        if self.k < 1:
            raise ConfigError("swap window k must be >= 1")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("noise probability must lie in [0, 1]")


def unigram_distribution(pairs: Sequence[TokenizedPair], vocab_size: int, side: str | None = None) -> np.ndarray:
    """Token frequency distribution over non-special ids."""
    counts = np.zeros(vocab_size, dtype=np.float64)
    for p in pairs:
        if side in (None, "source"):
            np.add.at(counts, np.asarray(p.x), 1.0)
        if side in (None, "target"):
            np.add.at(counts, np.asarray(p.y), 1.0)
    counts[:N_SPECIAL] = 0.0
    if counts.sum() == 0:
        raise ValueError("no non-special tokens to build a unigram distribution")
    return counts / counts.sum()


def noise(seq: Sequence[int], spec: NoiseSpec, unigram: np.ndarray | None, rng: np.random.Generator) -> list[int]:
    """Apply one noising scheme to an id sequence.

    swap: sort positions by ``i + U[0, k+1)``, so no token moves more than k places;
    drop: delete each token with probability p, always keeping at least one;
    blank: replace each token by MASK with probability p;
    smooth: replace each token with probability p by a unigram draw.
    """
    seq = list(seq)
    if not seq:
        raise ValueError("cannot noise an empty sequence")
    n = len(seq)
    if spec.scheme == "swap":
        keys = np.arange(n) + rng.uniform(0.0, spec.k + 1, size=n)
        return [seq[i] for i in np.argsort(keys, kind="stable")]
    hits = rng.random(n) < spec.p
    if spec.scheme == "drop":
        kept = [t for t, h in zip(seq, hits) if not h]
        if not kept:
            kept = [seq[int(rng.integers(n))]]
        return kept
    if spec.scheme == "blank":
        return [MASK if h else t for t, h in zip(seq, hits)]
    if unigram is None:
        raise ValueError("smooth noise needs a unigram distribution")
    draws = rng.choice(len(unigram), size=n, p=unigram)
    return [int(d) if h else t for t, h, d in zip(seq, hits, draws)]
