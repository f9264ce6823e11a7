"""Decoding, corpus BLEU, paired bootstrap, and CMLM consistency accuracy."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cmlm import make_masked_example, predict_masked_batch
from .corpus import BOS, EOS, PAD, TokenizedPair
from .errors import DataError
from .model import CmlmModel, NmtModel, decode_logits, encode
from .numcore import Tensor, no_grad
from .numcore import functional as F
from .rng import BOOTSTRAP, MASKING, substream

MAX_ORDER = 4


# -- decoding ---------------------------------------------------------------------------


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    finished: bool

    @property
    def length(self) -> int:
        return len(self.tokens) + (1 if self.finished else 0)

    @property
    def score(self) -> float:
        return self.logprob / max(self.length, 1)


def _step_logprobs(model: NmtModel, memory: Tensor, mem_mask: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
    """Log-probabilities of the next token after each prefix (rows of BOS-led ids)."""
    emb = F.embedding(model.embed, prefixes)
    pad = prefixes == PAD
    logits = decode_logits(model, memory, mem_mask, emb, pad).data[:, -1, :]
    logits = logits.astype(np.float64)
    logits -= logits.max(axis=-1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))


def _pad_sources(xs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(x) for x in xs)
    ids = np.full((len(xs), width), PAD, dtype=np.int64)
    for i, x in enumerate(xs):
        ids[i, : len(x)] = x
    return ids


def _greedy(model: NmtModel, xs: Sequence[Sequence[int]], max_len: int) -> list[Hypothesis]:
    memory, mem_mask = encode(model, _pad_sources(xs))
    n = len(xs)
    prefixes = np.full((n, 1), BOS, dtype=np.int64)
    hyps = [Hypothesis([], 0.0, False) for _ in range(n)]
    alive = np.arange(n)
    for _ in range(max_len):
        logp = _step_logprobs(model, _take(memory, alive), mem_mask[alive], prefixes[alive])
        best = logp.argmax(axis=-1)
        column = np.full((n, 1), PAD, dtype=np.int64)
        for row, tok, lp in zip(alive, best, logp[np.arange(len(alive)), best]):
            h = hyps[row]
            h.logprob += float(lp)
            if tok == EOS:
                h.finished = True
            else:
                h.tokens.append(int(tok))
                column[row, 0] = tok
        prefixes = np.concatenate([prefixes, column], axis=1)
        alive = np.array([i for i in alive if not hyps[i].finished], dtype=np.int64)
        if not len(alive):
            break
    return hyps


def _take(memory: Tensor, rows: np.ndarray) -> Tensor:
    return Tensor(memory.data[rows])


def _beam(model: NmtModel, x: Sequence[int], beam: int, max_len: int) -> list[Hypothesis]:
    memory, mem_mask = encode(model, _pad_sources([x]))
    beams = [Hypothesis([], 0.0, False)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        prefixes = np.array([[BOS] + h.tokens for h in beams], dtype=np.int64)
        rows = np.zeros(len(beams), dtype=np.int64)
        logp = _step_logprobs(model, _take(memory, rows), mem_mask[rows], prefixes)
        totals = np.array([h.logprob for h in beams])[:, None] + logp
        flat = np.argsort(-totals, axis=None, kind="stable")[: 2 * beam]
        next_beams = []
        for idx in flat:
            b, tok = divmod(int(idx), logp.shape[1])
            parent = beams[b]
            if tok == EOS:
                finished.append(Hypothesis(list(parent.tokens), float(totals[b, tok]), True))
            elif len(next_beams) < beam:
                next_beams.append(Hypothesis(parent.tokens + [tok], float(totals[b, tok]), False))
        beams = next_beams
        if len(finished) >= beam or not beams:
            return finished
    # length budget exhausted: unfinished prefixes compete as truncated outputs
    return finished + beams


def decode_batch(
    model: NmtModel, xs: Sequence[Sequence[int]], beam: int = 1, max_len: int = 64, chunk: int = 256
) -> list[list[int]]:
    """Translate many sources; see ``decode``."""
    if beam < 1:
        raise ValueError("beam must be >= 1")
    max_len = min(max_len, model.config.max_len)
    out: list[list[int]] = []
    with no_grad():
        for start in range(0, len(xs), chunk):
            part = xs[start : start + chunk]
            greedy = _greedy(model, part, max_len)
            if beam == 1:
                out.extend(h.tokens for h in greedy)
                continue
            for x, g in zip(part, greedy):
                # the greedy path is always a candidate, so widening the beam never scores worse
                candidates = _beam(model, x, beam, max_len) + [g]
                best = max(candidates, key=lambda h: h.score)
                out.append(best.tokens)
    return out


def decode(model: NmtModel, x: Sequence[int], beam: int = 1, max_len: int = 64) -> list[int]:
    """Beam search ranked by length-normalized log-probability; ``beam=1`` is greedy.

    ``max_len`` bounds the number of generated tokens (EOS included) and is
    capped by the model's position budget.  The
    returned ids exclude BOS and EOS.
    """
    return decode_batch(model, [x], beam=beam, max_len=max_len)[0]


def sequence_score(model: NmtModel, x: Sequence[int], y: Sequence[int], finished: bool = True) -> float:
    """Length-normalized log-probability the model assigns to ``y`` (plus EOS if finished)."""
    with no_grad():
        memory, mem_mask = encode(model, _pad_sources([x]))
        prefixes = np.array([[BOS] + list(y)], dtype=np.int64)
        emb = F.embedding(model.embed, prefixes)
        logits = decode_logits(model, memory, mem_mask, emb, prefixes == PAD).data[0].astype(np.float64)
    logits -= logits.max(axis=-1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    targets = list(y) + ([EOS] if finished else [])
    total = float(sum(logp[i, t] for i, t in enumerate(targets)))
    return total / max(len(targets), 1)


# -- BLEU ---------------------------------------------------------------------------------


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def as_record(self) -> str:
        prec = " ".join(f"p{n + 1}={p:.6f}" for n, p in enumerate(self.precisions))
        return f"bleu={self.bleu:.4f} {prec} bp={self.brevity_penalty:.6f} hyp_len={self.hyp_len} ref_len={self.ref_len}"

    def __str__(self) -> str:
        prec = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (
            f"BLEU = {self.bleu:.2f}, {prec} (BP={self.brevity_penalty:.3f}, "
            f"ratio={self.hyp_len / max(self.ref_len, 1):.3f}, hyp_len={self.hyp_len}, ref_len={self.ref_len})"
        )


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hyp: Sequence[str], ref: Sequence[str]) -> np.ndarray:
    """[matches_1..4, totals_1..4, hyp_len, ref_len] for one sentence."""
    stats = np.zeros(2 * MAX_ORDER + 2, dtype=np.int64)
    for n in range(1, MAX_ORDER + 1):
        h = _ngrams(hyp, n)
        r = _ngrams(ref, n)
        stats[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        stats[MAX_ORDER + n - 1] = max(len(hyp) - n + 1, 0)
    stats[-2] = len(hyp)
    stats[-1] = len(ref)
    return stats


def bleu_from_stats(stats: np.ndarray) -> BleuReport:
    matches = stats[:MAX_ORDER]
    totals = stats[MAX_ORDER : 2 * MAX_ORDER]
    c, r = int(stats[-2]), int(stats[-1])
    precisions = [float(m) / t if t else 0.0 for m, t in zip(matches, totals)]
    if c == 0:
        return BleuReport(0.0, precisions, 0.0, c, r)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    if min(precisions) == 0.0:
        return BleuReport(0.0, precisions, bp, c, r)
    score = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER) * 100.0
    return BleuReport(score, precisions, bp, c, r)


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> BleuReport:
    """Corpus-level BLEU-4 with clipped counts and a brevity penalty (single reference)."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not references:
        raise ValueError("no references")
    total = np.zeros(2 * MAX_ORDER + 2, dtype=np.int64)
    for h, r in zip(hypotheses, references):
        total += sentence_stats(list(h), list(r))
    return bleu_from_stats(total)


@dataclass
class BootstrapResult:
    p_value: float
    win_a: float
    win_b: float
    ties: float
    samples: int
    bleu_a: float
    bleu_b: float

    def as_record(self) -> str:
        return (
            f"p_value={self.p_value:.6f} win_a={self.win_a:.6f} win_b={self.win_b:.6f} ties={self.ties:.6f} "
            f"samples={self.samples} bleu_a={self.bleu_a:.4f} bleu_b={self.bleu_b:.4f}"
        )


def _bleu_vectorized(stats: np.ndarray) -> np.ndarray:
    """BLEU for each row of summed sufficient statistics (S x 10)."""
    matches = stats[:, :MAX_ORDER].astype(np.float64)
    totals = stats[:, MAX_ORDER : 2 * MAX_ORDER].astype(np.float64)
    c = stats[:, -2].astype(np.float64)
    r = stats[:, -1].astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(totals > 0, matches / np.maximum(totals, 1), 0.0)
        logmean = np.log(np.where(prec > 0, prec, 1.0)).mean(axis=1)
        bp = np.where(c > r, 1.0, np.exp(1.0 - r / np.maximum(c, 1)))
    score = bp * np.exp(logmean) * 100.0
    return np.where((prec.min(axis=1) > 0) & (c > 0), score, 0.0)


def paired_bootstrap(
    hyp_a: Sequence[Sequence[str]],
    hyp_b: Sequence[Sequence[str]],
    refs: Sequence[Sequence[str]],
    samples: int = 1000,
    seed: int = 0,
) -> BootstrapResult:
    """Resample test sentences with replacement; p is the share of resamples where A does not beat B."""
    if not len(hyp_a) == len(hyp_b) == len(refs):
        raise ValueError("systems and references must be aligned")
    if samples < 100:
        raise ValueError("use at least 100 bootstrap samples")
    sa = np.stack([sentence_stats(list(h), list(r)) for h, r in zip(hyp_a, refs)])
    sb = np.stack([sentence_stats(list(h), list(r)) for h, r in zip(hyp_b, refs)])
    rng = substream(seed, BOOTSTRAP)
    idx = rng.integers(0, len(refs), size=(samples, len(refs)))
    ba = _bleu_vectorized(sa[idx].sum(axis=1))
    bb = _bleu_vectorized(sb[idx].sum(axis=1))
    return BootstrapResult(
        p_value=float(np.mean(ba <= bb)),
        win_a=float(np.mean(ba > bb)),
        win_b=float(np.mean(bb > ba)),
        ties=float(np.mean(ba == bb)),
        samples=samples,
        bleu_a=bleu_from_stats(sa.sum(axis=0)).bleu,
        bleu_b=bleu_from_stats(sb.sum(axis=0)).bleu,
    )


# -- consistency accuracy ------------------------------------------------------------------


@dataclass
class ConsistencyReport:
    mask_rate: float
    source_acc: float | None = None
    target_acc: float | None = None
    source_tokens: int = 0
    target_tokens: int = 0
    predictions: list[tuple[int, str, int, int, int, float]] = field(default_factory=list, repr=False)

    def merge(self, other: "ConsistencyReport") -> "ConsistencyReport":
        return ConsistencyReport(
            mask_rate=self.mask_rate,
            source_acc=self.source_acc if self.source_acc is not None else other.source_acc,
            target_acc=self.target_acc if self.target_acc is not None else other.target_acc,
            source_tokens=self.source_tokens or other.source_tokens,
            target_tokens=self.target_tokens or other.target_tokens,
            predictions=self.predictions + other.predictions,
        )

    def as_record(self) -> str:
        parts = [f"mask_rate={self.mask_rate}"]
        if self.source_acc is not None:
            parts.append(f"source_acc={self.source_acc:.6f} source_tokens={self.source_tokens}")
        if self.target_acc is not None:
            parts.append(f"target_acc={self.target_acc:.6f} target_tokens={self.target_tokens}")
        return " ".join(parts)


def consistency_accuracy(
    cmlm: CmlmModel,
    corpus: Sequence[TokenizedPair],
    side: str,
    mask_rate: float = 0.15,
    seed: int = 0,
    sample: bool = False,
    chunk: int = 128,
) -> ConsistencyReport:
    """Share of masked tokens the CMLM recovers exactly, micro-averaged over the corpus.

    Predictions are argmax by default; ``sample=True`` draws from the model's
    distribution instead.  Per-position records (pair, side, position, gold,
    predicted, probability of the prediction) are kept on the report.
    """
    if not corpus:
        raise DataError("empty corpus")
    if cmlm.side != side:
        raise DataError(f"a {cmlm.side}-side CMLM cannot be scored on the {side} side")
    rng = substream(seed, MASKING, 0)
    correct = total = 0
    records = []
    for start in range(0, len(corpus), chunk):
        examples = [
            make_masked_example(corpus[i], side, mask_rate, cmlm.mode, rng, max_len=cmlm.config.max_len, pair_index=i)
            for i in range(start, min(start + chunk, len(corpus)))
        ]
        for offset, (example, dists) in enumerate(zip(examples, predict_masked_batch(cmlm, examples))):
            sep = example.first_sep
            base = 1 if side == "source" else sep + 1
            for pos, gold, d in zip(example.mask_positions, example.labels, dists):
                guess = int(rng.choice(len(d), p=d)) if sample else int(np.argmax(d))
                correct += int(guess == gold)
                total += 1
                records.append((start + offset, side, int(pos - base), int(gold), guess, float(d[guess])))
    acc = correct / total
    if side == "source":
        return ConsistencyReport(mask_rate, source_acc=acc, source_tokens=total, predictions=records)
    return ConsistencyReport(mask_rate, target_acc=acc, target_tokens=total, predictions=records)
