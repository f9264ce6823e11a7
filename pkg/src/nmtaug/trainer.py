"""NMT training with on-the-fly augmentation of the encoder and/or decoder input streams.

Every random decision is drawn from a named substream keyed by the root seed
and the global step, so a run can be paused after any step and resumed from
its checkpoint with an identical loss trace.
"""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .augment import NoiseSpec, apply_plan, hard_substitute_batch, noise, plan_soft_substitution, unigram_distribution
from .corpus import PAD, PaddedBatch, TokenizedPair, Vocab, make_batches, merge_subwords, pad_pairs
from .errors import CheckpointError, ConfigError, DataError, NumericalError
from .evaluation import bleu, decode_batch
from .model import CmlmModel, NmtModel, nmt_forward, nmt_labels
from .numcore import AdamState, Checkpoint, adam_step, load_checkpoint, lr_inverse_sqrt, save_checkpoint
from .numcore import functional as F
from .rng import MASKING, NOISE, substream
from .serialize import config_metadata, load_cmlm

DA_MODES = ("none", "soft", "hard", "swap", "drop", "blank", "smooth")
NOISE_MODES = ("swap", "drop", "blank", "smooth")


@dataclass
class DaConfig:
    mode: str = "none"
    gamma: float = 0.25
    p: float = 0.1
    k: int = 3
    augment_encoder: bool = True
    augment_decoder: bool = False
    cmlm_src: str | None = None
    cmlm_tgt: str | None = None
    hard_strategy: str = "sample"

    def __post_init__(self):
        if self.mode not in DA_MODES:
            raise ConfigError(f"unknown augmentation mode {self.mode!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.hard_strategy not in ("sample", "argmax"):
            raise ConfigError(f"unknown hard substitution strategy {self.hard_strategy!r}")
        if self.mode in NOISE_MODES:
            NoiseSpec(self.mode, self.k, self.p)
        if self.mode == "drop" and self.augment_decoder:
            # dropping decoder inputs would misalign them with the labels
            raise ConfigError("drop noise cannot be applied to decoder inputs")

    @property
    def sides(self) -> tuple[str, ...]:
        if self.mode == "none":
            return ()
        return tuple(s for s, on in (("source", self.augment_encoder), ("target", self.augment_decoder)) if on)

    @property
    def needs_cmlm(self) -> bool:
        return self.mode in ("soft", "hard")


@dataclass
class OptimConfig:
    lr_factor: float = 1.0
    warmup: int = 4000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    label_smoothing: float = 0.1
    max_tokens: int = 4096
    max_sentences: int | None = None
    checkpoint_every: int = 0
    validate_every: int = 0
    decode_max_len: int = 64

    def __post_init__(self):
        if self.warmup < 1:
            raise ConfigError("warmup must be >= 1")
        if self.lr_factor <= 0:
            raise ConfigError("lr_factor must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")


@dataclass
class TrainRun:
    digest: str
    seed: int
    losses: list[tuple[int, float, float]] = field(default_factory=list)
    val_bleu: list[tuple[int, float]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list, repr=False)
    trainer: "NmtTrainer | None" = field(default=None, repr=False, compare=False)

    @property
    def step(self) -> int:
        return self.losses[-1][0] if self.losses else 0

    @property
    def loss_trace(self) -> list[float]:
        return [loss for _, loss, _ in self.losses]

    def metrics_lines(self) -> list[str]:
        val = dict(self.val_bleu)
        lines = []
        for step, loss, lr in self.losses:
            line = f"step={step} loss={loss:.6f} lr={lr:.8g}"
            if step in val:
                line += f" val_bleu={val[step]:.4f}"
            lines.append(line)
        return lines

    def metrics_text(self) -> str:
        head = f"# digest={self.digest} seed={self.seed}\n"
        return head + "".join(line + "\n" for line in self.metrics_lines())


def _sha(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values).tobytes()).hexdigest()


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    ids = np.full((len(seqs), int(lens.max())), PAD, dtype=np.int64)
    for row, seq in enumerate(seqs):
        ids[row, : len(seq)] = seq
    return ids, lens


def corpus_checksum(pairs: Sequence[TokenizedPair]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(repr((p.x, p.y)).encode())
    return h.hexdigest()


def load_cmlm_reference(path: str, side: str) -> CmlmModel:
    return load_cmlm(path, side=side)


class NmtTrainer:
    """Owns one NMT model, its optimizer state and the step counter."""

    def __init__(
        self,
        model: NmtModel,
        corpus: Sequence[TokenizedPair],
        da: DaConfig,
        optim: OptimConfig,
        epochs: int,
        seed: int,
        cmlms: Mapping[str, CmlmModel] | None = None,
        valid: Sequence[TokenizedPair] | None = None,
        vocab: Vocab | None = None,
        out_dir: str | os.PathLike | None = None,
        on_step: Callable[[str], None] | None = None,
        trace: bool = False,
    ):
        if epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not corpus:
            raise DataError("empty training corpus")
        for i, pair in enumerate(corpus):
            if max(max(pair.x), max(pair.y)) >= model.vocab_size:
                raise DataError(f"pair {i + 1}: token id outside the model vocabulary ({model.vocab_size})")
        self.model = model
        self.corpus = list(corpus)
        self.da = da
        self.optim = optim
        self.epochs = epochs
        self.seed = seed
        self.valid = list(valid) if valid else []
        self.vocab = vocab
        self.out_dir = os.fspath(out_dir) if out_dir is not None else None
        self.on_step = on_step
        self.cmlms = self._resolve_cmlms(dict(cmlms or {}))
        self.unigram = {}
        if da.mode == "smooth":
            self.unigram = {s: unigram_distribution(self.corpus, model.vocab_size, s) for s in da.sides}
        self.adam = AdamState(beta1=optim.beta1, beta2=optim.beta2, eps=optim.eps)
        self.step = 0
        self._epoch_batches: dict[int, list[PaddedBatch]] = {}
        self._epoch_sizes = [len(self._batches(e)) for e in range(epochs)]
        self.total_steps = sum(self._epoch_sizes)
        self.digest = self._digest()
        self.run_record = TrainRun(self.digest, seed, trainer=self)
        self.tracing = trace

    # -- setup -----------------------------------------------------------------------

    def _resolve_cmlms(self, given: dict) -> dict[str, CmlmModel]:
        if not self.da.needs_cmlm:
            return {}
        refs = {"source": self.da.cmlm_src, "target": self.da.cmlm_tgt}
        out = {}
        for side in self.da.sides:
            cmlm = given.get(side)
            if cmlm is None and refs[side]:
                cmlm = load_cmlm_reference(refs[side], side)
            if cmlm is None:
                raise ConfigError(f"augmentation on the {side} side needs a {side} CMLM")
            if cmlm.side != side:
                raise ConfigError(f"CMLM given for the {side} side is bound to {cmlm.side}")
            if cmlm.vocab_size != self.model.vocab_size:
                raise ConfigError(
                    f"{side} CMLM vocabulary ({cmlm.vocab_size}) differs from the NMT model ({self.model.vocab_size})"
                )
            out[side] = cmlm
        return out

    def _digest(self) -> str:
        da = asdict(self.da)
        # paths do not affect results; the CMLM weights do
        da.pop("cmlm_src")
        da.pop("cmlm_tgt")
        parts = [
            self.model.config.as_text(),
            f"vocab={self.model.vocab_size}",
            f"dtype={self.model.embed.dtype}",
            "".join(f"da.{k}={v}\n" for k, v in sorted(da.items())),
            "".join(f"optim.{k}={v}\n" for k, v in sorted(asdict(self.optim).items())),
            f"epochs={self.epochs}",
            f"seed={self.seed}",
            f"corpus={corpus_checksum(self.corpus)}",
        ]
        parts += [f"cmlm.{side}={c.checksum()}" for side, c in sorted(self.cmlms.items())]
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()

    def _batches(self, epoch: int) -> list[PaddedBatch]:
        if epoch not in self._epoch_batches:
            self._epoch_batches = {
                epoch: make_batches(self.corpus, self.optim.max_tokens, self.seed, epoch, self.optim.max_sentences)
            }
        return self._epoch_batches[epoch]

    def _batch_for(self, step: int) -> PaddedBatch:
        index = step - 1
        for epoch, size in enumerate(self._epoch_sizes):
            if index < size:
                return self._batches(epoch)[index]
            index -= size
        raise IndexError(f"step {step} beyond the {self.total_steps} scheduled steps")

    # -- augmentation ------------------------------------------------------------------

    def _rows(self, batch: PaddedBatch) -> list[TokenizedPair]:
        return [TokenizedPair(batch.x_ids[r, : batch.x_len[r]], batch.y_ids[r, : batch.y_len[r]]) for r in range(batch.size)]

    def _augment(self, batch: PaddedBatch, step: int):
        """Return (batch, source override, target override, decoder input ids)."""
        da = self.da
        E = self.model.embed
        src_override = tgt_override = dec_ids = None
        if da.mode == "soft":
            for k, side in enumerate(("source", "target")):
                if side not in da.sides:
                    continue
                plans = plan_soft_substitution(batch, side, self.cmlms[side], da.gamma, substream(self.seed, MASKING, step, k))
                if not any(plan.entries for plan in plans):
                    continue
                ids = batch.x_ids if side == "source" else batch.y_ids
                replaced = apply_plan(F.embedding(E, ids), plans, E)
                if side == "source":
                    src_override = replaced
                else:
                    tgt_override = replaced
        elif da.mode == "hard":
            original = batch
            rows = self._rows(batch)
            if "source" in da.sides:
                rows, _ = hard_substitute_batch(
                    rows, "source", self.cmlms["source"], da.gamma, substream(self.seed, MASKING, step, 0), da.hard_strategy
                )
                batch = self._with_sources(batch, rows)
            if "target" in da.sides:
                rewritten, _ = hard_substitute_batch(
                    self._rows(original), "target", self.cmlms["target"], da.gamma, substream(self.seed, MASKING, step, 1), da.hard_strategy
                )
                dec_ids = pad_pairs(rewritten).y_ids
        elif da.mode in NOISE_MODES:
            # noised sequences may contain MASK (blank), so they stay plain id lists
            spec = NoiseSpec(da.mode, da.k, da.p)
            rows = self._rows(batch)
            if "source" in da.sides:
                rng = substream(self.seed, NOISE, step, 0)
                ids, lens = _pad([noise(p.x, spec, self.unigram.get("source"), rng) for p in rows])
                batch = PaddedBatch(ids, batch.y_ids, lens, batch.y_len, batch.indices)
            if "target" in da.sides:
                rng = substream(self.seed, NOISE, step, 1)
                dec_ids, _ = _pad([noise(p.y, spec, self.unigram.get("target"), rng) for p in rows])
        return batch, src_override, tgt_override, dec_ids

    @staticmethod
    def _with_sources(batch: PaddedBatch, rows: Sequence[TokenizedPair]) -> PaddedBatch:
        padded = pad_pairs(rows)
        return PaddedBatch(padded.x_ids, batch.y_ids, padded.x_len, batch.y_len, batch.indices)

    # -- training ---------------------------------------------------------------------

    def learning_rate(self, step: int) -> float:
        return self.optim.lr_factor * lr_inverse_sqrt(step, self.optim.warmup, self.model.config.d_model)

    def train_step(self) -> float:
        step = self.step + 1
        original = self._batch_for(step)
        batch, src_override, tgt_override, dec_ids = self._augment(original, step)
        loss, _ = nmt_forward(
            self.model,
            batch,
            src_override,
            tgt_override,
            tgt_input_ids=dec_ids,
            smoothing=self.optim.label_smoothing,
            train=True,
            step=step,
            seed=self.seed,
        )
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"NMT loss is not finite at step {step}")
        if self.tracing:
            self._record_trace(step, original, batch, src_override, tgt_override, dec_ids)
        self.model.zero_grad()
        loss.backward()
        lr = self.learning_rate(step)
        adam_step(self.model.params, {k: p.grad for k, p in self.model.params.items()}, self.adam, lr)
        self.model.zero_grad()
        self.step = step
        self.run_record.losses.append((step, value, lr))
        return value

    def _record_trace(self, step, original, batch, src_override, tgt_override, dec_ids) -> None:
        E = self.model.embed
        src = src_override.data if src_override is not None else E.data[batch.x_ids]
        dec = dec_ids if dec_ids is not None else batch.y_ids
        tgt = tgt_override.data if tgt_override is not None else E.data[dec]
        self.run_record.trace.append(
            {
                "step": step,
                "labels": _sha(nmt_labels(batch)),
                "original_labels": _sha(nmt_labels(original)),
                "source_embeddings": _sha(src),
                "original_source_embeddings": _sha(E.data[original.x_ids]),
                "target_embeddings": _sha(tgt),
            }
        )

    def validate(self) -> float:
        if not self.valid:
            raise DataError("no validation set")
        hyps = decode_batch(self.model, [p.x for p in self.valid], beam=1, max_len=self.optim.decode_max_len)
        refs = [p.y for p in self.valid]
        return bleu([self._words(h) for h in hyps], [self._words(r) for r in refs]).bleu

    def _words(self, ids: Sequence[int]) -> list[str]:
        if self.vocab is None:
            return [str(i) for i in ids]
        return merge_subwords(ids, self.vocab)

    def run(self, until_step: int | None = None) -> TrainRun:
        """Train up to ``until_step`` (default: the end of the last epoch)."""
        stop = self.total_steps if until_step is None else min(until_step, self.total_steps)
        opt = self.optim
        while self.step < stop:
            self.train_step()
            step = self.step
            if opt.validate_every and self.valid and step % opt.validate_every == 0:
                self.run_record.val_bleu.append((step, self.validate()))
            if opt.checkpoint_every and self.out_dir and step % opt.checkpoint_every == 0:
                self.save(os.path.join(self.out_dir, f"checkpoint_{step:07d}.ckpt"))
            if self.on_step is not None:
                self.on_step(self.run_record.metrics_lines()[-1])
        return self.run_record

    # -- checkpoints ----------------------------------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        params = {k: v.copy() for k, v in self.model.state_dict().items()}
        for name in self.model.params:
            if name in self.adam.m:
                params["adam.m/" + name] = self.adam.m[name].copy()
                params["adam.v/" + name] = self.adam.v[name].copy()
        record = self.run_record
        metadata = {
            "step": str(self.step),
            "adam_t": str(self.adam.t),
            "seed": str(self.seed),
            "losses": ",".join(f"{s}:{loss!r}:{lr!r}" for s, loss, lr in record.losses),
            "val_bleu": ",".join(f"{s}:{b!r}" for s, b in record.val_bleu),
        }
        metadata.update(config_metadata(self.model.config))
        return Checkpoint("trainer", self.model.vocab_size, self.digest, params, metadata=metadata)

    def save(self, path: str | os.PathLike) -> str:
        save_checkpoint(path, self.to_checkpoint())
        path = os.fspath(path)
        self.run_record.checkpoints.append(path)
        return path

    def restore(self, ckpt: Checkpoint) -> None:
        """Load model, optimizer and history; validates everything before mutating."""
        if ckpt.role != "trainer":
            raise CheckpointError(f"expected a trainer checkpoint, got role {ckpt.role!r}")
        if ckpt.digest != self.digest:
            raise CheckpointError("checkpoint digest does not match this run's configuration")
        try:
            step = int(ckpt.metadata["step"])
            t = int(ckpt.metadata["adam_t"])
            losses = _parse_history(ckpt.metadata.get("losses", ""), 3)
            val = _parse_history(ckpt.metadata.get("val_bleu", ""), 2)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"malformed trainer metadata: {exc}") from None
        if not 0 <= step <= self.total_steps:
            raise CheckpointError(f"checkpoint step {step} outside this run's {self.total_steps} steps")
        names = set(self.model.params)
        weights = {k: v for k, v in ckpt.params.items() if not k.startswith("adam.")}
        m = {k[len("adam.m/") :]: v for k, v in ckpt.params.items() if k.startswith("adam.m/")}
        v = {k[len("adam.v/") :]: v for k, v in ckpt.params.items() if k.startswith("adam.v/")}
        if set(weights) != names or set(m) != set(v) or not set(m) <= names:
            raise CheckpointError("trainer checkpoint parameters do not match the model")
        for k, p in self.model.params.items():
            if weights[k].shape != p.shape or (k in m and (m[k].shape != p.shape or v[k].shape != p.shape)):
                raise CheckpointError(f"shape mismatch for {k!r}")
        dtype = self.model.embed.dtype
        self.model.load_state_dict(weights)
        self.adam.t = t
        self.adam.m = {k: np.array(a, dtype=dtype) for k, a in m.items()}
        self.adam.v = {k: np.array(a, dtype=dtype) for k, a in v.items()}
        self.step = step
        self.run_record.losses = [(int(s), float(loss), float(lr)) for s, loss, lr in losses]
        self.run_record.val_bleu = [(int(s), float(b)) for s, b in val]


def _parse_history(text: str, width: int) -> list[tuple[str, ...]]:
    if not text:
        return []
    rows = [tuple(item.split(":")) for item in text.split(",")]
    if any(len(r) != width for r in rows):
        raise ValueError("history entry has the wrong number of fields")
    return rows


def train_nmt(
    model: NmtModel,
    corpus: Sequence[TokenizedPair],
    da: DaConfig,
    optim: OptimConfig,
    epochs: int,
    seed: int,
    **kwargs,
) -> TrainRun:
    """Train ``model`` in place; see ``NmtTrainer`` for the optional arguments."""
    return NmtTrainer(model, corpus, da, optim, epochs, seed, **kwargs).run()


def resume(run: TrainRun, checkpoint: Checkpoint | str | os.PathLike, until_step: int | None = None) -> TrainRun:
    """Restore ``run``'s trainer from ``checkpoint`` and keep training."""
    if run.trainer is None:
        raise ConfigError("this run is not attached to a trainer")
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if ckpt.digest != run.digest:
        raise CheckpointError("checkpoint digest does not match the run's configuration")
    run.trainer.restore(ckpt)
    return run.trainer.run(until_step)
