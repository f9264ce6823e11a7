import numpy as np
import pytest

from nmtaug.corpus import TokenizedPair
from nmtaug.errors import CheckpointError, ConfigError, DataError, NumericalError
from nmtaug.evaluation import bleu, decode_batch
from nmtaug.model import CmlmModel, NmtModel, TransformerConfig
from nmtaug.numcore import default_dtype, load_checkpoint
from nmtaug.trainer import DaConfig, NmtTrainer, OptimConfig, resume

TINY = TransformerConfig(layers=1, d_model=16, d_ff=32, heads=2, dropout=0.1, max_len=32)
V = 24
OPT = OptimConfig(warmup=10, lr_factor=1.0, max_tokens=40)


def _corpus(n=30, seed=0):
    rng = np.random.default_rng(seed)
    return [
        TokenizedPair(rng.integers(7, V, size=rng.integers(1, 6)), rng.integers(7, V, size=rng.integers(1, 6)))
        for _ in range(n)
    ]


def _cmlms(dtype_seed=0):
    return {
        "source": CmlmModel(TINY, V, "source", seed=dtype_seed),
        "target": CmlmModel(TINY, V, "target", seed=dtype_seed + 1),
    }


def _trainer(da, seed=0, epochs=2, cmlms=None, trace=False, corpus=None, **kw):
    model = NmtModel(TINY, V, seed=seed)
    return NmtTrainer(model, corpus or _corpus(), da, kw.pop("optim", OPT), epochs, seed, cmlms=cmlms, trace=trace, **kw)


def test_da_config_validation():
    with pytest.raises(ConfigError):
        DaConfig(mode="mixup")
    with pytest.raises(ConfigError):
        DaConfig(mode="soft", gamma=1.5)
    with pytest.raises(ConfigError):
        DaConfig(mode="drop", augment_decoder=True)
    with pytest.raises(ConfigError):
        DaConfig(mode="swap", k=0)
    assert DaConfig(mode="none", augment_decoder=True).sides == ()
    assert DaConfig(mode="soft", augment_encoder=False, augment_decoder=True).sides == ("target",)


@pytest.mark.parametrize("dtype", [np.float32, np.float64], ids=["f32", "f64"])
def test_gamma_zero_is_bit_identical_to_no_augmentation(dtype):
    with default_dtype(dtype):
        base = _trainer(DaConfig()).run().loss_trace
        for mode in ("soft", "hard"):
            da = DaConfig(mode=mode, gamma=0.0, augment_decoder=True)
            assert _trainer(da, cmlms=_cmlms()).run().loss_trace == base


def test_training_is_deterministic():
    da = DaConfig(mode="soft", gamma=0.3, augment_decoder=True)
    a = _trainer(da, cmlms=_cmlms()).run()
    b = _trainer(da, cmlms=_cmlms()).run()
    assert a.loss_trace == b.loss_trace
    assert a.digest == b.digest
    c = _trainer(da, seed=1, cmlms=_cmlms()).run()
    assert c.loss_trace != a.loss_trace


@pytest.mark.parametrize(
    "da",
    [
        DaConfig(mode="soft", gamma=0.5, augment_encoder=False, augment_decoder=True),
        DaConfig(mode="hard", gamma=0.5, augment_encoder=False, augment_decoder=True),
        DaConfig(mode="swap", k=2, augment_encoder=False, augment_decoder=True),
        DaConfig(mode="blank", p=0.3, augment_encoder=False, augment_decoder=True),
        DaConfig(mode="smooth", p=0.3, augment_encoder=False, augment_decoder=True),
    ],
    ids=lambda d: d.mode,
)
def test_decoder_only_augmentation_leaves_encoder_and_labels_alone(da):
    trainer = _trainer(da, cmlms=_cmlms(), trace=True)
    run = trainer.run()
    changed_target = False
    for entry in run.trace:
        assert entry["source_embeddings"] == entry["original_source_embeddings"]
        assert entry["labels"] == entry["original_labels"]
    # compare against the unaugmented decoder stream of the same batches
    plain = _trainer(DaConfig(), trace=True).run()
    changed_target = any(a["target_embeddings"] != b["target_embeddings"] for a, b in zip(run.trace, plain.trace))
    assert changed_target


@pytest.mark.parametrize("mode", ["soft", "hard", "swap", "drop", "blank", "smooth"])
def test_encoder_augmentation_never_touches_labels(mode):
    da = DaConfig(mode=mode, gamma=0.5, p=0.3, augment_encoder=True, augment_decoder=False)
    run = _trainer(da, cmlms=_cmlms(), trace=True).run()
    assert all(e["labels"] == e["original_labels"] for e in run.trace)
    assert any(e["source_embeddings"] != e["original_source_embeddings"] for e in run.trace)


def test_cmlms_stay_frozen():
    cmlms = _cmlms()
    before = {s: c.checksum() for s, c in cmlms.items()}
    _trainer(DaConfig(mode="soft", gamma=0.5, augment_decoder=True), cmlms=cmlms).run()
    _trainer(DaConfig(mode="hard", gamma=0.5, augment_decoder=True), cmlms=cmlms).run()
    assert {s: c.checksum() for s, c in cmlms.items()} == before


def test_missing_cmlm_is_a_config_error_before_training():
    with pytest.raises(ConfigError, match="target"):
        _trainer(DaConfig(mode="soft", augment_decoder=True), cmlms={"source": _cmlms()["source"]})
    with pytest.raises(ConfigError):
        _trainer(DaConfig(mode="hard"), cmlms={"source": _cmlms()["target"]})
    with pytest.raises(DataError):
        _trainer(DaConfig(mode="soft", cmlm_src="/nonexistent/cmlm.ckpt"))


def test_cmlm_vocabulary_must_match():
    other = {"source": CmlmModel(TINY, V + 1, "source")}
    with pytest.raises(ConfigError, match="vocabulary"):
        _trainer(DaConfig(mode="soft"), cmlms=other)


def test_out_of_vocabulary_corpus_rejected():
    with pytest.raises(DataError):
        _trainer(DaConfig(), corpus=[TokenizedPair([7], [V + 3])])


def test_non_finite_loss_raises():
    trainer = _trainer(DaConfig())
    trainer.model.params["embed"].data[:] = np.nan
    with pytest.raises(NumericalError, match="step 1"):
        trainer.train_step()
    assert trainer.step == 0


def test_pause_and_resume_reproduce_the_loss_trace(tmp_path, f64):
    da = DaConfig(mode="soft", gamma=0.3, augment_decoder=True)
    full = _trainer(da, cmlms=_cmlms(), epochs=3)
    straight = full.run()
    assert full.total_steps > 8

    first = _trainer(da, cmlms=_cmlms(), epochs=3)
    first.run(until_step=7)
    path = first.save(tmp_path / "mid.ckpt")

    second = _trainer(da, cmlms=_cmlms(), epochs=3)
    resumed = resume(second.run_record, path)
    assert resumed.losses == straight.losses
    assert second.model.checksum() == full.model.checksum()


def test_resume_from_step_zero(tmp_path, f64):
    da = DaConfig()
    straight = _trainer(da).run()
    fresh = _trainer(da)
    path = fresh.save(tmp_path / "zero.ckpt")
    assert load_checkpoint(path).metadata["step"] == "0"
    assert resume(_trainer(da).run_record, path).losses == straight.losses


def test_resume_rejects_foreign_and_corrupt_checkpoints(tmp_path):
    trainer = _trainer(DaConfig())
    trainer.run(until_step=3)
    path = trainer.save(tmp_path / "a.ckpt")

    other_seed = _trainer(DaConfig(), seed=5)
    with pytest.raises(CheckpointError, match="digest"):
        resume(other_seed.run_record, path)
    other_da = _trainer(DaConfig(mode="swap"))
    with pytest.raises(CheckpointError):
        resume(other_da.run_record, path)

    blob = bytearray((tmp_path / "a.ckpt").read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    (tmp_path / "b.ckpt").write_bytes(bytes(blob))
    victim = _trainer(DaConfig())
    before = victim.model.checksum()
    with pytest.raises(CheckpointError):
        resume(victim.run_record, tmp_path / "b.ckpt")
    assert victim.model.checksum() == before and victim.step == 0


def test_digest_ignores_cmlm_paths_but_not_weights():
    a = _trainer(DaConfig(mode="soft"), cmlms=_cmlms(0)).digest
    b = _trainer(DaConfig(mode="soft", cmlm_src="elsewhere"), cmlms=_cmlms(0)).digest
    c = _trainer(DaConfig(mode="soft"), cmlms=_cmlms(7)).digest
    assert a == b and a != c


def test_metrics_text_format():
    run = _trainer(DaConfig()).run(until_step=2)
    lines = run.metrics_text().splitlines()
    assert lines[0].startswith("# digest=") and "seed=0" in lines[0]
    assert lines[1].startswith("step=1 loss=") and " lr=" in lines[1]
    assert len(lines) == 3


def _distinct_source_corpus(n, seed):
    # duplicated sources with different targets would make exact recall impossible
    rng = np.random.default_rng(seed)
    seen, out = set(), []
    while len(out) < n:
        x = tuple(rng.integers(7, V, size=rng.integers(3, 7)).tolist())
        if x not in seen:
            seen.add(x)
            out.append(TokenizedPair(x, rng.integers(7, V, size=rng.integers(3, 7))))
    return out


def test_small_corpus_is_memorized():
    cfg = TransformerConfig(layers=1, d_model=32, d_ff=64, heads=2, dropout=0.0, max_len=32)
    corpus = _distinct_source_corpus(50, seed=3)
    model = NmtModel(cfg, V, seed=0)
    optim = OptimConfig(warmup=100, lr_factor=2.0, label_smoothing=0.0, max_tokens=400)
    trainer = NmtTrainer(model, corpus, DaConfig(), optim, epochs=1000, seed=0)
    trainer.run(until_step=500)
    hyps = decode_batch(model, [p.x for p in corpus], beam=1, max_len=10)
    words = lambda ids: [str(i) for i in ids]  # noqa: E731
    score = bleu([words(h) for h in hyps], [words(p.y) for p in corpus]).bleu
    assert score > 90.0
