import json

import numpy as np
import pytest

from convcap import tensor as T
from convcap.errors import DataError, NumericError
from convcap.image import FeatureSet
from convcap.models import ModelConfig, conv_forward, init_model, lstm_forward
from convcap.text import TrainingPair, make_pair
from convcap.training import (AdamOptimizer, TrainConfig, batch_loss,
                              clip_global_norm, teacher_forced_accuracy,
                              train, training_step)

from gradcheck import fd_gradient, max_rel_err


def toy_cfg(**kw):
    base = dict(decoder="conv", num_layers=1, emb_dim=4, hidden=4, kernel=3,
                vocab_size=6, feature_dim=3, regions=2, max_len=6, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def toy_batch(rng, cfg, n_pairs=3, length=4):
    batch = []
    low = 4 if cfg.vocab_size > 4 else 0
    for i in range(n_pairs):
        ids = rng.integers(low, cfg.vocab_size, size=length)
        pair = make_pair(f"im{i}", [int(x) for x in ids], cfg.max_len)
        regions = rng.normal(size=(cfg.regions, cfg.feature_dim)).astype(np.float32)
        batch.append((pair, (regions, regions.mean(axis=0))))
    return batch


def reference_loss(model, batch):
    """Per-pair forwards pooled over all masked positions (the contract the
    packed paths must reproduce)."""
    total = 0.0
    count = 0
    for pair, feats in batch:
        logits = model.forward(feats, pair.input_ids)
        logp = T.log_softmax_rows(logits.data.astype(np.float64))
        sel = pair.mask == 1
        total += -logp[np.arange(len(pair.input_ids)), pair.target_ids][sel].sum()
        count += int(sel.sum())
    return total / count


class TestBatchedEquivalence:
    @pytest.mark.parametrize("decoder", ["conv", "conv_attention", "lstm"])
    def test_batched_loss_matches_reference(self, decoder):
        rng = np.random.default_rng(3)
        cfg = toy_cfg(decoder=decoder, num_layers=2)
        model = init_model(cfg, rng=rng)
        batch = toy_batch(rng, cfg, n_pairs=4)
        packed = batch_loss(model, batch).item()
        ref = reference_loss(model, batch)
        assert abs(packed - ref) / max(abs(ref), 1.0) < 1e-5

    @pytest.mark.parametrize("decoder", ["conv", "lstm"])
    def test_batched_gradient_vs_finite_differences(self, decoder):
        rng = np.random.default_rng(5)
        cfg = toy_cfg(decoder=decoder, num_layers=1)
        model = init_model(cfg, rng=rng, dtype=np.float64)
        batch = toy_batch(rng, cfg, n_pairs=2, length=3)

        def loss():
            return batch_loss(model, batch)

        loss().backward()
        for name, p in model.params.items():
            fd = fd_gradient(lambda: float(loss().data), p)
            assert max_rel_err(p.grad, fd) < 1e-3, name
            p.zero_grad()

    def test_varied_lengths_in_one_batch(self):
        rng = np.random.default_rng(7)
        cfg = toy_cfg()
        model = init_model(cfg, rng=rng)
        batch = toy_batch(rng, cfg, n_pairs=2, length=2) + toy_batch(rng, cfg, n_pairs=2, length=5)
        packed = batch_loss(model, batch).item()
        assert abs(packed - reference_loss(model, batch)) < 1e-5


class TestTrainingStep:
    def test_peaked_model_has_near_zero_loss_and_moves_little(self):
        rng = np.random.default_rng(11)
        cfg = toy_cfg()
        model = init_model(cfg, rng=rng)
        batch = toy_batch(rng, cfg, n_pairs=1, length=2)
        pair, feats = batch[0]
        # craft output bias so the correct target is overwhelmingly likely
        logits = model.forward(feats, pair.input_ids)
        model.params["out_w"].data[:] = 0
        model.params["out_b"].data[:] = -50.0
        # per-position peaks are impossible with a shared bias; instead peak
        # a single-token vocabulary pattern: use identical targets
        ids = [4, 4]
        pair = make_pair("im0", ids, cfg.max_len)
        model.params["out_b"].data[pair.target_ids[0]] = 0.0
        model.params["out_b"].data[1] = 0.0  # END also likely
        before = {k: p.data.copy() for k, p in model.params.items()}
        opt = AdamOptimizer(model.parameters(), lr=2e-4)
        loss = training_step(model, opt, [(pair, feats)])
        assert loss < 0.75  # dominated by the END/target split, far below ln(6)
        for k, p in model.params.items():
            assert np.abs(p.data - before[k]).max() < 2e-4 + 1e-6

    def test_uniform_model_first_loss_is_log_vocab(self):
        rng = np.random.default_rng(13)
        cfg = toy_cfg(vocab_size=4)
        model = init_model(cfg, rng=rng)
        for name in ("out_w", "out_b"):
            model.params[name].data[:] = 0
        batch = toy_batch(rng, cfg, n_pairs=2, length=3)
        opt = AdamOptimizer(model.parameters())
        loss = training_step(model, opt, batch)
        assert abs(loss - np.log(4.0)) < 1e-5

    def test_fifty_steps_descend(self):
        rng = np.random.default_rng(17)
        cfg = toy_cfg()
        model = init_model(cfg, rng=rng)
        batch = toy_batch(rng, cfg, n_pairs=3)
        opt = AdamOptimizer(model.parameters(), lr=1e-2)
        first = training_step(model, opt, batch)
        last = first
        for _ in range(49):
            last = training_step(model, opt, batch)
        assert last < first

    def test_nan_loss_aborts(self):
        rng = np.random.default_rng(19)
        cfg = toy_cfg()
        model = init_model(cfg, rng=rng)
        model.params["out_w"].data[:] = np.nan
        batch = toy_batch(rng, cfg, n_pairs=1)
        with pytest.raises(NumericError):
            training_step(model, AdamOptimizer(model.parameters()), batch)

    def test_masked_targets_do_not_influence_training(self):
        rng = np.random.default_rng(23)
        cfg = toy_cfg()

        def run(scramble_seed):
            model = init_model(cfg)
            opt = AdamOptimizer(model.parameters(), lr=1e-3)
            batch = toy_batch(np.random.default_rng(99), cfg, n_pairs=3, length=3)
            if scramble_seed is not None:
                scr = np.random.default_rng(scramble_seed)
                for pair, _ in batch:
                    off = pair.mask == 0
                    pair.target_ids[off] = scr.integers(0, cfg.vocab_size, size=int(off.sum()))
            losses = [training_step(model, opt, batch) for _ in range(5)]
            return losses, {k: p.data.copy() for k, p in model.params.items()}

        base_losses, base_params = run(None)
        scr_losses, scr_params = run(1234)
        assert base_losses == scr_losses
        for k in base_params:
            np.testing.assert_array_equal(base_params[k], scr_params[k])


class TestOptimizer:
    def test_zero_gradient_leaves_params_unchanged(self):
        rng = np.random.default_rng(29)
        cfg = toy_cfg()
        model = init_model(cfg, rng=rng)
        before = {k: p.data.copy() for k, p in model.params.items()}
        for p in model.parameters():
            p.grad = np.zeros_like(p.data)
        AdamOptimizer(model.parameters()).step()
        for k, p in model.params.items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_clip_global_norm(self):
        rng = np.random.default_rng(31)
        cfg = toy_cfg()
        model = init_model(cfg, rng=rng)
        for p in model.parameters():
            p.grad = rng.normal(size=p.data.shape).astype(np.float32) * 10
        pre = clip_global_norm(model.parameters(), 5.0)
        assert pre > 5.0
        post = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                           for p in model.parameters()))
        assert post <= 5.0 + 1e-6

    def test_clip_leaves_small_gradients_alone(self):
        rng = np.random.default_rng(37)
        cfg = toy_cfg()
        model = init_model(cfg, rng=rng)
        grads = []
        for p in model.parameters():
            p.grad = (rng.normal(size=p.data.shape) * 1e-4).astype(np.float32)
            grads.append(p.grad.copy())
        clip_global_norm(model.parameters(), 5.0)
        for p, g in zip(model.parameters(), grads):
            np.testing.assert_array_equal(p.grad, g)


def tiny_corpus():
    from convcap.text import CaptionDataset, ImageRecord, build_vocab, tokenize
    rng = np.random.default_rng(0)
    words = ["red", "blue", "circle", "square", "left", "right"]
    records = []
    for i in range(6):
        caps = [" ".join(rng.choice(words, size=4)) for _ in range(2)]
        split = "train" if i < 4 else ("dev" if i == 4 else "test")
        records.append(ImageRecord(f"im{i}", split, [tokenize(c) for c in caps]))
    ds = CaptionDataset(records)
    vocab = build_vocab(ds, min_count=1)
    feats = {}
    pooled = {}
    for rec in records:
        r = rng.normal(size=(4, 3)).astype(np.float32)
        feats[rec.image_id] = r
        pooled[rec.image_id] = r.mean(axis=0)
    return ds, vocab, FeatureSet(feats, pooled, 4, 3)


class TestTrainLoop:
    def cfg_pair(self, vocab, **kw):
        mcfg = ModelConfig(decoder="conv", num_layers=1, emb_dim=4, hidden=4, kernel=3,
                           vocab_size=len(vocab), feature_dim=3, regions=4, max_len=6)
        tcfg = TrainConfig(batch_size=4, epochs=kw.pop("epochs", 3), learning_rate=1e-3,
                           seed=kw.pop("seed", 0), **kw)
        return mcfg, tcfg

    def test_zero_epochs_writes_initial_checkpoint_and_empty_log(self, tmp_path):
        ds, vocab, feats = tiny_corpus()
        mcfg, tcfg = self.cfg_pair(vocab, epochs=0)
        result = train(mcfg, tcfg, ds, vocab, tmp_path, features=feats)
        assert (tmp_path / "final.ckpt").exists()
        assert (tmp_path / "train_log.jsonl").read_text() == ""
        assert result.history == []

    def test_same_seed_reproduces_loss_log(self, tmp_path):
        ds, vocab, feats = tiny_corpus()

        def run(sub):
            mcfg, tcfg = self.cfg_pair(vocab, epochs=4)
            out = tmp_path / sub
            train(mcfg, tcfg, ds, vocab, out, features=feats)
            records = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
            return [(r["epoch"], r["mean_loss"], r.get("dev_loss")) for r in records]

        assert run("a") == run("b")

    def test_feature_mismatch_rejected(self, tmp_path):
        ds, vocab, feats = tiny_corpus()
        mcfg, tcfg = self.cfg_pair(vocab)
        bad = FeatureSet({k: v for k, v in list(feats.regions.items())[:2]},
                         {k: v for k, v in list(feats.pooled.items())[:2]}, 4, 3)
        with pytest.raises(DataError):
            train(mcfg, tcfg, ds, vocab, tmp_path, features=bad)

    def test_checkpoint_every_writes_epoch_files(self, tmp_path):
        ds, vocab, feats = tiny_corpus()
        mcfg, tcfg = self.cfg_pair(vocab, epochs=4, checkpoint_every=2)
        train(mcfg, tcfg, ds, vocab, tmp_path, features=feats)
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["epoch_0001.ckpt", "epoch_0003.ckpt"]

    def test_best_checkpoint_tracked(self, tmp_path):
        ds, vocab, feats = tiny_corpus()
        mcfg, tcfg = self.cfg_pair(vocab, epochs=3)
        result = train(mcfg, tcfg, ds, vocab, tmp_path, features=feats)
        assert result.best_epoch is not None
        assert (tmp_path / "best.ckpt").exists()

    def test_accuracy_helper_bounds(self, tmp_path):
        ds, vocab, feats = tiny_corpus()
        mcfg, tcfg = self.cfg_pair(vocab, epochs=1)
        result = train(mcfg, tcfg, ds, vocab, tmp_path, features=feats)
        from convcap.text import dev_pairs
        pairs = dev_pairs(ds, vocab, mcfg.max_len, split="train")
        acc = teacher_forced_accuracy(result.model, pairs, feats)
        assert 0.0 <= acc <= 1.0

    def test_batch_size_defaults(self):
        ds, vocab, feats = tiny_corpus()
        conv_cfg = ModelConfig(decoder="conv", vocab_size=10)
        lstm_cfg = ModelConfig(decoder="lstm", vocab_size=10)
        assert TrainConfig().resolved_batch_size(conv_cfg) == 10
        assert TrainConfig().resolved_batch_size(lstm_cfg) == 32
        assert TrainConfig(batch_size=7).resolved_batch_size(conv_cfg) == 7
