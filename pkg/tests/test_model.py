import numpy as np
import pytest

import mjlab.tensor as tz
from mjlab.model import (
    Backbone,
    ModelConfig,
    ProjectionId,
    PROJECTIONS,
    next_token_loss,
    pretrain_backbone,
)

from conftest import finite_difference_check


class TestProjectionId:
    def test_exactly_seven_ordered(self):
        assert [p.name for p in PROJECTIONS] == ["q", "k", "v", "o", "up", "gate", "down"]
        assert sorted(PROJECTIONS) == list(PROJECTIONS)

    def test_dims(self):
        cfg = ModelConfig(d_model=8, d_ff=16, n_layers=1, n_heads=2, vocab_size=16, max_seq_len=8)
        assert cfg.proj_dims(ProjectionId.q) == (8, 8)
        assert cfg.proj_dims(ProjectionId.up) == (16, 8)
        assert cfg.proj_dims(ProjectionId.gate) == (16, 8)
        assert cfg.proj_dims(ProjectionId.down) == (8, 16)


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(d_model=10, d_ff=16, n_layers=1, n_heads=4, vocab_size=8, max_seq_len=8)

    def test_positive_fields(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=0, d_ff=16, n_layers=1, n_heads=1, vocab_size=8, max_seq_len=8)


class TestForward:
    def test_no_hooks_matches_backbone(self, tiny_frozen):
        toks = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])

        class NullHooks:
            def begin_block(self, layer, h):
                pass

            def contribution(self, layer, proj, x, base):
                return None

        plain = tiny_frozen.forward(toks)
        hooked = tiny_frozen.forward(toks, NullHooks())
        assert np.array_equal(plain.logits.data, hooked.logits.data)

    def test_causality_bitwise(self, tiny_frozen):
        rng = np.random.default_rng(0)
        toks = rng.integers(0, 16, size=(3, 8))
        base = tiny_frozen.forward(toks)
        for t in range(1, 8):
            mutated = toks.copy()
            mutated[:, t] = (mutated[:, t] + 3) % 16
            out = tiny_frozen.forward(mutated)
            for layer_states_a, layer_states_b in zip(base.hidden, out.hidden):
                assert np.array_equal(layer_states_a.data[:, :t], layer_states_b.data[:, :t])

    def test_hidden_count_and_shapes(self, tiny_frozen, tiny_cfg):
        toks = np.array([[0, 1, 2]])
        res = tiny_frozen.forward(toks)
        assert len(res.hidden) == tiny_cfg.n_layers + 1
        for h in res.hidden:
            assert h.shape == (1, 3, tiny_cfg.d_model)
        assert res.logits.shape == (1, 3, tiny_cfg.vocab_size)

    def test_input_validation(self, tiny_frozen):
        with pytest.raises(ValueError, match="vocab"):
            tiny_frozen.forward(np.array([[99]]))
        with pytest.raises(ValueError, match="max_seq_len"):
            tiny_frozen.forward(np.zeros((1, 50), dtype=np.int64))

    def test_micro_model_oracle(self):
        """1-layer d=4 forward against an independent plain-numpy reference."""
        cfg = ModelConfig(d_model=4, d_ff=8, n_layers=1, n_heads=1, vocab_size=6, max_seq_len=4)
        model = Backbone(cfg, seed=3)
        toks = np.array([[2]])  # single token: attention is the v-o path
        got = model.forward(toks).logits.data[0, 0]

        def ln(x, g, b, eps=1e-5):
            mu = x.mean()
            var = ((x - mu) ** 2).mean()
            return (x - mu) / np.sqrt(var + eps) * g + b

        blk = model.blocks[0]
        x = model.tok_emb.data[2] + model.pos_emb.data[0]
        a = ln(x, blk.ln1_g.data, blk.ln1_b.data)
        v = blk.w[ProjectionId.v].data @ a
        # softmax over a single causal position is exactly 1
        x = x + blk.w[ProjectionId.o].data @ v
        f = ln(x, blk.ln2_g.data, blk.ln2_b.data)
        gate = blk.w[ProjectionId.gate].data @ f
        up = blk.w[ProjectionId.up].data @ f
        silu = gate / (1.0 + np.exp(-gate))
        x = x + blk.w[ProjectionId.down].data @ (silu * up)
        ref = model.lm_head.data @ ln(x, model.ln_f_g.data, model.ln_f_b.data)
        assert np.abs(got - ref).max() < 1e-12

    def test_backbone_gradients_match_finite_difference(self):
        cfg = ModelConfig(d_model=4, d_ff=8, n_layers=1, n_heads=2, vocab_size=6, max_seq_len=4)
        model = Backbone(cfg, seed=4)
        toks = np.array([[0, 3, 1]])
        probe = [model.blocks[0].w[ProjectionId.q], model.blocks[0].ln1_g, model.tok_emb]

        def build():
            return next_token_loss(model, toks)

        finite_difference_check(build, probe, rel_tol=1e-6)


class TestFreezeAndPretrain:
    def test_zero_steps_keeps_random_init(self, tiny_cfg):
        model = Backbone(tiny_cfg, seed=11)
        before = model.snapshot()
        corpus = [np.array([1, 2, 3, 4, 5]), np.array([2, 3, 4, 5, 6])]
        pretrain_backbone(model, corpus, steps=0, lr=1e-2, seed=0)
        after = model.snapshot()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert model.frozen

    def test_two_symbol_corpus_perplexity_improves(self, tiny_cfg):
        model = Backbone(tiny_cfg, seed=12)
        rng = np.random.default_rng(0)
        corpus = []
        for _ in range(40):
            start = int(rng.integers(0, 2))
            corpus.append(np.array([(start + i) % 2 + 1 for i in range(10)]))
        stats = pretrain_backbone(model, corpus, steps=200, lr=3e-3, seed=0)
        assert stats["holdout_ce_after"] < stats["holdout_ce_before"]

    def test_freeze_blocks_gradients(self, tiny_frozen):
        toks = np.array([[1, 2, 3]])
        with tz.Tape():
            loss = next_token_loss(tiny_frozen, toks)
            # loss has no trainable inputs: it is detached from the tape
            assert not loss.requires_grad
        for t in tiny_frozen.parameters():
            assert t.grad is None
            assert not t.requires_grad

    def test_empty_corpus_rejected(self, tiny_cfg):
        with pytest.raises(ValueError, match="empty"):
            pretrain_backbone(Backbone(tiny_cfg, seed=1), [], steps=1, lr=1e-3)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_diagnostic(self, tiny_cfg):
        model = Backbone(tiny_cfg, seed=2)
        model.tok_emb.data[:] = 1e308  # overflows inside the first layer norm
        corpus = [np.array([1, 2, 3, 4, 5])] * 8
        with pytest.raises(RuntimeError, match="diverged"):
            pretrain_backbone(model, corpus, steps=3, lr=1e-3, seed=0)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tiny_cfg, tmp_path):
        model = Backbone(tiny_cfg, seed=13)
        model.freeze()
        model.save(tmp_path / "ckpt")
        loaded = Backbone.load(tmp_path / "ckpt")
        assert loaded.frozen
        orig, back = model.snapshot(), loaded.snapshot()
        assert set(orig) == set(back)
        assert all(np.array_equal(orig[k], back[k]) for k in orig)
        toks = np.array([[3, 1, 4]])
        assert np.array_equal(model.forward(toks).logits.data, loaded.forward(toks).logits.data)
