import numpy as np
import pytest

import oracle
from conftest import make_grown
from depthgrow import autodiff as ad
from depthgrow.checkpoint import CheckpointError
from depthgrow.data import PAD
from depthgrow.decoding import ShallowView, greedy_decode
from depthgrow.gradcheck import tiny_config
from depthgrow.growth import GrownModel, ShallowModel, freeze_audit, grow, grow_direct
from depthgrow.training import TrainConfig, train_stage2
from depthgrow.transformer import ConfigError, LengthError


def block_param_count(block) -> int:
    return sum(p.data.size for p in block.parameters())


@pytest.fixture
def shallow_and_grown():
    cfg = tiny_config(precision=32, n_bottom_blocks=2, n_top_blocks=2)
    shallow = ShallowModel(cfg, seed=3)
    return shallow, grow(shallow.to_checkpoint(), 2, init_seed=9)


def random_pairs(rng, n, vocab=12, lo=3, hi=7):
    out = []
    for _ in range(n):
        s = rng.integers(4, vocab, rng.integers(lo, hi)).tolist()
        t = rng.integers(4, vocab, rng.integers(lo, hi)).tolist()
        out.append((s, t))
    return out


class TestEncode:
    def test_zero_top_is_residual_then_norm(self):
        model = make_grown(random_top=False)
        src = np.array([[5, 6, 7, 0]])
        hs = model.encode(src)
        x = model.embed(src)
        expected = ad.layer_norm(ad.add(x, hs.h1), model.enc2.norm.gain, model.enc2.norm.bias, model.cfg.ln_eps)
        np.testing.assert_array_equal(hs.h2.data, expected.data)

    def test_single_token_shapes(self, grown64):
        hs = grown64.encode(np.array([[5]]))
        assert hs.h1.shape == hs.h2.shape == (1, 1, grown64.cfg.d_model)

    def test_too_long(self, grown64):
        with pytest.raises(LengthError):
            grown64.encode(np.full((1, grown64.cfg.max_len + 1), 5))


@pytest.mark.parametrize("precision,tol", [(64, 1e-10), (32, 1e-5)])
def test_composition_matches_oracle(precision, tol):
    model = make_grown(precision=precision, seed=5)
    rng = np.random.default_rng(0)
    src = [5, 9, 4, 0]
    tgt = [1, 7, 11, 6]
    hs, ls, ld = model.hidden_states(np.array([src]), np.array([tgt]))
    want = oracle.grown_forward(model, src, tgt)
    for key, got in (("h1", hs.h1), ("h2", hs.h2), ("s1", hs.s1), ("s2", hs.s2), ("logits_s", ls), ("logits_d", ld)):
        np.testing.assert_allclose(got.data[0], want[key], atol=tol, rtol=0, err_msg=key)
    del rng


class TestDecode:
    def test_logits_shape(self, grown64):
        src = np.array([[5, 6, 7]])
        hs = grown64.encode(src)
        s1, ls = grown64.decode_shallow(np.array([[1, 5]]), hs.h1, src)
        assert ls.shape == (1, 2, grown64.cfg.vocab_size)
        s2, ld = grown64.decode_deep(np.array([[1, 5]]), s1, hs.h2, src)
        assert s2.shape == s1.shape and ld.shape == ls.shape

    def test_deep_length_contracts(self, grown64):
        src = np.array([[5, 6, 7]])
        hs = grown64.encode(src)
        s1, _ = grown64.decode_shallow(np.array([[1, 5]]), hs.h1, src)
        with pytest.raises(ad.ContractError):
            grown64.decode_deep(np.array([[1, 5, 6]]), s1, hs.h2, src)
        with pytest.raises(ad.ContractError):
            grown64.decode_deep(np.array([[1, 5]]), s1, hs.h2, np.array([[5, 6]]))

    def test_zero_top_decoder_is_residual_then_norm(self):
        model = make_grown(random_top=False)
        src, tgt = np.array([[5, 6, 7]]), np.array([[1, 8, 9]])
        hs, _, ld = model.hidden_states(src, tgt)
        y = model.embed(tgt)
        expected = ad.layer_norm(ad.add(y, hs.s1), model.dec2.norm.gain, model.dec2.norm.bias, model.cfg.ln_eps)
        np.testing.assert_array_equal(hs.s2.data, expected.data)
        assert np.all(np.isfinite(ld.data))

    def test_shared_projection_object(self, grown64):
        names = [p.name for p in grown64.parameters()]
        assert names.count("out_proj.weight") == 1
        assert grown64.out_proj is grown64.bottom.out_proj


class TestGrow:
    def test_parameter_count(self, shallow_and_grown):
        shallow, grown = shallow_and_grown
        count = lambda m: sum(p.data.size for p in m.parameters())  # noqa: E731
        enc_block, dec_block = grown.enc2.blocks[0], grown.dec2.blocks[0]
        d = grown.cfg.d_model
        # fresh blocks plus the two top final norms (gain and bias each)
        expected = count(shallow) + 2 * (block_param_count(enc_block) + block_param_count(dec_block)) + 2 * 2 * d
        assert count(grown) == expected

    def test_name_sets_disjoint(self, shallow_and_grown):
        _, grown = shallow_and_grown
        top = {p.name for p in grown.top_parameters()}
        bottom = {p.name for p in grown.bottom.parameters()}
        assert top and bottom and not top & bottom

    def test_loaded_verbatim(self, shallow_and_grown):
        shallow, grown = shallow_and_grown
        g = grown.param_dict()
        for p in shallow.parameters():
            assert np.array_equal(p.data, g[p.name].data)

    def test_greedy_unchanged(self, shallow_and_grown):
        shallow, grown = shallow_and_grown
        rng = np.random.default_rng(1)
        for _ in range(10):
            src = rng.integers(4, 12, 5).tolist()
            assert greedy_decode(ShallowView(shallow), src).tokens == greedy_decode(ShallowView(grown), src).tokens

    def test_net_s_bit_identical(self, shallow_and_grown):
        shallow, grown = shallow_and_grown
        src, tgt = np.array([[4, 5, 6, 0]]), np.array([[1, 7, 8]])
        assert np.array_equal(shallow.forward(src, tgt).data, grown.forward_netS(src, tgt).data)

    def test_audit_lists_bottom_names(self, shallow_and_grown):
        shallow, grown = shallow_and_grown
        report = freeze_audit(grown)
        assert report.frozen == sorted(p.name for p in shallow.parameters())
        assert report.trainable == sorted(p.name for p in grown.top_parameters())
        assert report.clean

    def test_train_projection_toggle(self, shallow_and_grown):
        shallow, _ = shallow_and_grown
        grown = grow(shallow.to_checkpoint(), 1, train_projection=True)
        assert "out_proj.weight" in freeze_audit(grown).trainable

    def test_incompatible_config(self, shallow_and_grown):
        shallow, _ = shallow_and_grown
        with pytest.raises(ConfigError):
            grow(shallow.to_checkpoint(), 1, cfg=tiny_config(d_model=16, precision=32))
        with pytest.raises(ConfigError):
            grow(shallow.to_checkpoint(), 1, cfg=tiny_config(vocab_size=20, precision=32))

    def test_missing_tensor(self, shallow_and_grown):
        shallow, _ = shallow_and_grown
        ckpt = shallow.to_checkpoint()
        del ckpt.tensors["bottom.dec.0.ffn.w1"]
        with pytest.raises(CheckpointError):
            grow(ckpt, 1)

    def test_checkpoint_roundtrip(self, shallow_and_grown, tmp_path):
        _, grown = shallow_and_grown
        grown.to_checkpoint().save(tmp_path / "g.dgnm")
        from depthgrow.checkpoint import Checkpoint

        back = GrownModel.from_checkpoint(Checkpoint.load(tmp_path / "g.dgnm"))
        assert freeze_audit(back).clean
        assert freeze_audit(back).frozen == freeze_audit(grown).frozen

    def test_grow_direct_keeps_bottom(self, shallow_and_grown):
        shallow, _ = shallow_and_grown
        deep = grow_direct(shallow.to_checkpoint(), 1, init_seed=4)
        assert len(deep.enc.blocks) == 3
        assert np.array_equal(deep.param_dict()["bottom.enc.1.ffn.w1"].data, shallow.param_dict()["bottom.enc.1.ffn.w1"].data)
        assert all(p.trainable for p in deep.parameters())


class TestFreezeAudit:
    def test_fault_injection(self, shallow_and_grown):
        _, grown = shallow_and_grown
        p = grown.param_dict()["bottom.enc.1.self_attn.wk"]
        p.data[0, 0] += 1e-3
        assert freeze_audit(grown).violations == ["bottom.enc.1.self_attn.wk"]

    def test_after_stage2_steps(self, shallow_and_grown):
        _, grown = shallow_and_grown
        rng = np.random.default_rng(2)
        data = random_pairs(rng, 64)
        src, tgt = np.array([[4, 5, 6]]), np.array([[1, 7, 8, 9]])
        before = grown.forward_netS(src, tgt).data.copy()
        d_before = grown.forward_netD(src, tgt).data.copy()
        cfg = TrainConfig(stage=2, max_steps=100, batch_tokens=64, warmup_steps=10, log_every=1000, dropout=0.1)
        train_stage2(grown, data, cfg)
        assert freeze_audit(grown).clean
        assert np.array_equal(grown.forward_netS(src, tgt).data, before)
        assert not np.array_equal(grown.forward_netD(src, tgt).data, d_before)


class TestSeparation:
    def test_top_params_never_move_net_s(self, grown64):
        src, tgt = np.array([[4, 5, 6]]), np.array([[1, 7, 8]])
        before = grown64.hidden_states(src, tgt)
        for p in grown64.top_parameters():
            p.data += 0.3
        after = grown64.hidden_states(src, tgt)
        assert np.array_equal(before[1].data, after[1].data)
        assert not np.allclose(before[2].data, after[2].data)

    def test_h2_perturbation(self, grown64):
        src, tgt = np.array([[4, 5, 6]]), np.array([[1, 7, 8]])
        hs = grown64.encode(src)
        s1, ls = grown64.decode_shallow(tgt, hs.h1, src)
        _, ld = grown64.decode_deep(tgt, s1, hs.h2, src)
        bumped = ad.Tensor(hs.h2.data + 0.5)
        _, ld2 = grown64.decode_deep(tgt, s1, bumped, src)
        s1b, ls2 = grown64.decode_shallow(tgt, hs.h1, src)
        assert not np.allclose(ld.data, ld2.data)
        assert np.array_equal(ls.data, ls2.data)


def test_gradient_flow():
    cfg = tiny_config(n_bottom_blocks=1, n_top_blocks=2)
    shallow = ShallowModel(cfg, seed=0)
    grown = grow(shallow.to_checkpoint(), 2, init_seed=1)
    rng = np.random.default_rng(0)
    # leave zero-init behind so every top parameter has a path to the loss
    for p in grown.top_parameters():
        p.data += 0.1 * rng.standard_normal(p.shape)
    src = rng.integers(4, 12, (3, 5))
    tgt_in = rng.integers(4, 12, (3, 4))
    tgt_in[:, 0] = 1
    tgt_out = rng.integers(4, 12, (3, 4))
    ad.cross_entropy(grown.forward_netD(src, tgt_in), tgt_out, 0.1, PAD).backward()
    for p in grown.top_parameters():
        assert p.grad is not None and np.any(p.grad != 0), p.name
    for p in grown.frozen_parameters():
        assert p.grad is None or not np.any(p.grad), p.name


def test_zero_init_kl_report(capsys):
    """Reports KL(net_D || net_S) at initialisation; the value is informative, not bounded."""
    cfg = tiny_config(n_bottom_blocks=2)
    grown = grow(ShallowModel(cfg, seed=0).to_checkpoint(), 1, init_seed=1)
    rng = np.random.default_rng(0)
    src = rng.integers(4, 12, (4, 6))
    tgt = rng.integers(4, 12, (4, 5))
    _, ls, ld = grown.hidden_states(src, tgt)
    lp_s = ad.log_softmax(ls).data
    lp_d = ad.log_softmax(ld).data
    kl = float((np.exp(lp_d) * (lp_d - lp_s)).sum(-1).mean())
    print(f"KL(net_D || net_S) at zero-projection init: {kl:.4f} nats/token")
    assert np.isfinite(kl) and kl >= 0
