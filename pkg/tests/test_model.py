import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voco import tensor as T
from voco.errors import CapacityError, ConfigError, FormatError, UsageError
from voco.layout import Kind, build_causal_mask, build_layout, build_voco_mask
from voco.model import (DecodeState, ModelConfig, checkpoint_bytes, forward, greedy_decode, init_params,
                        load_checkpoint, params_from_bytes, save_checkpoint)

SMALL = ModelConfig(d_model=16, n_layers=2, n_heads=2, text_vocab=12, patch_vocab=6, max_positions=40)


def random_ids(rng, layout, cfg):
    ids = np.zeros(layout.total_len, dtype=np.int64)
    for seg in layout.segments:
        hi = cfg.patch_vocab if seg.kind == Kind.VISION else cfg.text_vocab
        ids[seg.start:seg.stop] = rng.integers(0, hi, size=seg.length)
    return ids


class TestConfig:
    def test_d_head(self):
        assert ModelConfig().d_head == 16

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=4)

    def test_bad_dtype(self):
        with pytest.raises(ConfigError):
            ModelConfig(cache_dtype="float16")


class TestInit:
    def test_deterministic(self):
        a, b = init_params(SMALL, 3), init_params(SMALL, 3)
        assert checkpoint_bytes(a) == checkpoint_bytes(b)
        assert a.fingerprint() == b.fingerprint()

    def test_seed_matters(self):
        assert init_params(SMALL, 3).fingerprint() != init_params(SMALL, 4).fingerprint()

    def test_reference_shapes(self):
        p = init_params(ModelConfig(), 0)
        assert p["layers.3.qkv.w"].shape == (64, 192)
        assert p["head.w"].shape == (64, 64)
        assert p["voco_emb"].shape == (1, 64)


class TestForward:
    def test_incremental_matches_full(self, rng):
        params = init_params(SMALL, 0)
        layout = build_layout(0, 1, 9)
        ids = random_ids(rng, layout, SMALL)
        mask = build_causal_mask(10).bits
        full = forward(params, layout, ids, mask).logits.data
        past, rows = None, []
        for t in range(layout.total_len):
            part = layout.slice(t, t + 1)
            out = forward(params, part, ids[t:t + 1], mask[t:t + 1, :t + 1], past)
            rows.append(out.logits.data[0])
            past = out.present if past is None else [
                type(p)(T.concat([p.keys, r.keys], axis=1), T.concat([p.values, r.values], axis=1))
                for p, r in zip(past, out.present)]
        assert np.max(np.abs(np.stack(rows) - full)) < 1e-9

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 3), st.integers(1, 6), st.data())
    def test_chunked_split(self, n, v, m, data):
        params = init_params(SMALL, 1)
        layout = build_layout(n, v, m)
        L = layout.total_len
        split = data.draw(st.integers(1, L - 1))
        ids = random_ids(np.random.default_rng(n * 100 + m), layout, SMALL)
        mask = build_voco_mask(layout).bits
        full = forward(params, layout, ids, mask).logits.data
        first = forward(params, layout.slice(0, split), ids[:split], mask[:split, :split])
        second = forward(params, layout.slice(split, L), ids[split:], mask[split:, :], first.present)
        assert np.max(np.abs(np.concatenate([first.logits.data, second.logits.data]) - full)) < 1e-9

    def test_zero_layers(self, rng):
        cfg = ModelConfig(d_model=8, n_layers=0, n_heads=2, text_vocab=5, patch_vocab=3, max_positions=8)
        params = init_params(cfg, 0)
        layout = build_layout(0, 1, 3)
        ids = np.array([0, 1, 4, 2])
        out = forward(params, layout, ids, build_causal_mask(4).bits).logits.data
        x = np.concatenate([params["voco_emb"].data, params["text_emb"].data[ids[1:]]]) + params["pos_emb"].data[:4]
        mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
        h = (x - mu) / np.sqrt(var + 1e-5) * params["ln_f.g"].data + params["ln_f.b"].data
        assert np.max(np.abs(out - (h @ params["head.w"].data + params["head.b"].data))) < 1e-12

    def test_position_overflow(self):
        params = init_params(SMALL, 0)
        layout = build_layout(30, 1, 10)
        with pytest.raises(CapacityError):
            forward(params, layout, np.zeros(41, dtype=np.int64), build_causal_mask(41).bits)

    def test_mask_shape_checked(self):
        params = init_params(SMALL, 0)
        with pytest.raises(UsageError):
            forward(params, build_layout(2, 1, 2), np.zeros(5, dtype=np.int64), build_causal_mask(4).bits)


class TestIsolation:
    def test_text_rows_never_see_vision(self, rng):
        params = init_params(SMALL, 2)
        layout = build_layout(6, 2, 5)
        out = forward(params, layout, random_ids(rng, layout, SMALL), build_voco_mask(layout), return_attn=True)
        text, vision = layout.indices(Kind.TEXT), layout.indices(Kind.VISION)
        for probs in out.attn_probs:
            assert np.all(probs[:, text][:, :, vision] == 0.0)

    def test_every_blocked_entry_is_zero(self, rng):
        params = init_params(SMALL, 2)
        layout = build_layout(4, 1, 3)
        bits = build_voco_mask(layout).bits
        out = forward(params, layout, random_ids(rng, layout, SMALL), bits, return_attn=True)
        for probs in out.attn_probs:
            assert np.all(probs[:, ~bits] == 0.0)

    def _vision_grad(self, bits, layout, ids):
        params = init_params(SMALL, 5)
        logits = forward(params, layout, ids, bits).logits
        text = layout.indices(Kind.TEXT)
        loss = T.cross_entropy(logits[text[:-1]], ids[text[1:]])
        T.backward(loss)
        return params["patch_emb"].grad

    def test_gradient_flows_through_voco(self, rng):
        layout = build_layout(4, 1, 3)
        ids = random_ids(rng, layout, SMALL)
        grad = self._vision_grad(build_voco_mask(layout).bits, layout, ids)
        assert np.abs(grad).max() > 0

    def test_blocking_voco_cuts_gradient(self, rng):
        layout = build_layout(4, 1, 3)
        ids = random_ids(rng, layout, SMALL)
        bits = build_voco_mask(layout).bits.copy()
        bits[layout.indices(Kind.TEXT)[:, None], layout.indices(Kind.VOCO)] = False
        grad = self._vision_grad(bits, layout, ids)
        assert grad is None or np.all(grad == 0.0)


class TestDecode:
    def _state(self, params, ids):
        layout = build_layout(0, 1, len(ids) - 1)
        out = forward(params, layout, ids, build_causal_mask(len(ids)).bits)
        return DecodeState(out.present, len(ids), out.logits.data[-1])

    def test_zero_tokens(self):
        params = init_params(SMALL, 0)
        assert greedy_decode(params, self._state(params, np.array([0, 3, 4])), 0) == []

    def test_matches_full_forward(self):
        params = init_params(SMALL, 0)
        ids = np.array([0, 3, 4, 1])
        got = greedy_decode(params, self._state(params, ids), 5)
        seq = list(ids)
        for _ in range(5):
            layout = build_layout(0, 1, len(seq) - 1)
            logits = forward(params, layout, np.array(seq), build_causal_mask(len(seq)).bits).logits.data
            seq.append(int(np.argmax(logits[-1])))
        assert got == seq[len(ids):]

    def test_deterministic(self):
        params = init_params(SMALL, 0)
        ids = np.array([0, 2, 2])
        assert greedy_decode(params, self._state(params, ids), 4) == greedy_decode(params, self._state(params, ids), 4)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = init_params(SMALL, 9)
        save_checkpoint(params, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.config == params.config and back.seed == 9
        for name in params.tensors:
            assert back[name].data.tobytes() == params[name].data.tobytes()
        assert checkpoint_bytes(back) == checkpoint_bytes(params)

    def test_size(self):
        params = init_params(SMALL, 0)
        assert len(checkpoint_bytes(params)) == 48 + 8 * params.num_parameters()

    @pytest.mark.parametrize("cut", [0, 10, 47, 48, 100, -1])
    def test_truncated(self, cut):
        buf = checkpoint_bytes(init_params(SMALL, 0))
        with pytest.raises(FormatError):
            params_from_bytes(buf[:cut])

    def test_version_bump(self):
        buf = bytearray(checkpoint_bytes(init_params(SMALL, 0)))
        buf[4] += 1
        with pytest.raises(FormatError) as info:
            params_from_bytes(bytes(buf))
        assert info.value.offset == 4

    def test_bad_magic(self):
        buf = b"XXXX" + checkpoint_bytes(init_params(SMALL, 0))[4:]
        with pytest.raises(FormatError):
            params_from_bytes(buf)

    def test_trailing_bytes(self):
        with pytest.raises(FormatError):
            params_from_bytes(checkpoint_bytes(init_params(SMALL, 0)) + b"\0")
