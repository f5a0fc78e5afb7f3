import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voco.errors import CapacityError, FormatError, StalenessError, UsageError
from voco.model import ModelConfig, init_params
from voco.runtime import compress, infer_with_cache
from voco.temporal import (VideoCacheSequence, compress_video, deserialize_video, infer_video, load_video,
                           save_video, serialize_video, single_pass_video_reference)

CFG = ModelConfig(d_model=16, n_layers=2, n_heads=2, text_vocab=12, patch_vocab=6, max_positions=64)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, 3)


def frames(rng, k, n):
    return [rng.integers(0, CFG.patch_vocab, size=n) for _ in range(k)]


class TestCompressVideo:
    def test_single_frame_reduces_to_image(self, params, rng):
        (f,) = frames(rng, 1, 9)
        seq = compress_video(params, [f], 2)
        assert seq.frames[0] == compress(params, f, 2)

    def test_positions(self, params, rng):
        seq = compress_video(params, frames(rng, 3, 8), 2)
        assert seq.total_voco == 6
        assert seq.frame_positions == [(8, 9), (10, 11), (12, 13)]

    def test_context_usage(self, params, rng):
        seq = compress_video(params, frames(rng, 4, 10), 1)
        assert seq.context_tokens(7) == 4 * 1 + 7

    def test_capacity(self, params, rng):
        with pytest.raises(CapacityError):
            compress_video(params, frames(rng, 4, 16), 8, text_budget=20)

    def test_empty(self, params):
        with pytest.raises(UsageError):
            compress_video(params, [], 1)

    def test_mixed_models_rejected(self, params, rng):
        a = compress_video(params, frames(rng, 1, 4), 1).frames[0]
        b = compress(init_params(CFG, 4), rng.integers(0, 6, size=4), 1, position_offset=1)
        with pytest.raises(StalenessError):
            VideoCacheSequence((a, b))


class TestInferVideo:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 16), st.integers(1, 2), st.integers(1, 6), st.booleans(),
           st.integers(0, 2**16))
    def test_segment_equivalence(self, params, k, n, v, m, independent, seed):
        rng = np.random.default_rng(seed)
        fs, txt = frames(rng, k, n), rng.integers(0, CFG.text_vocab, size=m)
        seq = compress_video(params, fs, v, independent=independent)
        ref = single_pass_video_reference(params, fs, v, txt, independent)
        assert np.max(np.abs(infer_video(params, seq, txt) - ref)) < 1e-9

    def test_ragged_frames(self, params, rng):
        fs = [rng.integers(0, 6, size=n) for n in (3, 7, 5)]
        txt = rng.integers(0, 12, size=4)
        ref = single_pass_video_reference(params, fs, 2, txt)
        assert np.max(np.abs(infer_video(params, compress_video(params, fs, 2), txt) - ref)) < 1e-9

    def test_order_matters(self, params, rng):
        fs, txt = frames(rng, 2, 6), rng.integers(0, 12, size=3)
        fwd = infer_video(params, compress_video(params, fs, 1), txt)
        rev = infer_video(params, compress_video(params, fs[::-1], 1), txt)
        assert not np.allclose(fwd, rev)

    def test_empty_text(self, params, rng):
        assert infer_video(params, compress_video(params, frames(rng, 2, 4), 1), []).shape == (0, 12)

    def test_frame_isolation(self, params, rng):
        fs, txt = frames(rng, 3, 6), rng.integers(0, 12, size=3)
        seq = compress_video(params, fs, 1)
        before = infer_video(params, seq, txt)
        fs[1][0] = (fs[1][0] + 1) % 6
        assert np.array_equal(infer_video(params, seq, txt), before)

    def test_matches_runtime_path(self, params, rng):
        fs, txt = frames(rng, 2, 5), rng.integers(0, 12, size=3)
        seq = compress_video(params, fs, 2)
        assert np.array_equal(infer_video(params, seq, txt), infer_with_cache(params, list(seq.frames), txt))


class TestBundle:
    def test_roundtrip(self, params, rng, tmp_path):
        seq = compress_video(params, frames(rng, 3, 5), 2, independent=True)
        save_video(seq, tmp_path / "v.bin")
        back = load_video(tmp_path / "v.bin")
        assert back.frames == seq.frames and back.independent
        assert serialize_video(back) == serialize_video(seq)

    def test_size(self, params, rng):
        seq = compress_video(params, frames(rng, 3, 5), 2)
        assert len(serialize_video(seq)) == 12 + 16 * 3 + seq.nbytes

    @pytest.mark.parametrize("cut", [0, 11, 12, 40, 100, -1])
    def test_truncated(self, params, rng, cut):
        buf = serialize_video(compress_video(params, frames(rng, 2, 4), 1))
        with pytest.raises(FormatError):
            deserialize_video(buf[:cut])

    def test_version(self, params, rng):
        buf = bytearray(serialize_video(compress_video(params, frames(rng, 2, 4), 1)))
        buf[4] = 9
        with pytest.raises(FormatError):
            deserialize_video(bytes(buf))
