import numpy as np
import pytest

from assemblypolicy import tensor as T
from assemblypolicy.config import ModelConfig
from assemblypolicy.fusion import PAD_ID, FusionEncoder, Observation
from assemblypolicy.tensor import Tensor

CFG = ModelConfig()


@pytest.fixture(scope="module")
def enc():
    with T.default_dtype(np.float64):
        return FusionEncoder(np.random.default_rng(0), CFG, 3).astype(np.float64)


def inputs(rng, b=2, pads=3):
    s = CFG.image_size
    images = Tensor(rng.random((b, 3, 4, s, s)), dtype=np.float64)
    tokens = rng.integers(2, CFG.vocab_size, size=(b, CFG.instr_len))
    tokens[:, CFG.instr_len - pads:] = PAD_ID
    pro = Tensor(rng.standard_normal((b, 8)), dtype=np.float64)
    return images, tokens, pro


def test_sequence_and_output_shapes(enc):
    images, tokens, pro = inputs(np.random.default_rng(1))
    f_vis, f_lang, f_pro = enc.encode_modalities(images, tokens, pro)
    assert enc.patches_per_view == 64
    assert f_vis.shape == (2, 192, CFG.channels)
    seq = enc.build_joint_sequence(f_vis, f_pro, f_lang)
    assert seq.shape == (2, 200, CFG.joint)
    assert enc(images, tokens, pro).shape == (2, 3, CFG.joint, 8, 8)


def test_language_rows_carry_no_position(enc):
    images, tokens, pro = inputs(np.random.default_rng(2))
    f_vis, f_lang, f_pro = enc.encode_modalities(images, tokens, pro)
    seq = enc.build_joint_sequence(f_vis, f_pro, f_lang).data
    np.testing.assert_array_equal(seq[:, :CFG.instr_len], f_lang.data)
    np.testing.assert_array_equal(f_lang.data[:, -3:], 0)
    vis = seq[:, CFG.instr_len:]
    np.testing.assert_allclose(vis[..., CFG.channels:] - enc.pos.data[:, CFG.channels:],
                               np.broadcast_to(f_pro.data[:, None], (2, 192, CFG.channels)), atol=1e-12)


def test_zero_value_projection_is_identity(enc):
    x = Tensor(np.random.default_rng(3).standard_normal((1, 192, CFG.d_attn)), dtype=np.float64)
    saved = enc.local_attn.w_v.weight.data.copy()
    enc.local_attn.w_v.weight.data[:] = 0
    try:
        np.testing.assert_array_equal(enc.local_view_attention(x).data, x.data)
    finally:
        enc.local_attn.w_v.weight.data[:] = saved


def test_local_attention_stays_within_view(enc):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 192, CFG.d_attn))
    y = x.copy()
    y[:, 64:128] += rng.standard_normal((1, 64, CFG.d_attn))
    a = enc.local_view_attention(Tensor(x, dtype=np.float64)).data
    b = enc.local_view_attention(Tensor(y, dtype=np.float64)).data
    np.testing.assert_array_equal(a[:, :64], b[:, :64])
    np.testing.assert_array_equal(a[:, 128:], b[:, 128:])
    assert not np.allclose(a[:, 64:128], b[:, 64:128])


def test_padded_language_rows_are_ignored(enc):
    rng = np.random.default_rng(5)
    _, tokens, _ = inputs(rng, 1)
    vp = Tensor(rng.standard_normal((1, 192, CFG.d_attn)), dtype=np.float64)
    lang = rng.standard_normal((1, CFG.instr_len, CFG.d_attn))
    other = lang.copy()
    other[:, -3:] = rng.standard_normal((1, 3, CFG.d_attn)) * 10
    a = enc.global_fusion(vp, Tensor(lang, dtype=np.float64), tokens).data
    b = enc.global_fusion(vp, Tensor(other, dtype=np.float64), tokens).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_wrong_view_count_rejected(enc):
    images = Tensor(np.zeros((1, 2, 4, CFG.image_size, CFG.image_size)), dtype=np.float64)
    with pytest.raises(T.ShapeError):
        enc.encode_modalities(images, np.ones((1, CFG.instr_len), int), Tensor(np.zeros((1, 8))))


def test_patch_must_divide_image():
    with pytest.raises(ValueError):
        FusionEncoder(np.random.default_rng(0), ModelConfig(image_size=60, patch=8))


def test_observation_canonicalizes_orientation():
    from assemblypolicy.geometry import CameraModel
    from assemblypolicy.fusion import CameraFrame
    cam = CameraModel(10.0, 10.0, 1.5, 1.5, 4, 4)
    obs = Observation([CameraFrame(np.zeros((4, 4, 3)), np.zeros((4, 4)), cam)], [3, 0],
                      np.zeros(3), np.array([-1.0, 0, 0, 0]), 1.0)
    np.testing.assert_array_equal(obs.proprio(), [0, 0, 0, 1, 0, 0, 0, 1])
    with pytest.raises(ValueError):
        Observation([], [0], np.zeros(3), np.array([1.0, 0, 0, 0]), 1.0)
