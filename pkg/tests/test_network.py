import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from retroconv.errors import (ConfigError, DimMismatchError, FormatError, MagicError, ShapeError,
                              TemporalLengthError, TruncatedError, VersionError)
from retroconv.network import (ModelConfig, build_model, checkpoint_bytes, decoder_node_count, default_config,
                               infer, infer_multiscale, load_checkpoint, model_from_bytes, save_checkpoint)
from retroconv.tensor import bilinear_resize

# two stages keep the receptive field small enough for interior checks on tiny inputs
SMALL = ModelConfig(backbone="stacked-k-blocks", backbone_widths=(4, 6), change_module="arpp",
                    arpp_dilations=(1, 2), change_widths=(4, 6), decoder_levels=1)


@pytest.fixture(scope="module")
def small():
    return build_model(SMALL, seed=3)


@pytest.fixture(scope="module")
def desk():
    return build_model(default_config(), seed=0)


def clip(rng, n=1, l=4, h=16, w=16):
    return rng.random((n, 3, l, h, w)).astype(np.float32)


def test_raw_input_has_no_decoders():
    cfg = ModelConfig(backbone="raw-input", backbone_widths=(), change_module="retro", arpp_dilations=(),
                      change_widths=(8,), decoder_levels=0)
    m = build_model(cfg, 0)
    assert decoder_node_count(m) == 0
    assert infer(m, clip(np.random.default_rng(0), h=5, w=7)).shape == (1, 1, 1, 5, 7)


def test_conv3d_pair_arm():
    cfg = ModelConfig(change_module="conv3d-pair", arpp_dilations=())
    m = build_model(cfg, 0)
    convs = [n for n in m.graph.nodes if n.op == "conv3d" and ".c3d" in n.name]
    assert len(convs) == 6 and all(m.params[n.params[0]].shape[2] == 3 for n in convs)
    assert not any(n.op == "retro_conv" for n in m.graph.nodes)


def test_default_structure(desk):
    ops_used = {n.op for n in desk.graph.nodes}
    assert {"retro_conv", "maxpool2", "deconv2x2", "concat_channels", "sigmoid"} <= ops_used
    dils = sorted({n.attrs["dilation"] for n in desk.graph.nodes if n.op == "retro_conv"})
    assert dils == [1, 3]
    # ARPP splits each level's width evenly over the two branches
    retro_w = [desk.params[n.params[0]].shape[0] for n in desk.graph.nodes if n.op == "retro_conv"]
    assert retro_w == [8, 8, 16, 16, 32, 32]
    assert decoder_node_count(desk) > 0


def test_build_is_deterministic():
    a, b = build_model(SMALL, 11), build_model(SMALL, 11)
    assert a.params.keys() == b.params.keys()
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    c = build_model(SMALL, 12)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)


@pytest.mark.parametrize("bad", [
    dict(backbone="resnet"), dict(change_module="lstm"), dict(decoder_levels=1),
    dict(change_module="retro"), dict(arpp_dilations=()), dict(arpp_dilations=(1, 1)),
    dict(change_widths=(15, 32, 64)), dict(change_widths=(16, 32)), dict(input_length_hint=1),
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        build_model(ModelConfig(**bad))


def test_config_error_lists_every_violation():
    with pytest.raises(ConfigError) as e:
        ModelConfig(backbone="x", change_module="y").validate()
    assert "backbone" in str(e.value) and "change_module" in str(e.value)


def test_config_lines_round_trip():
    assert ModelConfig.from_lines(SMALL.to_lines()) == SMALL
    with pytest.raises(ConfigError):
        ModelConfig.from_lines(["nonsense=1"])


def test_output_is_a_probability(desk):
    y = infer(desk, clip(np.random.default_rng(1), n=2, h=64, w=64) * 10 - 5)
    assert y.shape == (2, 1, 1, 64, 64)
    assert ((y > 0) & (y < 1)).all()


def test_static_clip_length_invariance(small):
    frame = clip(np.random.default_rng(2), l=1)
    y4 = infer(small, np.repeat(frame, 4, axis=2))
    y6 = infer(small, np.repeat(frame, 6, axis=2))
    np.testing.assert_allclose(y4, y6, rtol=0, atol=1e-6)


def test_batch_independence(small):
    x = clip(np.random.default_rng(3), n=3)
    batched = infer(small, x)
    for i in range(3):
        np.testing.assert_allclose(infer(small, x[i:i + 1])[0], batched[i], rtol=1e-6, atol=1e-7)
    same = infer(small, np.repeat(x[:1], 3, axis=0))
    assert np.array_equal(same[0], same[1]) and np.array_equal(same[1], same[2])


@pytest.mark.parametrize("L", [2, 3, 4, 6, 8])
def test_temporal_scalability(small, L):
    assert infer(small, clip(np.random.default_rng(L), l=L)).shape == (1, 1, 1, 16, 16)


def test_input_errors(small):
    with pytest.raises(TemporalLengthError):
        infer(small, clip(np.random.default_rng(0), l=1))
    with pytest.raises(ShapeError):
        infer(small, clip(np.random.default_rng(0), h=18, w=16))


def test_translation_equivariance_in_interior(small):
    rng = np.random.default_rng(4)
    x = clip(rng, h=48, w=48)
    s = small.config.spatial_multiple
    y = infer(small, x)[0, 0, 0]
    ys = infer(small, np.roll(x, (s, s), axis=(3, 4)))[0, 0, 0]
    m = 16  # exceeds the receptive-field radius of SMALL
    np.testing.assert_allclose(ys[m + s:-m, m + s:-m], y[m:-m - s, m:-m - s], atol=1e-5)


def test_history_matters(small):
    rng = np.random.default_rng(5)
    x = clip(rng)
    base = infer(small, x)
    for l in range(3):
        p = x.copy()
        p[:, :, l] += rng.standard_normal(p[:, :, l].shape).astype(np.float32) * 0.3
        assert np.abs(infer(small, p) - base).max() > 0


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_current_frame_perturbation_changes_output(small, seed):
    rng = np.random.default_rng(seed)
    x = clip(rng)
    p = x.copy()
    p[:, :, -1] = rng.random(p[:, :, -1].shape)
    assert not np.array_equal(infer(small, x), infer(small, p))


def test_multiscale_single_and_duplicate(small):
    x = clip(np.random.default_rng(6))
    y = infer(small, x)
    assert np.array_equal(infer_multiscale(small, x, [1]), y)
    assert np.array_equal(infer_multiscale(small, x, [1, 1]), y)
    with pytest.raises(ConfigError):
        infer_multiscale(small, x, [])


def test_multiscale_composition(small):
    x = clip(np.random.default_rng(7), h=32, w=32)
    half = infer(small, bilinear_resize(x, 16, 16))
    expected = (infer(small, x) + bilinear_resize(half, 32, 32)) / 2
    np.testing.assert_allclose(infer_multiscale(small, x, [1, 0.5]), expected, atol=1e-6)


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, small):
    p1, p2 = tmp_path / "a.rcnet", tmp_path / "b.rcnet"
    save_checkpoint(small, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.seed == small.seed and loaded.config == small.config
    x = clip(np.random.default_rng(8))
    assert np.array_equal(infer(loaded, x), infer(small, x))


def test_checkpoint_keeps_trained_values(small):
    m = small.copy()
    for v in m.graph.trainable().values():
        v += 0.125
    back = model_from_bytes(checkpoint_bytes(m))
    assert all(np.array_equal(back.params[k], v) for k, v in m.graph.trainable().items())


def test_checkpoint_errors(small):
    good = checkpoint_bytes(small)
    with pytest.raises(MagicError):
        model_from_bytes(b"XCNET1" + good[6:])
    with pytest.raises(VersionError):
        model_from_bytes(good[:6] + b"\x02\x00" + good[8:])
    for cut in (3, 10, 30, len(good) // 2, len(good) - 1):
        with pytest.raises(TruncatedError):
            model_from_bytes(good[:cut])
    with pytest.raises(FormatError):
        model_from_bytes(good + b"\x00")


def test_checkpoint_dim_mismatch(small):
    other = build_model(ModelConfig(**{**SMALL.__dict__, "backbone_widths": (4, 8)}), 3)
    raw = checkpoint_bytes(other)
    cfg_block = "\n".join(other.config.to_lines()).encode()
    swapped = raw.replace(cfg_block, "\n".join(SMALL.to_lines()).encode())
    assert len(swapped) == len(raw)
    with pytest.raises(DimMismatchError):
        model_from_bytes(swapped)


def test_bad_config_block(small):
    raw = checkpoint_bytes(small)
    bad = raw.replace(b"change_module=arpp", b"change_module=xxxx")
    with pytest.raises(FormatError):
        model_from_bytes(bad)


def test_stream_helpers_match(tmp_path, small):
    p = tmp_path / "m.rcnet"
    save_checkpoint(small, p)
    assert p.read_bytes() == checkpoint_bytes(small)
    assert io.BytesIO(p.read_bytes()).read(6) == b"RCNET1"
