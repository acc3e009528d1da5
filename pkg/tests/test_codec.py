"""Container format and end-to-end compression semantics."""

import numpy as np
import pytest

from flowzip import codec
from flowzip.data import gen_synth
from flowzip.errors import (
    AlphabetOverflowError,
    ChecksumError,
    CorruptStreamError,
    DataFormatError,
    VerificationError,
)
from flowzip.model import FlowConfig, FlowModel
from flowzip.train import calibrate_activations, calibrate_weights


def _model(seed=0, spread=0.05, cfg=None):
    model = FlowModel(cfg or FlowConfig(hidden=8, couplings=2, blocks=1), seed=seed)
    rng = np.random.default_rng(seed + 1)
    for net in model.coupling_nets():
        net.out.w.value[...] = rng.normal(0, spread, net.out.w.value.shape)
        net.out.b.value[...] = rng.normal(0, 4 * spread, net.out.b.value.shape)
    return model


def _quantized_model(seed=0):
    model = _model(seed)
    calib = gen_synth(99, 16)
    model.act_quant = True
    calibrate_activations(model, calib)
    model.weight_quant = True
    calibrate_weights(model)
    return model


def test_roundtrip_100_random_images_all_paths():
    x = gen_synth(21, 100)
    model = _quantized_model()
    for path in ("float", "fake", "int"):
        container, stats = codec.compress(x, model, path)
        back = codec.decompress(container, model, path)
        assert np.array_equal(back, x), f"{path} path not lossless"
        assert stats["coding_bpd"] >= stats["analytic_bpd"] - 0.001


def test_compress_deterministic():
    x = gen_synth(4, 10)
    model = _model()
    a, _ = codec.compress(x, model, "float")
    b, _ = codec.compress(x, model, "float")
    assert a == b


def test_threaded_compress_bitwise_equal():
    x = gen_synth(4, 12)
    model = _model()
    a, _ = codec.compress(x, model, "float", threads=1)
    b, _ = codec.compress(x, model, "float", threads=3)
    assert a == b


def test_checksum_binds_model_and_path():
    x = gen_synth(5, 4)
    model = _quantized_model()
    container, _ = codec.compress(x, model, "float")
    with pytest.raises(ChecksumError):
        codec.decompress(container, model, "int")
    other = _quantized_model(seed=7)
    with pytest.raises(ChecksumError):
        codec.decompress(container, other, "float")


def test_tampered_payload_never_crashes():
    x = gen_synth(6, 4)
    model = _model()
    container, _ = codec.compress(x, model, "float")
    payload_region = len(container) - 40
    for offset in range(payload_region, len(container), 7):
        corrupt = bytearray(container)
        corrupt[offset] ^= 0x41
        try:
            got = codec.decompress(bytes(corrupt), model, "float")
            assert not np.array_equal(got, x)
        except (VerificationError, DataFormatError):
            pass


def test_truncated_container_errors():
    x = gen_synth(6, 2)
    model = _model()
    container, _ = codec.compress(x, model, "float")
    with pytest.raises(DataFormatError):
        codec.decompress(container[: len(container) // 2], model, "float")
    with pytest.raises(DataFormatError):
        codec.decompress(b"JUNK" + container, model, "float")
    with pytest.raises(DataFormatError):
        codec.decompress(container + b"\x00", model, "float")


def test_latent_overflow_is_diagnosed():
    model = _model()
    # a huge coupling bias pushes latents far outside the alphabet window
    net = model.levels[0].couplings[0].net
    net.out.b.value[...] = 6000.0
    x = gen_synth(1, 2)
    with pytest.raises(AlphabetOverflowError, match="widened"):
        codec.compress(x, model, "float")


def test_wrong_decode_order_fails_roundtrip(monkeypatch):
    """Decoding a conditioned latent before its conditioner must not survive
    a round trip: flip the per-image symbol order and expect failure."""
    x = gen_synth(8, 3)
    model = _model()
    import flowzip.codec as codec_mod

    original = codec_mod._image_plan

    def flipped(model_, result, index, cache):
        order = list(range(len(result.latents) - 1)) + [len(result.latents) - 1]
        syms, fracs, lss = [], [], []
        for li in order:
            mu, log_s = result.priors[li]
            s, f, l = codec_mod._plan_tensor(
                cache, result.latents[li][index], mu[0], log_s[0]
            )
            syms.append(s)
            fracs.append(f)
            lss.append(l)
        return np.concatenate(syms), np.concatenate(fracs), np.concatenate(lss)

    monkeypatch.setattr(codec_mod, "_image_plan", flipped)
    container, _ = codec_mod.compress(x, model, "float")
    monkeypatch.setattr(codec_mod, "_image_plan", original)
    try:
        got = codec_mod.decompress(container, model, "float")
        assert not np.array_equal(got, x)
    except (VerificationError, AlphabetOverflowError):
        pass


def test_empty_and_single_image_containers():
    model = _model()
    x = gen_synth(9, 1)
    container, stats = codec.compress(x, model, "float")
    back = codec.decompress(container, model, "float")
    assert np.array_equal(back, x)
    assert stats["payload_bytes"] >= 8
    with pytest.raises(DataFormatError):
        codec.compress(x[:0], model, "float")


def test_gap_small_even_untrained():
    # fixed coder overhead amortizes across the batch; the remaining gap is
    # the frequency floor plus table quantization
    x = gen_synth(3, 64)
    model = _model()
    _, stats = codec.compress(x, model, "float")
    gap = stats["coding_bpd"] - stats["analytic_bpd"]
    assert -0.001 <= gap <= 0.02


def test_mass_conservation_across_paths():
    x = gen_synth(31, 6)
    model = _quantized_model(3)
    sizes = {}
    for path in ("float", "fake", "int"):
        container, stats = codec.compress(x, model, path)
        sizes[path] = stats["coding_bpd"]
    # paths are different models of the data; all must be near each other here
    assert max(sizes.values()) - min(sizes.values()) < 0.5
