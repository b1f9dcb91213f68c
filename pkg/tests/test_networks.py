import numpy as np
import pytest

from hartleyseg import autodiff as ad
from hartleyseg.networks import (CheckpointError, Model, NetworkConfig, count_params,
                                 dump_checkpoint, load_checkpoint, param_breakdown, param_shapes)

from oracles import conv_down, conv_up, reference_network


def tiny(variant, **kw):
    base = dict(variant=variant, in_channels=2, n_classes=3, width=4, k_max=(2, 2, 1),
                n_blocks=3, n_heads=2)
    base.update(kw)
    return NetworkConfig(**base)


@pytest.mark.parametrize("variant", ["hnoseg", "hartleymha", "fno"])
def test_softmax_outputs_and_shapes(variant, rng):
    model = Model.build(tiny(variant), seed=1)
    x = rng.normal(size=(2, 8, 8, 4))
    main, aux = model.forward(x)
    assert main.shape == (3, 8, 8, 4)
    np.testing.assert_allclose(main.sum(axis=0), 1.0, atol=1e-6)
    assert len(aux) == (0 if variant == "fno" else 2)
    for a in aux:
        assert a.shape == main.shape
        np.testing.assert_allclose(a.sum(axis=0), 1.0, atol=1e-6)


@pytest.mark.parametrize("variant", ["hnoseg", "hartleymha", "fno"])
def test_forward_matches_composition_oracle(variant, rng):
    cfg = tiny(variant)
    model = Model.build(cfg, seed=2)
    x = rng.normal(size=(2, 8, 4, 4))
    main, aux = model.forward(x)
    ref_main, ref_aux = reference_network(x, model.params, cfg)
    np.testing.assert_allclose(main, ref_main, atol=1e-9)
    for a, r in zip(aux, ref_aux):
        np.testing.assert_allclose(a, r, atol=1e-9)


def test_resampling_convs_match_loops(rng):
    x = rng.normal(size=(2, 4, 2, 6))
    w, b = rng.normal(size=(3, 2, 2, 2, 2)), rng.normal(size=3)
    np.testing.assert_allclose(ad.conv_down(ad.Tape().constant(x), w, b).value, conv_down(x, w, b))
    y = rng.normal(size=(3, 2, 1, 3))
    wu, bu = rng.normal(size=(3, 2, 2, 2, 2)), rng.normal(size=2)
    np.testing.assert_allclose(ad.conv_up(ad.Tape().constant(y), wu, bu).value, conv_up(y, wu, bu))


def test_zero_shot_resolution(rng):
    model = Model.build(tiny("hnoseg"), seed=3)
    before = {k: v.copy() for k, v in model.params.items()}
    small = model.predict_proba(rng.normal(size=(2, 16, 16, 8)))
    large = model.predict_proba(rng.normal(size=(2, 32, 32, 16)))
    assert small.shape[1:] == (16, 16, 8) and large.shape[1:] == (32, 32, 16)
    for k in before:
        assert np.array_equal(before[k], model.params[k])


def test_odd_dims_are_padded_and_cropped(rng):
    model = Model.build(tiny("hartleymha"), seed=4)
    out = model.predict_proba(rng.normal(size=(2, 7, 6, 5)))
    assert out.shape == (3, 7, 6, 5)
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-6)


def test_input_errors(rng):
    model = Model.build(tiny("hnoseg"), seed=0)
    with pytest.raises(ValueError, match="channel|expected"):
        model.forward(rng.normal(size=(3, 4, 4, 4)))
    with pytest.raises(ValueError):
        model.forward(rng.normal(size=(4, 4, 4)))
    with pytest.raises(ValueError):
        NetworkConfig(variant="unet")
    with pytest.raises(ValueError):
        NetworkConfig(variant="fno", deep_supervision_taps=(1,))


def test_reference_default_counts():
    hno = count_params(NetworkConfig("hnoseg"))
    mha = count_params(NetworkConfig("hartleymha"))
    fno = count_params(NetworkConfig("fno"))
    assert abs(hno - 24_800) <= 0.2 * 24_800
    assert abs(mha - 47_700) <= 0.2 * 47_700
    assert abs(fno - 1.445e8) <= 0.1 * 1.445e8


def test_count_is_sum_of_entries_and_resolution_free():
    cfg = tiny("hartleymha")
    model = Model.build(cfg)
    assert count_params(model) == count_params(cfg) == sum(param_breakdown(cfg).values())
    assert count_params(model) == sum(v.size for v in model.params.values())
    # a single 2x2 matrix with a 2-bias
    assert sum(np.prod(s) for s in [(2, 2), (2,)]) == 6


def test_doubling_blocks_doubles_block_subtotal():
    a = param_breakdown(tiny("hnoseg", n_blocks=3, deep_supervision_taps=(1,)))
    b = param_breakdown(tiny("hnoseg", n_blocks=6, deep_supervision_taps=(1,)))
    assert b["blocks"] == 2 * a["blocks"]
    assert b["input"] == a["input"] and b["head"] == a["head"]


def test_fno_has_per_frequency_weights_and_no_extras():
    shapes = param_shapes(tiny("fno"))
    assert shapes["block0.0.R"] == (2, 4, 4, 4, 4, 2)
    assert not any(k.startswith("ds") for k in shapes)
    assert not any(".1." in k for k in shapes)


def test_build_is_deterministic():
    a, b = Model.build(tiny("hnoseg"), seed=7), Model.build(tiny("hnoseg"), seed=7)
    c = Model.build(tiny("hnoseg"), seed=8)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not all(np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_checkpoint_round_trip(tmp_path, rng):
    model = Model.build(tiny("hartleymha"), seed=5)
    path = tmp_path / "m.ckpt"
    model.save(path)
    loaded = Model.load(path)
    assert loaded.config == model.config
    assert list(loaded.params) == list(model.params)
    for k in model.params:
        assert np.array_equal(loaded.params[k], model.params[k])
    x = rng.normal(size=(2, 4, 4, 4))
    assert np.array_equal(loaded.predict_proba(x), model.predict_proba(x))
    assert dump_checkpoint(loaded) == path.read_bytes()


def test_checkpoint_errors():
    data = dump_checkpoint(Model.build(tiny("hnoseg")))
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(data[:-5])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(b"XXXXXXXX" + data[8:])
    bad_version = data[:8] + (2).to_bytes(4, "little") + data[12:]
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad_version)
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(data + b"\0")


def test_config_text_round_trip():
    cfg = tiny("hartleymha", deep_supervision_taps=(0, 2))
    assert NetworkConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        NetworkConfig.from_text("variant=hnoseg\ncolour=blue\n")
