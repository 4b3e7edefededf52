import numpy as np
import pytest

from lipcheck import random_pair_ratios
from lipshift import tensor as T
from lipshift.exceptions import ConfigError, DimensionError, FormatError
from lipshift.layers import LiResConv, PatchEmbed
from lipshift.model import (
    ArchConfig,
    LipschitzReport,
    build_model,
    decode_checkpoint,
    encode_checkpoint,
    lipschitz_report,
    load_checkpoint,
    save_checkpoint,
)
from lipshift.tensor import Tensor


def test_desk_model_builds():
    m = build_model(ArchConfig(), seed=0)
    assert m.num_parameters() == 66034
    out = m.forward(np.zeros((2, 3, 8, 8), dtype=np.float32))
    assert out.shape == (2, 2)
    names = [l.name for l in m.layers]
    assert len(names) == len(set(names))
    assert names[0] == "embed" and names[-1] == "head"


def test_same_seed_same_parameters():
    a, b = build_model(ArchConfig(), 3), build_model(ArchConfig(), 3)
    for (ka, pa), (kb, pb) in zip(a.parameters().items(), b.parameters().items()):
        assert ka == kb and np.array_equal(pa.data, pb.data)
    c = build_model(ArchConfig(), 4)
    assert not np.array_equal(a.parameters()["embed.proj"].data, c.parameters()["embed.proj"].data)


@pytest.mark.parametrize(
    "kwargs,field",
    [
        ({"stage_depths": (1, 0, 1, 1)}, "stage_depths"),
        ({"embed_dim": 15}, "embed_dim"),
        ({"input_shape": (3, 6, 6)}, "input_shape"),
        ({"p_drop": 1.0}, "p_drop"),
        ({"num_classes": 1}, "num_classes"),
        ({"shift_fraction": 0.3}, "shift_fraction"),
        ({"dim_multipliers": (1, 2)}, "dim_multipliers"),
    ],
)
def test_invalid_config_names_field(kwargs, field):
    with pytest.raises(ConfigError, match=field):
        build_model(ArchConfig(**kwargs))


def test_config_dict_roundtrip_and_unknown_keys():
    cfg = ArchConfig(p_drop=0.1)
    assert ArchConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ArchConfig.from_dict({"depth": 3})


def test_init_bound_near_one():
    m = build_model(ArchConfig(), seed=0)
    rep = lipschitz_report(m)
    n_affine = sum(isinstance(l, (LiResConv, PatchEmbed)) for l in m.backbone)
    assert rep.backbone_bound <= 1.05**n_affine
    assert rep.backbone_bound == pytest.approx(1.0, abs=0.05)
    assert not rep.flagged


def test_forward_shape_error_and_determinism():
    m = build_model(ArchConfig(), 0)
    with pytest.raises(DimensionError):
        m.forward(np.zeros((1, 3, 4, 4), dtype=np.float32))
    x = np.random.default_rng(0).random((3, 3, 8, 8)).astype(np.float32)
    x[2] = x[0]
    out = m.predict_logits(x)
    np.testing.assert_array_equal(out[0], out[2])
    np.testing.assert_array_equal(out, m.predict_logits(x))


def test_zero_input_logits_from_offsets():
    m = build_model(ArchConfig(liresconv_init="zeros"), 0)
    out = m.predict_logits(np.zeros((1, 3, 8, 8), dtype=np.float32))
    np.testing.assert_allclose(out, 0.0, atol=1e-6)


def test_report_arithmetic_and_pairs():
    for p in (0.0, 0.1, 0.6):
        m = build_model(ArchConfig(p_drop=p), 1)
        rep = lipschitz_report(m)
        assert rep.scaled_bound == rep.backbone_bound * (1.0 - p)
        assert rep.backbone_bound == pytest.approx(np.prod([b for _, b in rep.per_layer]), rel=1e-12)
        K = rep.margin_constants
        np.testing.assert_allclose(K, K.T)
        assert np.all(np.diag(K) == 0)
        assert np.all(K <= 2 * rep.scaled_bound + 1e-12)
    rep = LipschitzReport([("a", 100.0)], 100.0, 0.1, 90.0, np.zeros((2, 2)))
    assert rep.scaled_bound == 90.0
    assert rep.loosest(1) == [("a", 100.0)]


def test_report_is_reproducible():
    m = build_model(ArchConfig(), 2)
    a, b = lipschitz_report(m), lipschitz_report(m)
    assert a.backbone_bound == pytest.approx(b.backbone_bound, rel=1e-6)
    assert "backbone_bound" in a.to_text()


def test_end_to_end_per_logit_lipschitz():
    m = build_model(ArchConfig(), 5)
    rng = np.random.default_rng(0)
    # push the weights away from the init to get a nontrivial bound
    m.set_parameters({k: p.data + 0.05 * rng.standard_normal(p.shape) for k, p in m.parameters().items()})
    rep = lipschitz_report(m)
    with T.default_dtype(np.float64):
        m64 = build_model(ArchConfig(), 5)
        m64.set_parameters({k: p.data for k, p in m.parameters().items()})
        x = rng.random((2000, 3, 8, 8))
        y = np.clip(x + 0.05 * rng.standard_normal(x.shape), 0, 1)
        with T.no_grad():
            fx = m64.forward(Tensor(x)).data
            fy = m64.forward(Tensor(y)).data
    dx = np.linalg.norm((x - y).reshape(len(x), -1), axis=1)
    per_logit = np.abs(fx - fy).max(axis=1) / dx
    assert per_logit.max() <= rep.backbone_bound * (1 + 1e-4)
    K = rep.pair_constants()
    margin = np.abs((fx[:, 0] - fx[:, 1]) - (fy[:, 0] - fy[:, 1])) / dx
    assert margin.max() <= K[0, 1] * (1 + 1e-4)


def test_features_lipschitz_sampling():
    m = build_model(ArchConfig(), 6)
    rep = lipschitz_report(m)
    with T.default_dtype(np.float64):
        m64 = build_model(ArchConfig(), 6)
        ratios = random_pair_ratios(m64.features, (3, 8, 8), n=2000, scale=0.5)
    assert ratios.max() <= rep.backbone_bound * (1 + 1e-4)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    m = build_model(ArchConfig(p_drop=0.1), 7)
    m.warm_start_bounds(5)
    p1, p2 = tmp_path / "a.lsft", tmp_path / "b.lsft"
    save_checkpoint(p1, m, meta={"epoch": 3})
    loaded, extra, meta = load_checkpoint(p1)
    save_checkpoint(p2, loaded, meta=meta)
    assert p1.read_bytes() == p2.read_bytes()
    assert meta == {"epoch": 3} and extra == {}
    x = np.random.default_rng(0).random((2, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(m.predict_logits(x), loaded.predict_logits(x))


def test_checkpoint_layout():
    raw = encode_checkpoint({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"arch": {}})
    assert raw[:4] == b"LSFT"
    assert int.from_bytes(raw[4:8], "little") == 1
    arrays, cfg = decode_checkpoint(raw)
    np.testing.assert_array_equal(arrays["w"], np.arange(6).reshape(2, 3))
    assert raw.endswith(np.arange(6, dtype="<f4").tobytes())


def test_checkpoint_errors(tmp_path):
    raw = encode_checkpoint({"w": np.ones(3, dtype=np.float32)}, {"arch": {}})
    with pytest.raises(FormatError, match="bad magic"):
        decode_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="truncated.*byte"):
        decode_checkpoint(raw[:-2])
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(raw + b"\0")
    with pytest.raises(FormatError, match="version"):
        decode_checkpoint(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.lsft")
