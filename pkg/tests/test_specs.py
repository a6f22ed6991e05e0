import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mmexperts.specs import (ARCH_NAMES, FEATURE_NETS, FLOPS_CONVENTION, PAPER, TINY, LayerSpec,
                             build, composition, count_arch_flops, count_flops, dims, feature_spec,
                             head_specs, resolve)
from mmexperts.tensor import ConfigurationError

from oracles import TABLE4, flops_by_hand


def _rows(kind):
    spec = feature_spec(kind, PAPER)
    convs = {l.name: l.out_shape for l in spec.layers if l.kind == "conv"}
    return convs, spec.output_shape


@pytest.mark.parametrize("kind", sorted(TABLE4))
def test_table4_cells(kind):
    convs, final = _rows(kind)
    for row in TABLE4[kind]:
        name, cells = row[0], tuple(row[1:])
        if name in ("vectorize", "linear"):
            assert final == cells, (kind, name)
        else:
            assert convs[name] == cells, (kind, name)
    assert len(convs) == sum(r[0].startswith("conv") for r in TABLE4[kind])


def test_lidar_full_vectorize_is_768_before_linear():
    spec = feature_spec("lidar_full_expert")
    flat = [l for l in spec.layers if l.kind == "flatten"][0]
    assert flat.out_shape == (768,)


def test_declared_shape_mismatch_detected():
    bad = [LayerSpec("conv", "c", 4, (3, 3), (1, 1), (0, 0), declared=(4, 9, 9))]
    with pytest.raises(ConfigurationError, match="declared"):
        resolve("bad", (1, 10, 10), bad)


def test_build_examples():
    spec, store = build("camera_expert")
    assert sum(l.kind == "conv" for l in spec.layers) == 6 and spec.output_shape == (512,)
    spec, _ = build("lidar_gating_feature")
    assert sum(l.kind == "conv" for l in spec.layers) == 3 and spec.output_shape == (128,)
    spec, store = build("lidar_full_expert")
    assert spec.layers[-2].kind == "dense" and spec.output_shape == (512,)
    assert store["lidar_full_expert.linear.weight"].shape == (512, 768)
    with pytest.raises(KeyError):
        build("resnet50")


def test_feature_lengths():
    d = dims(PAPER)
    assert (d.camera, d.lidar, d.lidar_full, d.gate_camera, d.gate_lidar) == (512, 512, 512, 128, 128)
    assert d.branch == 513


def test_head_sizes():
    H = head_specs(PAPER)
    expect = {
        "step1_gate_head": (2560, [64, 5]), "foursensor_gate_head": (2048, [64, 4]),
        "main_gate_head": (512, [64, 4]), "lidar_gate_head": (128, [32, 5]),
        "final_head": (517, [128, 64, 1]), "step1_head": (2560, [128, 1]),
        "foursensor_head": (2048, [128, 1]), "lidar_head": (513, [128, 1]),
    }
    for name, (n_in, widths) in expect.items():
        spec = H[name]
        assert spec.input_shape == (n_in,), name
        assert [l.channels for l in spec.layers if l.kind == "dense"] == widths, name


def test_prediction_heads_end_in_tanh():
    for name in ("final_head", "step1_head", "foursensor_head", "lidar_head", "baseline_head"):
        assert head_specs()[name].layers[-1].kind == "tanh"


def test_tiny_profile_fits():
    for kind in FEATURE_NETS:
        assert feature_spec(kind, TINY).out_features > 0


# -- FLOPs ------------------------------------------------------------------------------

def test_toy_spec_flops():
    layers = [LayerSpec("conv", "c", 1, (1, 1)), LayerSpec("bn", "bn"), LayerSpec("relu", "r")]
    spec = resolve("toy", (1, 1, 1), layers)
    assert count_flops(spec) == 2 + 1 + 1
    assert count_flops(spec) == flops_by_hand((1, 1, 1), [{"kind": "conv", "kernel": (1, 1), "channels": 1},
                                                          {"kind": "bn"}, {"kind": "relu"}])


def _random_spec(rng):
    c, h, w = int(rng.integers(1, 4)), int(rng.integers(6, 14)), int(rng.integers(6, 14))
    specs, plain = [], []
    for i in range(int(rng.integers(1, 4))):
        k = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        s = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        p = (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
        ch = int(rng.integers(1, 6))
        specs += [LayerSpec("conv", f"c{i}", ch, k, s, p), LayerSpec("bn", f"b{i}"), LayerSpec("relu", f"r{i}")]
        plain += [{"kind": "conv", "kernel": k, "stride": s, "pad": p, "channels": ch}, {"kind": "bn"},
                  {"kind": "relu"}]
    specs.append(LayerSpec("flatten", "f"))
    plain.append({"kind": "flatten"})
    n = int(rng.integers(2, 9))
    specs += [LayerSpec("dense", "d", n), LayerSpec("softmax", "sm")]
    plain += [{"kind": "dense", "channels": n}, {"kind": "softmax"}]
    return (c, h, w), specs, plain


@pytest.mark.parametrize("seed", range(5))
def test_flops_random_specs_match_oracle(seed):
    rng = np.random.default_rng(seed)
    shape, specs, plain = _random_spec(rng)
    spec = resolve(f"rand{seed}", shape, specs)
    assert count_flops(spec) == flops_by_hand(shape, plain)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_flops_random_specs_property(seed):
    shape, specs, plain = _random_spec(np.random.default_rng(seed))
    try:
        spec = resolve("r", shape, specs)
    except ConfigurationError:
        assume(False)  # stack shrank below a kernel
    assert count_flops(spec) == flops_by_hand(shape, plain)


def test_final_net_flops_decomposition():
    main_gate = count_arch_flops("main_gate")
    lidar_gate = count_arch_flops("lidar_gate")
    head = count_flops(head_specs()["final_head"])
    cam = count_arch_flops("camera_expert")
    lid = count_arch_flops("lidar_expert")
    assert count_arch_flops("final_net", path="camera") == main_gate + cam + head
    assert count_arch_flops("final_net", path="lidar") == main_gate + lidar_gate + lid + head


def test_final_net_needs_path():
    with pytest.raises(ValueError):
        composition("final_net")


def test_every_cli_arch_counts():
    for name in ARCH_NAMES:
        paths = ("lidar", "camera") if name == "final_net" else (None,)
        for p in paths:
            assert count_arch_flops(name, PAPER, p) > 0


def test_convention_is_stated():
    assert "2 FLOPs" in FLOPS_CONVENTION
