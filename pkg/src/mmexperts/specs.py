"""Declarative network descriptions, shape engine and FLOPs accounting.

Every expert and gating feature extractor is written down as a list of
``LayerSpec`` rows. The same rows drive parameter initialisation, the
forward pass (``run_network``) and ``count_flops``; declared output sizes
are checked against the computed ones when a spec is built.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, conv_out_size


@dataclass(frozen=True)
class Profile:
    """Input geometry. ``paper`` is the real setup, ``tiny`` is for CI."""

    name: str
    camera_shape: tuple  # (C, H, W)
    lidar_shape: tuple  # (C, H, W)
    channel_div: int = 1

    @property
    def lidar_cols(self):
        return self.lidar_shape[2]

    @property
    def crop_width(self):
        # 60 degrees out of the 180 degree depth map
        return round(self.lidar_cols / 3)


PAPER = Profile("paper", (3, 120, 192), (2, 16, 450))
TINY = Profile("tiny", (3, 60, 96), (2, 8, 226), channel_div=4)
PROFILES = {"paper": PAPER, "tiny": TINY}


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | pool | bn | relu | tanh | softmax | flatten | dense
    name: str = ""
    channels: int = 0  # conv output channels / dense output features
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    pad: tuple = (0, 0)
    declared: tuple | None = None
    out_shape: tuple = ()


@dataclass
class NetworkSpec:
    name: str
    input_shape: tuple
    layers: list = field(default_factory=list)

    @property
    def output_shape(self):
        return self.layers[-1].out_shape if self.layers else self.input_shape

    @property
    def out_features(self):
        return int(np.prod(self.output_shape))

    def rows(self):
        """(layer name, output shape) for every conv and the final vector."""
        out = [(l.name, l.out_shape) for l in self.layers if l.kind == "conv"]
        out.append((self.layers[-1].kind, self.layers[-1].out_shape))
        return out


# -- shape engine -----------------------------------------------------------

def _layer_shape(layer, shape, fit):
    kind = layer.kind
    if kind == "conv":
        c, h, w = shape
        kh, kw = layer.kernel
        if fit:
            kh = min(kh, h + 2 * layer.pad[0])
            kw = min(kw, w + 2 * layer.pad[1])
            layer = replace(layer, kernel=(kh, kw))
        ho = conv_out_size(h, kh, layer.stride[0], layer.pad[0])
        wo = conv_out_size(w, kw, layer.stride[1], layer.pad[1])
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"{layer.name}: kernel {kh}x{kw} does not fit {h}x{w}")
        return layer, (layer.channels, ho, wo)
    if kind == "pool":
        c, h, w = shape
        kh, kw = layer.kernel
        sh, sw = layer.stride
        if fit:
            if kh > h + 2 * layer.pad[0]:
                kh, sh = h, 1
            if kw > w + 2 * layer.pad[1]:
                kw, sw = w, 1
            layer = replace(layer, kernel=(kh, kw), stride=(sh, sw))
        ho = conv_out_size(h, kh, sh, layer.pad[0])
        wo = conv_out_size(w, kw, sw, layer.pad[1])
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"{layer.name}: pool {kh}x{kw} does not fit {h}x{w}")
        return layer, (c, ho, wo)
    if kind == "flatten":
        return layer, (int(np.prod(shape)),)
    if kind == "dense":
        if len(shape) != 1:
            raise ConfigurationError(f"{layer.name}: dense layer needs a vector input, got {shape}")
        return layer, (layer.channels,)
    return layer, shape


def resolve(name, input_shape, layers, fit=False):
    """Compute every layer's output shape and check declared sizes."""
    shape = tuple(input_shape)
    out = []
    for layer in layers:
        layer, shape = _layer_shape(layer, shape, fit)
        if layer.declared is not None and not fit and tuple(layer.declared) != shape:
            raise ConfigurationError(
                f"{name}/{layer.name}: computed output {shape} != declared {layer.declared}")
        out.append(replace(layer, out_shape=shape))
    return NetworkSpec(name, tuple(input_shape), out)


def conv_block(name, channels, kernel, stride, pad, declared=None, pool=None, pool_pad=(0, 0)):
    rows = [
        LayerSpec("conv", name, channels, tuple(kernel), tuple(stride), tuple(pad), declared),
        LayerSpec("bn", name + ".bn"),
        LayerSpec("relu", name + ".relu"),
    ]
    if pool is not None:
        k, s = pool
        rows.append(LayerSpec("pool", name + ".pool", kernel=k, stride=s, pad=pool_pad))
    return rows


P2 = ((2, 2), (2, 2))


def _expert_rows(kind, div):
    """Conv stacks of the five feature extractors (output sizes pre-pool)."""
    def ch(c):
        return max(c // div, 4)

    if kind == "lidar_expert":
        return (conv_block("conv1", ch(16), (3, 5), (1, 1), (1, 1), (16, 16, 148), P2)
                + conv_block("conv2", ch(32), (3, 5), (1, 1), (1, 1), (32, 8, 72), P2)
                + conv_block("conv3", ch(64), (3, 5), (1, 1), (1, 1), (64, 4, 34), P2)
                + conv_block("conv4", ch(96), (3, 4), (1, 1), (1, 1), (96, 2, 16), P2)
                + conv_block("conv5", ch(128), (3, 3), (1, 1), (1, 1), (128, 1, 8), ((1, 2), (1, 2)))
                + [LayerSpec("flatten", "vectorize", declared=(512,))])
    if kind == "lidar_full_expert":
        return (conv_block("conv1", ch(16), (3, 10), (1, 2), (1, 1), (16, 16, 222), P2)
                + conv_block("conv2", ch(32), (3, 8), (1, 1), (1, 1), (32, 8, 106), P2)
                + conv_block("conv3", ch(64), (3, 6), (1, 1), (1, 1), (64, 4, 50), P2)
                + conv_block("conv4", ch(96), (3, 4), (1, 1), (1, 1), (96, 2, 24), P2)
                + conv_block("conv5", ch(128), (3, 3), (1, 1), (1, 1), (128, 1, 12), ((1, 2), (1, 2)))
                + [LayerSpec("flatten", "vectorize", declared=(768,)),
                   LayerSpec("dense", "linear", ch(512), declared=(512,)),
                   LayerSpec("relu", "linear.relu")])
    if kind == "camera_expert":
        return (conv_block("conv1", ch(16), (4, 4), (2, 2), (1, 1), (16, 60, 96), P2)
                + conv_block("conv2", ch(32), (3, 3), (1, 1), (1, 1), (32, 30, 48), P2)
                + conv_block("conv3", ch(64), (2, 3), (1, 1), (1, 1), (64, 16, 24),
                             ((3, 3), (2, 2)), pool_pad=(1, 1))
                + conv_block("conv4", ch(96), (3, 3), (1, 1), (1, 1), (96, 8, 12), P2)
                + conv_block("conv5", ch(128), (3, 3), (1, 1), (1, 1), (128, 4, 6), P2)
                + conv_block("conv6", ch(256), (3, 2), (1, 1), (1, 1), (256, 2, 4), P2)
                + [LayerSpec("flatten", "vectorize", declared=(512,))])
    if kind == "lidar_gating_feature":
        return (conv_block("conv1", ch(16), (1, 1), (2, 27), (2, 6), (16, 10, 18))
                + conv_block("conv2", ch(32), (5, 7), (1, 3), (1, 2), (32, 8, 6), P2)
                + conv_block("conv3", ch(64), (3, 4), (1, 1), (1, 1), (64, 4, 2), P2)
                + [LayerSpec("flatten", "vectorize", declared=(128,))])
    if kind == "camera_gating_feature":
        return (conv_block("conv1", ch(16), (1, 1), (10, 10), (1, 1), (16, 13, 20))
                + conv_block("conv2", ch(32), (5, 4), (2, 2), (1, 1), (32, 6, 10), P2)
                + conv_block("conv3", ch(64), (4, 4), (1, 1), (1, 1), (64, 2, 4), P2)
                + [LayerSpec("flatten", "vectorize", declared=(128,))])
    raise KeyError(kind)


FEATURE_NETS = ("camera_expert", "lidar_expert", "lidar_full_expert",
                "lidar_gating_feature", "camera_gating_feature")

# hidden widths of the fully connected heads
HEAD_HIDDEN = {
    "final_head": (128, 64),
    "step1_gate_head": (64,),
    "step1_head": (128,),
    "foursensor_gate_head": (64,),
    "foursensor_head": (128,),
    "main_gate_head": (64,),
    "lidar_gate_head": (32,),
    "lidar_head": (128,),
    "baseline_head": (128,),
    "camera_only_head": (128,),
    "lidar_only_head": (128,),
}


def head_spec(name, n_in, n_out, out_act=None, div=1):
    rows = []
    for i, h in enumerate(HEAD_HIDDEN[name]):
        rows += [LayerSpec("dense", f"fc{i + 1}", max(h // div, 8)), LayerSpec("relu", f"fc{i + 1}.relu")]
    rows.append(LayerSpec("dense", "out", n_out))
    if out_act:
        rows.append(LayerSpec(out_act, "out." + out_act))
    return resolve(name, (n_in,), rows)


def feature_spec(kind, profile=PAPER):
    if kind not in FEATURE_NETS:
        raise KeyError(f"unknown feature network {kind!r}")
    cam = profile.camera_shape
    lid = profile.lidar_shape
    inp = {
        "camera_expert": cam,
        "camera_gating_feature": cam,
        "lidar_expert": (lid[0], lid[1], profile.crop_width),
        "lidar_full_expert": lid,
        "lidar_gating_feature": lid,
    }[kind]
    fit = profile.name != "paper"
    return resolve(kind, inp, _expert_rows(kind, profile.channel_div), fit=fit)


@dataclass(frozen=True)
class Dims:
    """Feature lengths for one profile."""

    camera: int
    lidar: int
    lidar_full: int
    gate_camera: int
    gate_lidar: int

    @property
    def branch(self):
        # camera features are zero padded to the LiDAR branch length (+ g_L)
        return max(self.camera, self.lidar + 1)


def dims(profile=PAPER):
    f = {k: feature_spec(k, profile).out_features for k in FEATURE_NETS}
    return Dims(f["camera_expert"], f["lidar_expert"], f["lidar_full_expert"],
                f["camera_gating_feature"], f["lidar_gating_feature"])


def head_specs(profile=PAPER):
    d = dims(profile)
    div = profile.channel_div
    return {
        "final_head": head_spec("final_head", d.branch + 4, 1, "tanh", div),
        "step1_gate_head": head_spec("step1_gate_head", 5 * d.lidar, 5, None, div),
        "step1_head": head_spec("step1_head", 5 * d.lidar, 1, "tanh", div),
        "foursensor_gate_head": head_spec("foursensor_gate_head", 3 * d.camera + d.lidar_full, 4, None, div),
        "foursensor_head": head_spec("foursensor_head", 3 * d.camera + d.lidar_full, 1, "tanh", div),
        "main_gate_head": head_spec("main_gate_head", 3 * d.gate_camera + d.gate_lidar, 4, None, div),
        "lidar_gate_head": head_spec("lidar_gate_head", d.gate_lidar, 5, None, div),
        "lidar_head": head_spec("lidar_head", d.lidar + 1, 1, "tanh", div),
        "baseline_head": head_spec("baseline_head", 3 * d.camera + d.lidar_full, 1, "tanh", div),
        "camera_only_head": head_spec("camera_only_head", d.camera, 1, "tanh", div),
        "lidar_only_head": head_spec("lidar_only_head", d.lidar_full, 1, "tanh", div),
    }


def build(arch_name, profile=PAPER, seed=0, prefix=None):
    """Return (NetworkSpec, fresh ParamStore) for a feature net or head."""
    from .params import ParamStore

    if arch_name in FEATURE_NETS:
        spec = feature_spec(arch_name, profile)
    else:
        heads = head_specs(profile)
        if arch_name not in heads:
            raise KeyError(f"unknown architecture {arch_name!r}")
        spec = heads[arch_name]
    store = ParamStore()
    init_params(spec, store, prefix or arch_name, np.random.default_rng(seed))
    return spec, store


# -- parameters and execution -------------------------------------------------

def init_params(spec, store, prefix, rng, dtype=np.float32):
    """Fan-in scaled uniform weights, zero-ish biases, BN gamma=1 beta=0."""
    shape = spec.input_shape
    for layer in spec.layers:
        if layer.kind == "conv":
            cin = shape[0]
            kh, kw = layer.kernel
            bound = 1.0 / np.sqrt(cin * kh * kw)
            store.add(f"{prefix}.{layer.name}.weight",
                      rng.uniform(-bound, bound, (layer.channels, cin, kh, kw)).astype(dtype))
            store.add(f"{prefix}.{layer.name}.bias",
                      rng.uniform(-bound, bound, layer.channels).astype(dtype))
        elif layer.kind == "dense":
            n = shape[0]
            bound = 1.0 / np.sqrt(n)
            store.add(f"{prefix}.{layer.name}.weight",
                      rng.uniform(-bound, bound, (layer.channels, n)).astype(dtype))
            store.add(f"{prefix}.{layer.name}.bias",
                      rng.uniform(-bound, bound, layer.channels).astype(dtype))
        elif layer.kind == "bn":
            c = shape[0]
            store.add(f"{prefix}.{layer.name}.gamma", np.ones(c, dtype))
            store.add(f"{prefix}.{layer.name}.beta", np.zeros(c, dtype))
            store.add(f"{prefix}.{layer.name}.running_mean", np.zeros(c, dtype), trainable=False)
            store.add(f"{prefix}.{layer.name}.running_var", np.ones(c, dtype), trainable=False)
        shape = layer.out_shape


def run_network(spec, store, prefix, x, train=False, leaves=None, batch_stats=True):
    """Forward ``x`` through ``spec``.

    Image input is channels-last (N, H, W, C). ``leaves`` collects the
    parameter tensors created, keyed by name, so callers can read their
    gradients after backward. Batch norm uses batch statistics only when
    ``train`` and ``batch_stats`` are true and the subnetwork is trainable.
    """
    trainable = not store.is_frozen(prefix + ".")
    bn_train = train and trainable and batch_stats

    def param(name):
        t = store.tensor(f"{prefix}.{name}", track=train)
        if leaves is not None and t.requires_grad:
            leaves[t.name] = t
        return t

    for layer in spec.layers:
        k = layer.kind
        if k == "conv":
            x = T.conv2d_nhwc(x, param(layer.name + ".weight"), param(layer.name + ".bias"),
                              layer.stride, layer.pad)
        elif k == "bn":
            x = T.batchnorm(x, param(layer.name + ".gamma"), param(layer.name + ".beta"),
                            store[f"{prefix}.{layer.name}.running_mean"],
                            store[f"{prefix}.{layer.name}.running_var"], bn_train)
        elif k == "relu":
            x = T.relu(x)
        elif k == "tanh":
            x = T.tanh(x)
        elif k == "softmax":
            x = T.softmax(x)
        elif k == "pool":
            x = T.maxpool2d_nhwc(x, layer.kernel, layer.stride, layer.pad)
        elif k == "flatten":
            x = T.reshape(x, (x.shape[0], -1))
        elif k == "dense":
            x = T.dense(x, param(layer.name + ".weight"), param(layer.name + ".bias"))
        else:
            raise ConfigurationError(f"unsupported layer kind {k!r}")
    return x


# -- FLOPs ------------------------------------------------------------------

FLOPS_CONVENTION = ("1 multiply-accumulate = 2 FLOPs; conv 2*kh*kw*Cin*Cout*Ho*Wo; "
                    "dense 2*m*n; bn/relu/tanh/pool/softmax 1 FLOP per output element")


def layer_flops(layer, in_shape):
    k = layer.kind
    out = layer.out_shape
    if k == "conv":
        kh, kw = layer.kernel
        return 2 * kh * kw * in_shape[0] * out[0] * out[1] * out[2]
    if k == "dense":
        return 2 * in_shape[0] * out[0]
    if k in ("bn", "relu", "tanh", "pool", "softmax"):
        return int(np.prod(out))
    return 0


def count_flops(spec):
    """FLOPs of a single inference through one NetworkSpec."""
    total = 0
    shape = spec.input_shape
    for layer in spec.layers:
        total += layer_flops(layer, shape)
        shape = layer.out_shape
    return total


# Which specs make up each named architecture (spec name, multiplicity).
def composition(arch, profile=PAPER, path=None):
    H = head_specs(profile)
    F = {k: feature_spec(k, profile) for k in FEATURE_NETS}
    main_gate = [(F["camera_gating_feature"], 3), (F["lidar_gating_feature"], 1),
                 (H["main_gate_head"], 1), (_softmax_spec(4), 1)]
    lidar_gate = [(F["lidar_gating_feature"], 1), (H["lidar_gate_head"], 1), (_softmax_spec(5), 1)]
    table = {
        "camera_expert": [(F["camera_expert"], 1)],
        "lidar_expert": [(F["lidar_expert"], 1)],
        "lidar_full_expert": [(F["lidar_full_expert"], 1)],
        "lidar_gate": lidar_gate,
        "main_gate": main_gate,
        "step1_net": [(F["lidar_expert"], 5), (H["step1_gate_head"], 1), (_softmax_spec(5), 1),
                      (H["step1_head"], 1)],
        "lidar_with_gating": lidar_gate + [(F["lidar_expert"], 1), (H["lidar_head"], 1)],
        "foursensor_net": [(F["camera_expert"], 3), (F["lidar_full_expert"], 1),
                           (H["foursensor_gate_head"], 1), (_softmax_spec(4), 1),
                           (H["foursensor_head"], 1)],
        "baseline_concat": [(F["camera_expert"], 3), (F["lidar_full_expert"], 1), (H["baseline_head"], 1)],
        "lidar_only": [(F["lidar_full_expert"], 1), (H["lidar_only_head"], 1)],
        "single_camera": [(F["camera_expert"], 1), (H["camera_only_head"], 1)],
        "three_cameras": [(F["camera_expert"], 3),
                          (head_spec("camera_only_head", 3 * F["camera_expert"].out_features, 1, "tanh",
                                     profile.channel_div), 1)],
    }
    if arch == "final_net":
        if path == "lidar":
            return main_gate + lidar_gate + [(F["lidar_expert"], 1), (H["final_head"], 1)]
        if path == "camera":
            return main_gate + [(F["camera_expert"], 1), (H["final_head"], 1)]
        raise ValueError("final_net needs path='lidar' or path='camera'")
    if arch not in table:
        raise KeyError(f"unknown architecture {arch!r}")
    return table[arch]


def _softmax_spec(n):
    return resolve("softmax", (n,), [LayerSpec("softmax", "softmax")])


def count_arch_flops(arch, profile=PAPER, path=None):
    return sum(count_flops(s) * m for s, m in composition(arch, profile, path))


ARCH_NAMES = ("camera_expert", "lidar_expert", "lidar_full_expert", "lidar_gate", "main_gate",
              "step1_net", "lidar_with_gating", "foursensor_net", "final_net", "baseline_concat")
