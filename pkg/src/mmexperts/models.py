"""Forward composition of every network role.

All roles share one ``ParamStore``; parameter names are prefixed by role
(``step1.seg0.conv1.weight``, ``main_gate.head.fc1.bias`` ...). Inputs are
numpy arrays in (N, C, H, W) layout as stored in datasets; they are moved to
channels-last right before the convolution stacks.
"""

from __future__ import annotations

import zlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .objectives import SEGMENT_POSITIONS
from .params import ParamStore
from .specs import FEATURE_NETS, PAPER, dims, feature_spec, head_specs, init_params, run_network
from .tensor import ConfigurationError, Tensor

N_SEGMENTS = 5
CAMERA_IDS = (0, 1, 2)  # left, center, right
LIDAR_ID = 3
SENSOR_NAMES = ("camera_left", "camera_center", "camera_right", "lidar")


def role_layout(role):
    """(network kind, parameter prefix) pairs making up a role."""
    if role == "step1":
        return ([("lidar_expert", f"step1.seg{k}") for k in range(N_SEGMENTS)]
                + [("step1_gate_head", "step1.gate"), ("step1_head", "step1.head")])
    if role == "lidar_gate":
        return [("lidar_gating_feature", "lidar_gate.feat"), ("lidar_gate_head", "lidar_gate.head")]
    if role == "lidar_branch":
        return [("lidar_expert", "lidar_branch.expert"), ("lidar_head", "lidar_branch.head")]
    if role.startswith("four") and role[4:].isdigit():
        return ([("camera_expert", f"{role}.cam{i}") for i in CAMERA_IDS]
                + [("lidar_full_expert", f"{role}.lidar"), ("foursensor_gate_head", f"{role}.gate"),
                   ("foursensor_head", f"{role}.head")])
    if role == "main_gate":
        return ([("camera_gating_feature", f"main_gate.cam{i}") for i in CAMERA_IDS]
                + [("lidar_gating_feature", "main_gate.lidar"), ("main_gate_head", "main_gate.head")])
    if role == "final":
        return ([("camera_expert", f"final.cam{i}") for i in CAMERA_IDS]
                + [("lidar_expert", "final.lidar"), ("final_head", "final.head")])
    if role == "baseline":
        return ([("camera_expert", f"baseline.cam{i}") for i in CAMERA_IDS]
                + [("lidar_full_expert", "baseline.lidar"), ("baseline_head", "baseline.head")])
    raise KeyError(f"unknown role {role!r}")


@dataclass
class Ctx:
    """Execution flags for one forward pass."""

    train: bool = False
    leaves: dict | None = None
    batch_stats: bool = True


EVAL = Ctx()


@dataclass
class Bundle:
    profile: object = PAPER
    store: ParamStore = field(default_factory=ParamStore)
    seed: int = 0
    # frames routed through each expert by forward_final (instrumentation)
    expert_calls: Counter = field(default_factory=Counter)

    def __post_init__(self):
        self.features = {k: feature_spec(k, self.profile) for k in FEATURE_NETS}
        self.heads = head_specs(self.profile)
        self.dims = dims(self.profile)

    def spec(self, kind):
        return self.features[kind] if kind in self.features else self.heads[kind]

    def has(self, role):
        return all(any(n.startswith(p + ".") for n in self.store.params) for _, p in role_layout(role))

    def ensure(self, role):
        """Initialise a role's parameters if absent (seeded by role name)."""
        for kind, prefix in role_layout(role):
            if self.store.names(prefix + "."):
                continue
            rng = np.random.default_rng([self.seed, zlib.crc32(prefix.encode())])
            init_params(self.spec(kind), self.store, prefix, rng)
        return self

    def run(self, kind, prefix, x, ctx=EVAL):
        return run_network(self.spec(kind), self.store, prefix, x, ctx.train, ctx.leaves, ctx.batch_stats)

    def copy_subnet(self, src_prefix, dst_prefix):
        for n in self.store.names(dst_prefix + "."):
            del self.store.params[n]
        self.store.merge(self.store, src_prefix + ".", dst_prefix + ".")

    def check_input(self, name, arr, expected):
        if tuple(arr.shape[1:]) != tuple(expected):
            raise ConfigurationError(f"{name}: expected per-frame shape {tuple(expected)}, "
                                     f"got {tuple(arr.shape[1:])}")


def nhwc(a):
    """(N, C, H, W) numpy array -> channels-last float32 Tensor."""
    return Tensor(np.ascontiguousarray(np.asarray(a, dtype=np.float32).transpose(0, 2, 3, 1)))


def segment_offsets(width, crop):
    """Start columns of the five half-overlapping segments."""
    return [int(round(k * (width - crop) / (N_SEGMENTS - 1))) for k in range(N_SEGMENTS)]


def lidar_crop_window(g_l, width=450, crop=None):
    """Start column and width of the 60 degree window centred at 60 * g_L degrees.

    ``g_l`` may be scalar or an array; values are clamped to [-1, 1] and the
    start to [0, width - crop]. Rounding is half-up.
    """
    crop = round(width / 3) if crop is None else crop
    g = np.clip(np.asarray(g_l, dtype=np.float64), -1.0, 1.0)
    left_deg = 60.0 * g - 30.0 + 90.0
    start = np.floor(left_deg * width / 180.0 + 0.5).astype(np.int64)
    start = np.clip(start, 0, width - crop)
    return (int(start), crop) if start.ndim == 0 else (start, crop)


def _pad_cols(t, n):
    extra = n - t.shape[1]
    if extra == 0:
        return t
    return T.concat([t, Tensor(np.zeros((t.shape[0], extra), dtype=t.dtype))], axis=1)


def _scaled_blocks(feats, gate):
    return T.concat([T.mul(f, gate[:, k:k + 1]) for k, f in enumerate(feats)], axis=1)


def _squeeze(pred):
    return T.reshape(pred, (pred.shape[0],))


# -- step 1.1 -----------------------------------------------------------------

def forward_step1_net(b: Bundle, x4, ctx=EVAL):
    """Five segment experts, softmax gate over their features, gate-scaled head."""
    b.check_input("x4", x4, b.profile.lidar_shape)
    crop = b.profile.crop_width
    feats = [b.run("lidar_expert", f"step1.seg{k}", nhwc(x4[..., s:s + crop]), ctx)
             for k, s in enumerate(segment_offsets(x4.shape[-1], crop))]
    cat = T.concat(feats, axis=1)
    logits = b.run("step1_gate_head", "step1.gate", cat, ctx)
    gate = T.softmax(logits, axis=1)
    pred = b.run("step1_head", "step1.head", _scaled_blocks(feats, gate), ctx)
    return {"pred": _squeeze(pred), "gate": gate, "logits": logits}


# -- LiDAR gating network and step 1.3 ----------------------------------------

def lidar_gate(b: Bundle, x4, ctx=EVAL):
    """G^L: 5 logits, their softmax and the scalar g_L = sum softmax_i r_i."""
    f = b.run("lidar_gating_feature", "lidar_gate.feat", nhwc(x4), ctx)
    logits = b.run("lidar_gate_head", "lidar_gate.head", f, ctx)
    probs = T.softmax(logits, axis=1)
    r = Tensor(SEGMENT_POSITIONS.reshape(1, -1).astype(probs.dtype))
    g_l = T.reshape(T.dense(probs, r), (probs.shape[0],))
    return {"logits": logits, "probs": probs, "g_l": g_l}


def _lidar_branch(b, x4, expert_prefix, ctx):
    """Crop by G^L, run the cropped expert; returns (features ++ g_L, gate outputs)."""
    g = lidar_gate(b, x4, ctx)
    g_l = g["g_l"].data
    starts, crop = lidar_crop_window(g_l, x4.shape[-1], b.profile.crop_width)
    cropped = np.stack([x4[i, ..., s:s + crop] for i, s in enumerate(starts)]) if len(x4) else x4[..., :crop]
    feat = b.run("lidar_expert", expert_prefix, nhwc(cropped), ctx)
    return T.concat([feat, T.reshape(g["g_l"], (-1, 1))], axis=1), g


def forward_lidar_with_gating(b: Bundle, x4, ctx=EVAL):
    b.check_input("x4", x4, b.profile.lidar_shape)
    v, g = _lidar_branch(b, x4, "lidar_branch.expert", ctx)
    pred = b.run("lidar_head", "lidar_branch.head", v, ctx)
    return {"pred": _squeeze(pred), "g_l": g["g_l"], "head_input": v}


# -- step 2.1 -----------------------------------------------------------------

def forward_4sensor_net(b: Bundle, case, x1, x2, x3, x4, ctx=EVAL):
    """Four full experts; their features feed both the gate and the scaled head.

    Inputs are expected to already carry the scenario mask.
    """
    role = f"four{case}"
    feats = [b.run("camera_expert", f"{role}.cam{i}", nhwc(x), ctx) for i, x in enumerate((x1, x2, x3))]
    feats.append(b.run("lidar_full_expert", f"{role}.lidar", nhwc(x4), ctx))
    cat = T.concat(feats, axis=1)
    logits = b.run("foursensor_gate_head", f"{role}.gate", cat, ctx)
    gate = T.softmax(logits, axis=1)
    pred = b.run("foursensor_head", f"{role}.head", _scaled_blocks(feats, gate), ctx)
    return {"pred": _squeeze(pred), "gate": gate, "logits": logits}


# -- main gating network and the final network ---------------------------------

def main_gate(b: Bundle, x1, x2, x3, x4, ctx=EVAL):
    feats = [b.run("camera_gating_feature", f"main_gate.cam{i}", nhwc(x), ctx)
             for i, x in enumerate((x1, x2, x3))]
    feats.append(b.run("lidar_gating_feature", "main_gate.lidar", nhwc(x4), ctx))
    logits = b.run("main_gate_head", "main_gate.head", T.concat(feats, axis=1), ctx)
    return {"logits": logits, "probs": T.softmax(logits, axis=1)}


def hard_select(probs):
    """Argmax per row, lowest index on ties."""
    return np.argmax(np.asarray(probs), axis=1)


def _branch(b, j, xs, rows, ctx):
    """Branch vector v_j (zero padded to the common length) for ``rows``."""
    L = b.dims.branch
    if j == LIDAR_ID:
        v, g = _lidar_branch(b, xs[3][rows], "final.lidar", ctx)
        return _pad_cols(v, L), g["g_l"].data
    v = b.run("camera_expert", f"final.cam{j}", nhwc(xs[j][rows]), ctx)
    return _pad_cols(v, L), None


def forward_final(b: Bundle, x1, x2, x3, x4, ctx=EVAL, soft=False):
    """Multi-modal experts network.

    Hard mode (default): G^M picks one sensor per frame and only that
    expert runs on the frame. Soft mode runs every expert and mixes the
    branch vectors with the gate probabilities (end-to-end ablation).
    """
    xs = (x1, x2, x3, x4)
    for i, x in enumerate(xs):
        exp = b.profile.lidar_shape if i == LIDAR_ID else b.profile.camera_shape
        b.check_input(f"x{i + 1}", x, exp)
    n = len(x4)
    gm = main_gate(b, *xs, ctx)
    probs = gm["probs"]
    sel = hard_select(probs.data)
    g_l = np.full(n, np.nan, dtype=np.float32)
    if soft:
        mixed = None
        for j in range(4):
            rows = np.arange(n)
            v, gl = _branch(b, j, xs, rows, ctx)
            b.expert_calls[SENSOR_NAMES[j]] += n
            if gl is not None:
                g_l[:] = gl
            term = T.mul(v, probs[:, j:j + 1])
            mixed = term if mixed is None else mixed + term
        head_in = T.concat([mixed, probs], axis=1)
    else:
        parts, groups = [], []
        for j in range(4):
            rows = np.flatnonzero(sel == j)
            if len(rows) == 0:
                continue
            v, gl = _branch(b, j, xs, rows, ctx)
            b.expert_calls[SENSOR_NAMES[j]] += len(rows)
            if gl is not None:
                g_l[rows] = gl
            parts.append(v)
            groups.append(rows)
        onehot = np.zeros((n, 4), dtype=np.float32)
        onehot[np.arange(n), sel] = 1.0
        head_in = T.concat([T.scatter_rows(parts, groups, n), Tensor(onehot)], axis=1)
    pred = b.run("final_head", "final.head", head_in, ctx)
    return {"pred": _squeeze(pred), "gm": probs, "gm_logits": gm["logits"], "selected": sel,
            "g_l": g_l, "head_input": head_in}


# -- concatenation baseline -----------------------------------------------------

def forward_baseline(b: Bundle, x1, x2, x3, x4, ctx=EVAL):
    feats = [b.run("camera_expert", f"baseline.cam{i}", nhwc(x), ctx) for i, x in enumerate((x1, x2, x3))]
    feats.append(b.run("lidar_full_expert", "baseline.lidar", nhwc(x4), ctx))
    pred = b.run("baseline_head", "baseline.head", T.concat(feats, axis=1), ctx)
    return {"pred": _squeeze(pred)}
