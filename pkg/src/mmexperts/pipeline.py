"""Multi-stage training: LiDAR segment gating (1.1-1.3), four-sensor gating
per scenario (2.1-2.2), frozen-gate fine-tuning (3), plus both ablations."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import models as M
from . import objectives as O
from . import tensor as T
from .dataset import Dataset, generate_dataset, load_dataset
from .models import Bundle, Ctx
from .params import ParamStore, adam_step, collect_grads, load_checkpoint, save_checkpoint
from .simworld import PAPER_RIG, TINY_RIG, GenConfig, WorldSpec, random_segments, steering_bins
from .specs import PROFILES
from .tensor import NumericError, no_grad

CASES = (1, 2, 3, 4, 5)
DEFAULT_LR = {"1.1": 1e-3, "1.2": 1e-3, "1.3": 1e-3, "2.1": 1e-4, "2.2": 1e-3, "3": 1e-4,
              "e2e_ablation": 1e-4, "loss_ablation": 1e-3}
BIN_EDGES = ("[-1,-0.67)", "[-0.67,-0.33)", "[-0.33,0)", "{0}", "(0,0.33]", "(0.33,0.67]", "(0.67,1]")


class StageError(RuntimeError):
    def __init__(self, stage, msg):
        super().__init__(f"stage {stage}: {msg}")
        self.stage = stage


# -- configuration --------------------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    stage: str
    lr: float | None = None
    batch_size: int = 16
    epochs: int = 1
    per_bin: int = 32  # draws per steering bin per epoch
    weights: O.LossWeights = O.LossWeights()
    distill: O.DistillConfig | None = None
    seed: int = 0
    allow_empty_bins: bool = False  # skip empty steering bins instead of failing

    @property
    def learning_rate(self):
        return DEFAULT_LR[self.stage] if self.lr is None else self.lr


def default_stages(seed=0):
    """Desk-scale budgets (about 10 minutes for the whole run on one core)."""
    return {
        "1.1": StageConfig("1.1", epochs=6, per_bin=40, weights=O.STAGE_1_1_WEIGHTS, seed=seed + 11),
        "1.2": StageConfig("1.2", batch_size=32, epochs=30, per_bin=64, distill=O.LIDAR_GATE_DISTILL,
                           seed=seed + 12),
        "1.3": StageConfig("1.3", epochs=40, per_bin=40, seed=seed + 13),
        "2.1": StageConfig("2.1", epochs=10, per_bin=24, weights=O.STAGE_2_1_WEIGHTS, seed=seed + 21),
        "2.2": StageConfig("2.2", batch_size=32, epochs=20, per_bin=64, distill=O.MAIN_GATE_DISTILL,
                           seed=seed + 22),
        "3": StageConfig("3", epochs=30, per_bin=40, seed=seed + 3),
        # from-scratch end-to-end training uses the from-scratch learning rate of step 1.1
        "e2e_ablation": StageConfig("e2e_ablation", lr=1e-3, epochs=4, per_bin=40, seed=seed + 91),
    }


@dataclass(frozen=True)
class WorldConfig:
    width_m: float = 2.0
    turns: int = 14
    radii: tuple = (1.6, 2.5, 4.0)
    left_fraction: float = 0.5
    seed: int = 0

    def spec(self):
        segs = random_segments(self.turns, self.seed, self.radii, self.left_fraction)
        return WorldSpec(width_m=self.width_m, segments=segs, seed=self.seed)


@dataclass(frozen=True)
class PipelineConfig:
    profile: str = "paper"
    seed: int = 0
    train_frames: int = 1600
    test_frames: int = 400
    train_world: WorldConfig = WorldConfig(seed=101)
    test_world: WorldConfig = WorldConfig(seed=202)
    gen: GenConfig = GenConfig()
    stages: dict = field(default_factory=default_stages)
    loss_ablation: bool = False

    def stage(self, sid):
        cfg = self.stages[sid]
        if self.loss_ablation and sid in ("1.1", "2.1"):
            cfg = replace(cfg, weights=O.LossWeights(0.0, 0.0))
        return cfg

    def rig(self):
        return PAPER_RIG if self.profile == "paper" else TINY_RIG

    def to_dict(self):
        d = asdict(self)
        d["stages"] = {k: asdict(v) for k, v in self.stages.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kw = {}
        for k in ("profile", "seed", "train_frames", "test_frames", "loss_ablation"):
            if k in d:
                kw[k] = d.pop(k)
        for k in ("train_world", "test_world"):
            if k in d:
                w = dict(d.pop(k))
                if "radii" in w:
                    w["radii"] = tuple(w["radii"])
                kw[k] = WorldConfig(**w)
        if "gen" in d:
            kw["gen"] = GenConfig(**d.pop("gen"))
        stages = default_stages(kw.get("seed", 0))
        for sid, s in d.pop("stages", {}).items():
            s = dict(s)
            if "weights" in s and s["weights"] is not None:
                s["weights"] = O.LossWeights(**s["weights"])
            if "distill" in s and s["distill"] is not None:
                s["distill"] = O.DistillConfig(**s["distill"])
            stages[sid] = replace(stages.get(sid, StageConfig(sid)), **s)
        kw["stages"] = stages
        if d:
            raise ValueError(f"unknown pipeline config keys {sorted(d)}")
        return cls(**kw)


# -- scenarios --------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    case: int
    cameras: tuple = (True, True, True)
    lidar: bool = True
    lidar_third: int | None = None  # 0 left, 1 center, 2 right

    def __post_init__(self):
        if self.case == 1:
            ok = self.lidar and sum(not c for c in self.cameras) <= 1 and self.lidar_third is None
        elif self.case == 2:
            ok = not self.lidar and all(self.cameras) and self.lidar_third is None
        elif self.case in (3, 4, 5):
            ok = self.lidar and all(self.cameras) and self.lidar_third == self.case - 3
        else:
            ok = False
        if not ok:
            raise ValueError(f"inconsistent scenario {self}")


def scenario_for(case, choice=0):
    """Case 1 takes ``choice`` in 0..3: 0 = nothing off, k = camera k off."""
    if case == 1:
        cams = tuple(choice != k + 1 for k in range(3))
        return Scenario(1, cams)
    if case == 2:
        return Scenario(2, lidar=False)
    return Scenario(case, lidar_third=case - 3)


def draw_scenario(case, rng):
    return scenario_for(case, int(rng.integers(4)) if case == 1 else 0)


def eval_scenario(case, index, seed=0):
    """Fixed per-frame scenario so test metrics and labels are reproducible."""
    if case != 1:
        return scenario_for(case)
    return scenario_for(1, int(np.random.default_rng([seed, int(index)]).integers(4)))


def third_bounds(width):
    b = [int(round(k * width / 3)) for k in range(4)]
    return list(zip(b[:-1], b[1:]))


def apply_scenario(frame, scenario):
    """Zero the disabled sensors of one frame or a batch (same mask for all)."""
    x1, x2, x3, x4 = frame[:4]
    cams = [x if on else np.zeros_like(x) for x, on in zip((x1, x2, x3), scenario.cameras)]
    if not scenario.lidar:
        x4 = np.zeros_like(x4)
    elif scenario.lidar_third is not None:
        lo, hi = third_bounds(x4.shape[-1])[scenario.lidar_third]
        x4 = x4.copy()
        x4[..., lo:hi] = 0.0
    return (*cams, x4) + tuple(frame[4:])


def apply_scenarios(batch, scenarios):
    """Per-frame masks for a batch (x1, x2, x3, x4[, y])."""
    x1, x2, x3, x4 = (np.array(a, dtype=np.float32, copy=True) for a in batch[:4])
    bounds = third_bounds(x4.shape[-1])
    for i, sc in enumerate(scenarios):
        for k, (x, on) in enumerate(zip((x1, x2, x3), sc.cameras)):
            if not on:
                x[i] = 0.0
        if not sc.lidar:
            x4[i] = 0.0
        elif sc.lidar_third is not None:
            lo, hi = bounds[sc.lidar_third]
            x4[i, ..., lo:hi] = 0.0
    return (x1, x2, x3, x4) + tuple(batch[4:])


# -- balanced sampling ----------------------------------------------------------

def bin_histogram(y):
    return np.bincount(steering_bins(y), minlength=7)


def balanced_epoch_sample(bins, per_bin, seed, allow_empty=False):
    """``per_bin`` draws from each of the 7 steering bins, sorted by bin.

    Draws are without replacement when a bin is big enough, with
    replacement otherwise. ``seed`` may be an int or a Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bins = np.asarray(bins)
    out = []
    for k in range(7):
        members = np.flatnonzero(bins == k)
        if len(members) == 0:
            if allow_empty:
                continue
            raise ValueError(f"steering bin {k + 1} {BIN_EDGES[k]} is empty")
        out.append(rng.choice(members, per_bin, replace=len(members) < per_bin))
    return np.concatenate(out)


def epoch_batches(bins, cfg: StageConfig, rng):
    """Shuffled balanced epochs cut into batches; each batch sorted by index."""
    for _ in range(cfg.epochs):
        idx = balanced_epoch_sample(bins, cfg.per_bin, rng, cfg.allow_empty_bins)
        idx = idx[rng.permutation(len(idx))]
        for s in range(0, len(idx) - 1, cfg.batch_size):
            chunk = np.sort(idx[s:s + cfg.batch_size])
            if len(chunk) >= 2:
                yield chunk


# -- label files ----------------------------------------------------------------

LABEL_MAGIC = b"MMEL"


def save_labels(path, labels):
    labels = np.ascontiguousarray(labels, dtype="<f4")
    if labels.ndim != 2:
        raise ValueError("labels must be a (rows, arity) table")
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC + struct.pack("<QI", labels.shape[0], labels.shape[1]))
        f.write(labels.tobytes())


def load_labels(path):
    raw = Path(path).read_bytes()
    if raw[:4] != LABEL_MAGIC or len(raw) < 16:
        raise ValueError(f"{path}: not an MMEL label file")
    n, k = struct.unpack_from("<QI", raw, 4)
    if len(raw) != 16 + 4 * n * k:
        raise ValueError(f"{path}: size does not match {n} x {k} labels")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(n, k).astype(np.float32)


# -- training helpers -------------------------------------------------------------

def _step(b: Bundle, loss_fn, lr, stage):
    leaves = {}
    loss = loss_fn(leaves)
    val = float(loss.data)
    if not np.isfinite(val):
        raise NumericError(f"stage {stage}: loss is {val}")
    loss.backward()
    adam_step(b.store, collect_grads(b.store, leaves), lr)
    return val


def _predict(fn, n, batch=64):
    """Concatenate numpy outputs of ``fn(index_array)`` over 0..n-1."""
    outs = []
    with no_grad():
        for s in range(0, n, batch):
            outs.append(fn(np.arange(s, min(n, s + batch))))
    if not outs:
        return {}
    return {k: np.concatenate([o[k] for o in outs]) for k in outs[0]}


def _check_frozen(b, prefixes, before, stage):
    for p in prefixes:
        if b.store.digest(p + ".") != before[p]:
            raise StageError(stage, f"frozen subnetwork {p} changed")


def substore(store, prefixes):
    out = ParamStore()
    for p in prefixes:
        out.merge(store, p + ".", p + ".")
    return out


def _mse(pred, y):
    return float(np.mean((np.asarray(pred, np.float64) - np.asarray(y, np.float64)) ** 2)) if len(y) else 0.0


# -- step 1 -----------------------------------------------------------------------

def train_stage_1_1(b: Bundle, data: Dataset, cfg: StageConfig, log=None):
    b.ensure("step1")
    rng = np.random.default_rng(cfg.seed)
    bins = steering_bins(np.asarray(data.y))
    losses = []
    for idx in epoch_batches(bins, cfg, rng):
        x4 = np.asarray(data.x4[idx], np.float32)
        y = np.asarray(data.y[idx], np.float32)

        def loss_fn(leaves):
            o = M.forward_step1_net(b, x4, Ctx(True, leaves))
            return O.combined_loss(y, o["pred"], o["gate"], cfg.weights)

        losses.append(_step(b, loss_fn, cfg.learning_rate, "1.1"))
    return {"loss_first": losses[0], "loss_last": float(np.mean(losses[-10:])), "steps": len(losses)}


def step1_outputs(b: Bundle, data: Dataset):
    """Teacher logits, gate and prediction of the step-1.1 net for every frame."""
    def fn(idx):
        o = M.forward_step1_net(b, np.asarray(data.x4[idx], np.float32))
        return {"logits": o["logits"].data, "gate": o["gate"].data, "pred": o["pred"].data}
    return _predict(fn, len(data))


def distill_1_2(b: Bundle, data: Dataset, teacher_logits, cfg: StageConfig):
    b.ensure("lidar_gate")
    b.store.unfreeze("lidar_gate.")
    rng = np.random.default_rng(cfg.seed)
    bins = steering_bins(np.asarray(data.y))
    dc = cfg.distill
    scalar = O.scalar_gate_label(O.softmax_np(teacher_logits))
    losses = []
    for idx in epoch_batches(bins, cfg, rng):
        x4 = np.asarray(data.x4[idx], np.float32)

        def loss_fn(leaves):
            g = M.lidar_gate(b, x4, Ctx(True, leaves))
            return O.distill_loss(g["logits"], teacher_logits[idx], dc, scalar[idx])

        losses.append(_step(b, loss_fn, cfg.learning_rate, "1.2"))
    b.store.freeze("lidar_gate.")
    return {"loss_first": losses[0], "loss_last": float(np.mean(losses[-10:])), "steps": len(losses)}


def lidar_gate_outputs(b: Bundle, data: Dataset):
    def fn(idx):
        g = M.lidar_gate(b, np.asarray(data.x4[idx], np.float32))
        return {"g_l": g["g_l"].data, "probs": g["probs"].data}
    return _predict(fn, len(data))


def eval_lidar_gate(b, data, teacher_logits, confident=0.6):
    gl = lidar_gate_outputs(b, data)["g_l"]
    tp = O.softmax_np(teacher_logits)
    tl = O.scalar_gate_label(tp)
    err = np.abs(gl - tl)
    conf = tp.max(axis=1) >= confident
    return {"mean_abs_err": float(err.mean()) if len(err) else 0.0,
            "mean_abs_err_confident": float(err[conf].mean()) if conf.any() else float("nan"),
            "confident_frames": int(conf.sum())}


def train_stage_1_3(b: Bundle, data: Dataset, cfg: StageConfig, warm_start=2):
    """LiDAR-with-gating: frozen G^L chooses the crop, expert + head train.

    The expert starts from segment expert ``warm_start`` of step 1.1 when
    present (centre by default).
    """
    if not b.has("lidar_gate"):
        raise StageError("1.3", "LiDAR gating network missing")
    b.store.freeze("lidar_gate.")
    if not b.store.names("lidar_branch.expert.") and b.has("step1"):
        b.copy_subnet(f"step1.seg{warm_start}", "lidar_branch.expert")
    b.ensure("lidar_branch")
    before = {"lidar_gate": b.store.digest("lidar_gate.")}
    rng = np.random.default_rng(cfg.seed)
    bins = steering_bins(np.asarray(data.y))
    losses = []
    for idx in epoch_batches(bins, cfg, rng):
        x4 = np.asarray(data.x4[idx], np.float32)
        y = np.asarray(data.y[idx], np.float32)

        def loss_fn(leaves):
            return O.prediction_loss(y, M.forward_lidar_with_gating(b, x4, Ctx(True, leaves))["pred"])

        losses.append(_step(b, loss_fn, cfg.learning_rate, "1.3"))
    _check_frozen(b, ["lidar_gate"], before, "1.3")
    return {"loss_first": losses[0], "loss_last": float(np.mean(losses[-10:])), "steps": len(losses),
            "gate_digest": before["lidar_gate"]}


def eval_lidar_with_gating(b, data):
    def fn(idx):
        o = M.forward_lidar_with_gating(b, np.asarray(data.x4[idx], np.float32))
        return {"pred": o["pred"].data, "g_l": o["g_l"].data}
    out = _predict(fn, len(data))
    return {"mse": _mse(out.get("pred", []), np.asarray(data.y)), **out}


# -- step 2 -----------------------------------------------------------------------

def train_stage_2_1(b: Bundle, data: Dataset, cfg: StageConfig, cases=CASES):
    reports = {}
    bins = steering_bins(np.asarray(data.y))
    for case in cases:
        role = f"four{case}"
        b.ensure(role)
        rng = np.random.default_rng([cfg.seed, case])
        losses = []
        for idx in epoch_batches(bins, cfg, rng):
            scen = [draw_scenario(case, rng) for _ in idx]
            x1, x2, x3, x4, y = apply_scenarios(data.batch(idx), scen)

            def loss_fn(leaves):
                o = M.forward_4sensor_net(b, case, x1, x2, x3, x4, Ctx(True, leaves))
                return O.combined_loss(y, o["pred"], o["gate"], cfg.weights)

            losses.append(_step(b, loss_fn, cfg.learning_rate, "2.1"))
        reports[case] = {"loss_first": losses[0], "loss_last": float(np.mean(losses[-10:])),
                         "steps": len(losses)}
    return reports


def masked_batch(data, idx, case, seed=0):
    return apply_scenarios(data.batch(idx), [eval_scenario(case, i, seed) for i in idx])


def foursensor_outputs(b: Bundle, data: Dataset, case, mask_seed=0):
    def fn(idx):
        x1, x2, x3, x4, _ = masked_batch(data, idx, case, mask_seed)
        o = M.forward_4sensor_net(b, case, x1, x2, x3, x4)
        return {"logits": o["logits"].data, "gate": o["gate"].data, "pred": o["pred"].data}
    return _predict(fn, len(data))


def teacher_outputs(b, data, mask_seed=0, cases=CASES):
    return {c: foursensor_outputs(b, data, c, mask_seed) for c in cases}


def teacher_table(outs, cases=CASES):
    """Case-major (5 N, 4) logits of the five stage-2.1 teachers."""
    return np.concatenate([outs[c]["logits"] for c in cases])


def distill_2_2(b: Bundle, data: Dataset, teacher_logits, cfg: StageConfig, mask_seed=0, cases=CASES):
    """Main gating network from the union of the five teachers' labels."""
    b.ensure("main_gate")
    b.store.unfreeze("main_gate.")
    n = len(data)
    rng = np.random.default_rng(cfg.seed)
    bins = steering_bins(np.asarray(data.y))
    onehot = O.onehot_gate_label(teacher_logits)
    losses = []
    for idx in epoch_batches(bins, cfg, rng):
        case_pos = rng.integers(len(cases), size=len(idx))
        order = np.lexsort((idx, case_pos))
        idx, case_pos = idx[order], case_pos[order]
        rows = case_pos * n + idx
        scen = [eval_scenario(cases[c], i, mask_seed) for c, i in zip(case_pos, idx)]
        x1, x2, x3, x4, _ = apply_scenarios(data.batch(idx), scen)

        def loss_fn(leaves):
            g = M.main_gate(b, x1, x2, x3, x4, Ctx(True, leaves))
            return O.distill_loss(g["logits"], teacher_logits[rows], cfg.distill, onehot[rows])

        losses.append(_step(b, loss_fn, cfg.learning_rate, "2.2"))
    b.store.freeze("main_gate.")
    return {"loss_first": losses[0], "loss_last": float(np.mean(losses[-10:])), "steps": len(losses)}


def main_gate_outputs(b, data, case, mask_seed=0):
    def fn(idx):
        g = M.main_gate(b, *masked_batch(data, idx, case, mask_seed)[:4])
        return {"probs": g["probs"].data}
    return _predict(fn, len(data))


def gate_accuracy(b, data, teacher_logits, mask_seed=0, cases=CASES):
    """Per-case % agreement of G^M's argmax with the teacher's argmax."""
    n = len(data)
    acc = {}
    for k, case in enumerate(cases):
        sel = M.hard_select(main_gate_outputs(b, data, case, mask_seed)["probs"])
        ref = M.hard_select(teacher_logits[k * n:(k + 1) * n])
        acc[case] = 100.0 * float(np.mean(sel == ref)) if n else 0.0
    return acc


def lidar_selection_rate(b, data):
    """% of frames on which G^M picks LiDAR with every sensor enabled."""
    def fn(idx):
        return {"probs": M.main_gate(b, *data.batch(idx)[:4])["probs"].data}
    probs = _predict(fn, len(data))["probs"]
    return 100.0 * float(np.mean(M.hard_select(probs) == M.LIDAR_ID))


# -- step 3 -----------------------------------------------------------------------

def init_final(b: Bundle):
    """Camera experts from the LiDAR-disabled case, LiDAR expert from step 1.3."""
    for i in M.CAMERA_IDS:
        b.copy_subnet(f"four2.cam{i}", f"final.cam{i}")
    b.copy_subnet("lidar_branch.expert", "final.lidar")
    b.ensure("final")


def train_stage_3(b: Bundle, data: Dataset, cfg: StageConfig, cases=CASES):
    for role in ("main_gate", "lidar_gate"):
        if not b.has(role):
            raise StageError("3", f"{role} missing")
        b.store.freeze(role + ".")
    if not b.has("final"):
        init_final(b)
    before = {p: b.store.digest(p + ".") for p in ("main_gate", "lidar_gate")}
    init_digest = {f"cam{i}": b.store.digest(f"final.cam{i}.") for i in M.CAMERA_IDS}
    rng = np.random.default_rng(cfg.seed)
    bins = steering_bins(np.asarray(data.y))
    losses = []
    for idx in epoch_batches(bins, cfg, rng):
        scen = [draw_scenario(int(rng.choice(cases)), rng) for _ in idx]
        x1, x2, x3, x4, y = apply_scenarios(data.batch(idx), scen)

        def loss_fn(leaves):
            # hard routing can leave single-frame groups: experts use running BN stats
            o = M.forward_final(b, x1, x2, x3, x4, Ctx(True, leaves, batch_stats=False))
            return O.prediction_loss(y, o["pred"])

        losses.append(_step(b, loss_fn, cfg.learning_rate, "3"))
    _check_frozen(b, list(before), before, "3")
    return {"loss_first": losses[0], "loss_last": float(np.mean(losses[-10:])), "steps": len(losses),
            "gate_digests": before, "camera_init_digests": init_digest}


def final_outputs(b, data, case, mask_seed=0, soft=False):
    def fn(idx):
        o = M.forward_final(b, *masked_batch(data, idx, case, mask_seed)[:4], soft=soft)
        return {"pred": o["pred"].data, "gm": o["gm"].data, "selected": o["selected"], "g_l": o["g_l"]}
    return _predict(fn, len(data))


def final_predictor(b, soft=False):
    def predict(batch):
        o = M.forward_final(b, *batch[:4], soft=soft)
        return {"pred": o["pred"].data, "selected": o["selected"]}
    return predict


def evaluate_cases(predict, data, teacher_logits=None, mask_seed=0, cases=CASES, batch=64):
    """Rows (case, mse, gate_acc, n_frames) per case plus a frame-weighted "avg" row.

    ``predict`` maps a masked batch (x1, x2, x3, x4, y) to a dict with
    "pred" and optionally "selected". Gate accuracy is NaN without teacher
    labels (case-major table) or a "selected" output.
    """
    n = len(data)
    y = np.asarray(data.y)
    rows = []
    for k, case in enumerate(cases):
        preds, sels = [], []
        with no_grad():
            for s in range(0, n, batch):
                o = predict(masked_batch(data, np.arange(s, min(n, s + batch)), case, mask_seed))
                preds.append(np.asarray(o["pred"]))
                if "selected" in o:
                    sels.append(np.asarray(o["selected"]))
        pred = np.concatenate(preds) if preds else np.zeros(0)
        acc = float("nan")
        if teacher_logits is not None and sels and n:
            ref = M.hard_select(teacher_logits[k * n:(k + 1) * n])
            acc = 100.0 * float(np.mean(np.concatenate(sels) == ref))
        rows.append({"case": str(case), "mse": _mse(pred, y), "gate_acc": acc, "n_frames": n})
    tot = sum(r["n_frames"] for r in rows)
    wmean = (lambda key: float(sum(r[key] * r["n_frames"] for r in rows) / tot)) if tot else (lambda key: 0.0)
    rows.append({"case": "avg", "mse": wmean("mse"), "gate_acc": wmean("gate_acc"), "n_frames": tot})
    return rows


def evaluate_final(b, data, teacher_logits=None, mask_seed=0, cases=CASES, soft=False):
    return evaluate_cases(final_predictor(b, soft), data, teacher_logits, mask_seed, cases)


# -- ablations ----------------------------------------------------------------------

def run_e2e_ablation(b: Bundle, data: Dataset, test: Dataset, cfg: StageConfig, teacher_test_logits,
                     cases=CASES, mask_seed=0):
    """Train gates + experts + head from scratch in one go (soft main gate).

    ``b`` should be a fresh bundle; evaluation uses the hard gate.
    """
    for role in ("main_gate", "lidar_gate", "final"):
        b.ensure(role)
        b.store.unfreeze(role + ".")
    rng = np.random.default_rng(cfg.seed)
    bins = steering_bins(np.asarray(data.y))
    losses = []
    for idx in epoch_batches(bins, cfg, rng):
        scen = [draw_scenario(int(rng.choice(cases)), rng) for _ in idx]
        x1, x2, x3, x4, y = apply_scenarios(data.batch(idx), scen)

        def loss_fn(leaves):
            o = M.forward_final(b, x1, x2, x3, x4, Ctx(True, leaves), soft=True)
            return O.prediction_loss(y, o["pred"])

        losses.append(_step(b, loss_fn, cfg.learning_rate, "e2e_ablation"))
    rows = evaluate_final(b, test, teacher_test_logits, mask_seed, cases)
    return {"steps": len(losses), "loss_last": float(np.mean(losses[-10:])), "rows": rows}


def mean_max_gate(probs):
    return float(np.mean(np.max(probs, axis=1))) if len(probs) else float("nan")


# -- full run -------------------------------------------------------------------------

STAGE_FILES = {"1.1": "stage1_1.mmen", "1.2": "stage1_2.mmen", "1.3": "stage1_3.mmen",
               "2.1": "stage2_1.mmen", "2.2": "stage2_2.mmen", "3": "stage3.mmen"}
STAGE_ROLES = {"1.1": ["step1"], "1.2": ["lidar_gate"], "1.3": ["lidar_gate", "lidar_branch"],
               "2.1": [f"four{c}" for c in CASES], "2.2": ["main_gate"],
               "3": ["main_gate", "lidar_gate", "final"]}


def prefixes(roles):
    return [p for r in roles for _, p in M.role_layout(r)]


def save_stage(b, sid, path):
    save_checkpoint(substore(b.store, prefixes(STAGE_ROLES[sid])), path)


def load_into(b, path, frozen_roles=()):
    st = load_checkpoint(path)
    b.store.merge(st)
    for r in frozen_roles:
        b.store.freeze(r + ".")


def make_datasets(cfg: PipelineConfig, out: Path, log=print):
    out.mkdir(parents=True, exist_ok=True)
    rig = cfg.rig()
    paths = {}
    hists = {}
    for split, frames, world, seed in (("train", cfg.train_frames, cfg.train_world, cfg.seed),
                                       ("test", cfg.test_frames, cfg.test_world, cfg.seed + 1)):
        path = out / f"{split}.mmed"
        gen = replace(cfg.gen, frames=frames, seed=seed)
        t0 = time.perf_counter()
        _, hist = generate_dataset(world.spec(), path, gen, rig)
        log(f"[data] {split}: {frames} frames in {time.perf_counter() - t0:.1f}s, bins {hist.tolist()}")
        paths[split] = path
        hists[split] = hist.tolist()
    return paths, hists


def write_metrics_csv(path, rows):
    with open(path, "w") as f:
        f.write("case,mse,gate_acc,n_frames\n")
        for r in rows:
            f.write(f"{r['case']},{r['mse']:.6f},{r['gate_acc']:.2f},{r['n_frames']}\n")


def run_pipeline(cfg: PipelineConfig, out, log=print, data_paths=None):
    """gen-data, stages 1.1 ... 3, evaluation. Returns the report dict.

    Every stage writes its checkpoint; teacher labels go to MMEL files.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"config": cfg.to_dict(), "stages": {}, "files": []}
    timings = {}
    t_all = time.perf_counter()
    if data_paths is None:
        data_paths, hists = make_datasets(cfg, out, log)
        report["histograms"] = hists
    train = load_dataset(data_paths["train"])
    test = load_dataset(data_paths["test"])
    profile = PROFILES[cfg.profile]
    b = Bundle(profile, seed=cfg.seed)
    mseed = cfg.seed

    def stage(sid, fn):
        t0 = time.perf_counter()
        try:
            res = fn()
        except NumericError:
            raise
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - rewrap with the stage id
            raise StageError(sid, f"{type(exc).__name__}: {exc}") from exc
        timings[sid] = time.perf_counter() - t0
        if sid in STAGE_FILES:
            p = out / STAGE_FILES[sid]
            save_stage(b, sid, p)
            report["files"].append(p.name)
        report["stages"][sid] = res
        log(f"[stage {sid}] {timings[sid]:.1f}s {_brief(res)}")
        return res

    # step 1
    stage("1.1", lambda: train_stage_1_1(b, train, cfg.stage("1.1")))
    s1_train = step1_outputs(b, train)
    s1_test = step1_outputs(b, test)
    save_labels(out / "labels_stage1_1.mmel", s1_train["logits"])
    report["files"].append("labels_stage1_1.mmel")
    report["step1_gate"] = step1_gate_summary(s1_test, np.asarray(test.y))
    report["data_paths"] = {k: str(v) for k, v in data_paths.items()}
    stage("1.2", lambda: {**distill_1_2(b, train, s1_train["logits"], cfg.stage("1.2")),
                          **eval_lidar_gate(b, test, s1_test["logits"])})
    # warm start the cropped expert from the segment the step-1.1 gate relies on most
    warm = int(np.argmax(s1_train["gate"].mean(axis=0)))
    stage("1.3", lambda: {**train_stage_1_3(b, train, cfg.stage("1.3"), warm), "warm_start_segment": warm,
                          "test_mse": eval_lidar_with_gating(b, test)["mse"]})
    # step 2
    stage("2.1", lambda: train_stage_2_1(b, train, cfg.stage("2.1")))
    t_train = teacher_table(teacher_outputs(b, train, mseed))
    test_teachers = teacher_outputs(b, test, mseed)
    t_test = teacher_table(test_teachers)
    save_labels(out / "labels_stage2_1.mmel", t_train)
    report["files"].append("labels_stage2_1.mmel")
    report["teachers"] = teacher_summary(test_teachers, np.asarray(test.y))
    report["gate_confidence"] = gate_confidence(s1_test, test_teachers)
    stage("2.2", lambda: {**distill_2_2(b, train, t_train, cfg.stage("2.2"), mseed),
                          "gate_acc": gate_accuracy(b, test, t_test, mseed),
                          "lidar_selected_all_on": lidar_selection_rate(b, test)})
    # step 3
    stage("3", lambda: train_stage_3(b, train, cfg.stage("3")))
    rows = evaluate_final(b, test, t_test, mseed)
    write_metrics_csv(out / "final_metrics.csv", rows)
    report["files"].append("final_metrics.csv")
    report["final"] = rows
    report["timings"] = timings
    report["wall_time"] = time.perf_counter() - t_all
    report["bundle"] = b
    report["teacher_test_logits"] = t_test
    return report


def step1_gate_summary(outs, y):
    g = outs["gate"]
    left, right = y < 0, y > 0
    return {"mean_gate": g.mean(axis=0).tolist() if len(g) else [],
            "mean_max_gate": mean_max_gate(g),
            "left_turn_left_mass": float(g[left][:, :2].sum(axis=1).mean()) if left.any() else float("nan"),
            "left_turn_right_mass": float(g[left][:, 3:].sum(axis=1).mean()) if left.any() else float("nan"),
            "right_turn_left_mass": float(g[right][:, :2].sum(axis=1).mean()) if right.any() else float("nan"),
            "right_turn_right_mass": float(g[right][:, 3:].sum(axis=1).mean()) if right.any() else float("nan"),
            "mse": _mse(outs["pred"], y)}


def teacher_summary(outs, y):
    out = {}
    for case, o in outs.items():
        p = o["gate"]
        sel = M.hard_select(o["logits"])
        out[case] = {"lidar_selected": 100.0 * float(np.mean(sel == M.LIDAR_ID)),
                     "lidar_weight_mean": float(p[:, M.LIDAR_ID].mean()),
                     "mean_max_gate": mean_max_gate(p),
                     "selection_hist": np.bincount(sel, minlength=4).tolist(),
                     "mse": _mse(o["pred"], y)}
    return out


def gate_confidence(step1_test, teacher_test):
    return {"step1_mean_max_gate": mean_max_gate(step1_test["gate"]),
            "step2_mean_max_gate": float(np.mean([mean_max_gate(o["gate"]) for o in teacher_test.values()])),
            "step2_per_case": {c: mean_max_gate(o["gate"]) for c, o in teacher_test.items()}}


def run_loss_ablation(cfg: PipelineConfig, data_paths, full=None, log=print):
    """Stages 1.1 and 2.1 with alpha = beta = 0 versus the regular weights.

    ``full`` may carry the regular run's ``gate_confidence`` block (from
    ``run_pipeline``) to avoid retraining it.
    """
    train = load_dataset(data_paths["train"])
    test = load_dataset(data_paths["test"])
    profile = PROFILES[cfg.profile]
    result = {"full": full} if full is not None else {}
    for label, ablate in (("full", False), ("ablated", True)):
        if label in result:
            continue
        c = replace(cfg, loss_ablation=ablate)
        b = Bundle(profile, seed=cfg.seed)
        t0 = time.perf_counter()
        train_stage_1_1(b, train, c.stage("1.1"))
        s1 = step1_outputs(b, test)
        train_stage_2_1(b, train, c.stage("2.1"))
        result[label] = gate_confidence(s1, teacher_outputs(b, test, cfg.seed))
        log(f"[loss ablation] {label}: {time.perf_counter() - t0:.1f}s {_brief(result[label])}")
    result["weights"] = {"full": [asdict(cfg.stage("1.1").weights), asdict(cfg.stage("2.1").weights)],
                         "ablated": [asdict(O.LossWeights()), asdict(O.LossWeights())]}
    return result


def run_e2e(cfg: PipelineConfig, data_paths, teacher_test_logits, multistep_acc=None, log=print):
    """End-to-end ablation next to the multi-step gate accuracies."""
    train = load_dataset(data_paths["train"])
    test = load_dataset(data_paths["test"])
    b = Bundle(PROFILES[cfg.profile], seed=cfg.seed + 1000)
    t0 = time.perf_counter()
    res = run_e2e_ablation(b, train, test, cfg.stages["e2e_ablation"], teacher_test_logits,
                           mask_seed=cfg.seed)
    res["e2e_gate_acc"] = {r["case"]: r["gate_acc"] for r in res["rows"] if r["case"] != "avg"}
    if multistep_acc is not None:
        res["multistep_gate_acc"] = {str(k): v for k, v in multistep_acc.items()}
    log(f"[e2e ablation] {time.perf_counter() - t0:.1f}s {_brief(res)}")
    return res


def _brief(res):
    return json.dumps(_compact(res), default=str)


def _compact(v):
    if isinstance(v, float):
        return round(v, 4)
    if isinstance(v, dict):
        return {str(k): _compact(x) for k, x in v.items() if not str(k).endswith("digest")
                and not str(k).endswith("digests")}
    return v
