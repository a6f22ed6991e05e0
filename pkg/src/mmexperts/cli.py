"""``mmexperts`` command line: data generation, stage training, evaluation,
FLOPs tables, closed-loop rollouts, gate traces and the full pipeline.

Exit codes: 0 ok, 1 usage, 2 data / format, 3 numeric failure.
"""

from __future__ import annotations

import os

# thread cap must be in place before numpy loads BLAS
_threads = os.environ.get("MME_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import asdict, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import models as M  # noqa: E402
from . import pipeline as P  # noqa: E402
from .dataset import DataFormatError, generate_dataset, load_dataset  # noqa: E402
from .params import CheckpointError, load_checkpoint, save_checkpoint  # noqa: E402
from .simworld import (GenConfig, OffCorridorError, Pose, Vehicle, World, WorldError,  # noqa: E402
                       WorldSpec, drive, expert_steer, render_frame)
from .specs import ARCH_NAMES, FLOPS_CONVENTION, PROFILES, count_arch_flops  # noqa: E402
from .tensor import ConfigurationError, NumericError  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Reference rows (reported numbers, not reproduced here)
PAPER_FLOPS_M = {"lidar_only": 52.23, "three_cameras": 151.48, "baseline_concat": 204.69,
                 "lidar_with_gating": 28.15, "final_net:lidar": 35.71, "final_net:camera": 58.15,
                 "single_camera": 50.58}
PAPER_TABLE2_AVG = {"Ours": 0.026, "BL": 0.026, "NG": 0.022, "SD": 0.031}
PAPER_TABLE1_ACC = {1: 100.0, 2: 93.41, 3: 97.69, 4: 94.33, 5: 96.98}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# -- manifest ---------------------------------------------------------------------

def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Command, config snapshot, seed, input digests, outputs and wall time."""

    def __init__(self, command, argv, seed, config=None):
        self.data = {"command": command, "argv": list(argv), "seed": seed, "config": config or {},
                     "inputs": {}, "outputs": [], "wall_time": 0.0}
        self._t0 = time.perf_counter()

    def add_input(self, path):
        if path and Path(path).is_file():
            self.data["inputs"][str(path)] = file_digest(path)

    def add_output(self, path):
        self.data["outputs"].append(str(path))

    def write(self, path):
        self.data["wall_time"] = time.perf_counter() - self._t0
        self.data["output_digests"] = {p: file_digest(p) for p in self.data["outputs"] if Path(p).is_file()}
        Path(path).write_text(json.dumps(self.data, indent=2, default=str) + "\n")
        return path


def _manifest_path(out):
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# -- helpers ---------------------------------------------------------------------------

def _csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows([_fmt(v) for v in r] for r in rows)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.6f}"
    return str(v)


def _load_pipeline_config(path, profile=None, seed=None):
    cfg = P.PipelineConfig()
    if path:
        cfg = P.PipelineConfig.from_dict(json.loads(Path(path).read_text()))
    if profile:
        cfg = replace(cfg, profile=profile)
    if seed is not None:
        cfg = replace(cfg, seed=seed, stages=P.default_stages(seed) if not path else cfg.stages)
    return cfg


def _world_spec(path, seed):
    if path:
        return WorldSpec.from_text(Path(path).read_text())
    return P.WorldConfig(seed=seed).spec()


def _bundle(args, *ckpts):
    b = M.Bundle(PROFILES[args.profile], seed=args.seed or 0)
    for c in ckpts:
        for p in c or []:
            b.store.merge(load_checkpoint(p))
    return b


def _log(msg):
    print(msg, flush=True)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items() if k not in ("bundle", "teacher_test_logits")}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args, man):
    cfg = _load_pipeline_config(None, args.profile, args.seed)
    spec = _world_spec(args.config, args.seed or 0)
    gen = replace(cfg.gen, frames=args.frames, seed=args.seed or 0)
    out = Path(args.out)
    man.add_input(args.config)
    _, hist = generate_dataset(spec, out, gen, cfg.rig())
    hpath = out.with_suffix(".bins.csv")
    _csv(hpath, ["bin", "range", "count"], [(k + 1, P.BIN_EDGES[k], int(c)) for k, c in enumerate(hist)])
    man.add_output(out)
    man.add_output(hpath)
    print(f"wrote {args.frames} frames to {out}; bins {hist.tolist()}")


def _stage_cfg(args, sid):
    cfg = _load_pipeline_config(args.config, args.profile, args.seed)
    return cfg, cfg.stage(sid)


def cmd_train(args, man):
    sid = args.stage
    cfg, scfg = _stage_cfg(args, sid)
    data = load_dataset(args.data)
    man.add_input(args.data)
    for c in args.ckpt or []:
        man.add_input(c)
    b = _bundle(args, args.ckpt)
    if sid == "1.1":
        res = P.train_stage_1_1(b, data, scfg)
    elif sid == "1.3":
        res = P.train_stage_1_3(b, data, scfg)
    elif sid == "2.1":
        cases = (args.case,) if args.case else P.CASES
        res = P.train_stage_2_1(b, data, scfg, cases)
    elif sid == "3":
        res = P.train_stage_3(b, data, scfg)
    else:
        raise UsageError(f"train handles stages 1.1, 1.3, 2.1, 3 (use distill for {sid})")
    P.save_stage(b, sid, args.out) if sid != "2.1" or not args.case else \
        save_checkpoint(P.substore(b.store, P.prefixes([f"four{args.case}"])), args.out)
    man.add_output(args.out)
    print(json.dumps(_json_safe(res)))


def cmd_distill(args, man):
    sid = args.stage
    cfg, scfg = _stage_cfg(args, sid)
    data = load_dataset(args.data)
    man.add_input(args.data)
    for c in args.ckpt or []:
        man.add_input(c)
    b = _bundle(args, args.ckpt)
    if args.labels:
        labels = P.load_labels(args.labels)
        man.add_input(args.labels)
    elif sid == "1.2":
        labels = P.step1_outputs(b, data)["logits"]
    else:
        labels = P.teacher_table(P.teacher_outputs(b, data, cfg.seed))
    if sid == "1.2":
        res = P.distill_1_2(b, data, labels, scfg)
    elif sid == "2.2":
        if len(labels) != len(P.CASES) * len(data):
            raise DataFormatError(f"teacher labels have {len(labels)} rows, expected {5 * len(data)}")
        res = P.distill_2_2(b, data, labels, scfg, cfg.seed)
    else:
        raise UsageError("distill handles stages 1.2 and 2.2")
    P.save_stage(b, sid, args.out)
    man.add_output(args.out)
    if args.label_out:
        P.save_labels(args.label_out, labels)
        man.add_output(args.label_out)
    print(json.dumps(_json_safe(res)))


def cmd_eval(args, man):
    data = load_dataset(args.data)
    man.add_input(args.data)
    for c in args.ckpt or []:
        man.add_input(c)
    b = _bundle(args, args.ckpt)
    teacher = None
    if args.labels:
        teacher = P.load_labels(args.labels)
        man.add_input(args.labels)
    cases = (args.case,) if args.case else P.CASES
    if teacher is not None and args.case:
        n = len(data)
        k = P.CASES.index(args.case)
        teacher = teacher[k * n:(k + 1) * n]
    if args.arch == "final_net":
        predict = P.final_predictor(b)
    elif args.arch == "lidar_with_gating":
        def predict(batch):
            return {"pred": M.forward_lidar_with_gating(b, batch[3])["pred"].data}
    elif args.arch == "step1_net":
        def predict(batch):
            return {"pred": M.forward_step1_net(b, batch[3])["pred"].data}
    elif args.arch == "baseline_concat":
        def predict(batch):
            return {"pred": M.forward_baseline(b, *batch[:4])["pred"].data}
    else:
        raise UsageError(f"eval does not support architecture {args.arch}")
    rows = P.evaluate_cases(predict, data, teacher, args.seed or 0, cases)
    out = Path(args.out)
    P.write_metrics_csv(out, rows)
    man.add_output(out)
    ref = out.with_name(out.stem + ".reference.csv")
    _csv(ref, ["method", "avg_mse"], list(PAPER_TABLE2_AVG.items()))
    man.add_output(ref)
    for r in rows:
        print(f"case {r['case']}: mse {r['mse']:.5f} gate_acc {r['gate_acc']:.2f} n {r['n_frames']}")


def flops_table(names, profile):
    base = count_arch_flops("baseline_concat", profile)
    lidar_only = count_arch_flops("lidar_only", profile)
    rows = []
    for name in names:
        paths = ("lidar", "camera") if name == "final_net" else (None,)
        for path in paths:
            f = count_arch_flops(name, profile, path)
            key = f"{name}:{path}" if path else name
            ref = PAPER_FLOPS_M.get(key, float("nan"))
            rows.append((key, f, f / 1e6, ref, f / base, f / lidar_only))
    return rows


def cmd_flops(args, man):
    names = args.arch or list(ARCH_NAMES) + ["lidar_only", "single_camera", "three_cameras"]
    for n in names:
        if n not in ARCH_NAMES and n not in ("lidar_only", "single_camera", "three_cameras"):
            raise UsageError(f"unknown architecture {n!r}")
    rows = flops_table(names, PROFILES[args.profile])
    out = Path(args.out)
    with open(out, "w") as f:
        f.write(f"# convention: {FLOPS_CONVENTION}\n")
        f.write("arch,flops,mflops,paper_mflops,ratio_vs_baseline,ratio_vs_lidar_only\n")
        for r in rows:
            f.write(",".join(_fmt(v) for v in r) + "\n")
    man.add_output(out)
    for r in rows:
        ref = "" if math.isnan(r[3]) else f"  (reference {r[3]:.2f}M)"
        print(f"{r[0]:<24} {r[2]:9.2f}M  vs baseline {r[4]:.3f}{ref}")


def rollout(world, steer, steps, seed=0, speed=0.5, rig=None, vehicle=Vehicle()):
    """Closed loop: ``steer(frame) -> (y, info)`` drives the bicycle model.

    Leaving the corridor is counted and the vehicle is put back on the
    nearest centreline point. Returns (per-step rows, stats).
    """
    rig = rig or P.PAPER_RIG
    rng = np.random.default_rng(seed)
    p, h = world.point_at(0.5 + float(rng.uniform(0, 0.5)))
    pose = Pose(float(p[0]), float(p[1]), h)
    world.check_inside(pose)
    rows, off = [], 0
    end_s = world.length - vehicle.lookahead - 0.5
    for t in range(steps):
        i, s, lat = world.check_inside(pose)
        cams, lidar = render_frame(world, pose, rig)
        y_hat, info = steer(world, pose, (cams[0], cams[1], cams[2], lidar))
        rows.append((t, pose.x, pose.y, pose.heading, s, lat, y_hat, info.get("selected", -1),
                     info.get("g_l", float("nan"))))
        nxt = drive(pose, y_hat, speed, vehicle)
        try:
            _, s2, _ = world.check_inside(nxt)
        except OffCorridorError:
            off += 1
            q, hh = world.point_at(world.nearest(nxt.x, nxt.y)[1])
            nxt = Pose(float(q[0]), float(q[1]), hh)
            s2 = world.nearest(nxt.x, nxt.y)[1]
        if s2 >= end_s:
            q, hh = world.point_at(0.5)
            nxt = Pose(float(q[0]), float(q[1]), hh)
        pose = nxt
    lat = np.array([r[5] for r in rows])
    stats = {"steps": steps, "mean_abs_lateral": float(np.mean(np.abs(lat))) if steps else 0.0,
             "off_corridor_rate": off / steps if steps else 0.0}
    return rows, stats


def expert_driver(world, pose, frame):
    return expert_steer(world, pose), {}


def model_driver(b):
    def steer(world, pose, frame):
        batch = [np.asarray(x, np.float32)[None] for x in frame]
        o = M.forward_final(b, *batch)
        return float(o["pred"].data[0]), {"selected": int(o["selected"][0]) + 1, "g_l": float(o["g_l"][0])}
    return steer


def cmd_rollout(args, man):
    spec = _world_spec(args.config, args.seed or 0)
    world = World(spec)
    man.add_input(args.config)
    if args.driver == "expert":
        steer = expert_driver
    else:
        if not args.ckpt:
            raise UsageError("rollout with the model driver needs --ckpt")
        for c in args.ckpt:
            man.add_input(c)
        steer = model_driver(_bundle(args, args.ckpt))
    rig = P.PAPER_RIG if args.profile == "paper" else P.TINY_RIG
    rows, stats = rollout(world, steer, args.steps, args.seed or 0, args.speed, rig)
    out = Path(args.out)
    _csv(out, ["step", "x", "y", "heading", "s", "lateral", "y_hat", "selected", "g_l"], rows)
    man.add_output(out)
    sp = out.with_name(out.stem + ".stats.csv")
    _csv(sp, list(stats), [list(stats.values())])
    man.add_output(sp)
    print(json.dumps(stats))


def trace_rows(b, data, case=None, mask_seed=0, batch=64):
    rows = []
    n = len(data)
    for s in range(0, n, batch):
        idx = np.arange(s, min(n, s + batch))
        x = P.masked_batch(data, idx, case, mask_seed) if case else data.batch(idx)
        o = M.forward_final(b, *x[:4])
        g_l = M.lidar_gate(b, x[3])["g_l"].data  # diagnostic: G^L on every frame
        for j, i in enumerate(idx):
            rows.append((int(i), float(x[4][j]), float(o["pred"].data[j]), float(g_l[j]),
                         *[float(v) for v in o["gm"].data[j]], int(o["selected"][j]) + 1))
    return rows


def cmd_trace(args, man):
    data = load_dataset(args.data)
    man.add_input(args.data)
    for c in args.ckpt or []:
        man.add_input(c)
    b = _bundle(args, args.ckpt)
    rows = trace_rows(b, data, args.case, args.seed or 0)
    out = Path(args.out)
    _csv(out, ["frame", "y", "y_hat", "g_L", "gM_1", "gM_2", "gM_3", "gM_4", "selected"], rows)
    man.add_output(out)
    sel = np.array([r[-1] for r in rows])
    print(f"{len(rows)} rows; LiDAR selected on {100 * np.mean(sel == 4) if len(sel) else 0:.1f}%")


def cmd_pipeline(args, man):
    cfg = _load_pipeline_config(args.config, args.profile, args.seed)
    if args.loss_ablation:
        cfg = replace(cfg, loss_ablation=True)
    man.data["config"] = cfg.to_dict()
    out = Path(args.out)
    data_paths = None
    if args.data:
        data_paths = {"train": Path(args.data) / "train.mmed", "test": Path(args.data) / "test.mmed"}
        for p in data_paths.values():
            man.add_input(p)
    rep = P.run_pipeline(cfg, out, log=_log, data_paths=data_paths)
    for f in rep["files"]:
        man.add_output(out / f)
    if data_paths is None:
        man.add_output(out / "train.mmed")
        man.add_output(out / "test.mmed")
    (out / "report.json").write_text(json.dumps(_json_safe(rep), indent=2, default=str) + "\n")
    man.add_output(out / "report.json")


def cmd_ablate(args, man):
    cfg = _load_pipeline_config(args.config, args.profile, args.seed)
    if not args.data:
        raise UsageError("ablate needs --data DIR holding train.mmed and test.mmed")
    paths = {"train": Path(args.data) / "train.mmed", "test": Path(args.data) / "test.mmed"}
    for p in paths.values():
        man.add_input(p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "loss":
        res = P.run_loss_ablation(cfg, paths, log=_log)
        rows = [(k, v["step1_mean_max_gate"], v["step2_mean_max_gate"]) for k, v in res.items() if k != "weights"]
        _csv(out / "loss_ablation.csv", ["run", "step1_mean_max_gate", "step2_mean_max_gate"], rows)
        man.add_output(out / "loss_ablation.csv")
    else:
        if not args.ckpt:
            raise UsageError("e2e ablation needs --ckpt with the stage-2.1 teachers (and stage 2.2 gate)")
        b = _bundle(args, args.ckpt)
        test = load_dataset(paths["test"])
        teacher = P.teacher_table(P.teacher_outputs(b, test, cfg.seed))
        multi = P.gate_accuracy(b, test, teacher, cfg.seed) if b.has("main_gate") else None
        res = P.run_e2e(cfg, paths, teacher, multi, log=_log)
        rows = [(c, res["e2e_gate_acc"][c], (res.get("multistep_gate_acc") or {}).get(c, float("nan")))
                for c in res["e2e_gate_acc"]]
        _csv(out / "e2e_ablation.csv", ["case", "e2e_gate_acc", "multistep_gate_acc"], rows)
        man.add_output(out / "e2e_ablation.csv")
    (out / f"{args.kind}_ablation.json").write_text(json.dumps(_json_safe(res), indent=2) + "\n")
    man.add_output(out / f"{args.kind}_ablation.json")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "distill": cmd_distill, "eval": cmd_eval,
            "flops": cmd_flops, "rollout": cmd_rollout, "trace": cmd_trace, "pipeline": cmd_pipeline,
            "ablate": cmd_ablate}


def build_parser():
    ap = _Parser(prog="mmexperts", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="pipeline JSON (world text for gen-data / rollout)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--profile", choices=sorted(PROFILES), default="paper")
        p.add_argument("--out", required=out_required)
        return p

    p = common(sub.add_parser("gen-data", help="simulate the expert driver and write an MMED file"))
    p.add_argument("--frames", type=int, default=2000)
    for name, helptext in (("train", "train stage 1.1, 1.3, 2.1 or 3"), ("distill", "distil stage 1.2 or 2.2")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--stage", required=True, choices=["1.1", "1.2", "1.3", "2.1", "2.2", "3"])
        p.add_argument("--data", required=True)
        p.add_argument("--ckpt", action="append", help="checkpoint(s) to load first")
        p.add_argument("--case", type=int, choices=P.CASES)
        if name == "distill":
            p.add_argument("--labels", help="teacher MMEL file (computed from --ckpt when absent)")
            p.add_argument("--label-out", help="write the teacher labels used")
    p = common(sub.add_parser("eval", help="per-case MSE and gate accuracy (CSV)"))
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", action="append", required=True)
    p.add_argument("--labels", help="stage-2.1 teacher MMEL file for gate accuracy")
    p.add_argument("--case", type=int, choices=P.CASES)
    p.add_argument("--arch", default="final_net",
                   choices=["final_net", "lidar_with_gating", "step1_net", "baseline_concat"])
    p = common(sub.add_parser("flops", help="FLOPs table per architecture"))
    p.add_argument("--arch", nargs="*")
    p = common(sub.add_parser("rollout", help="closed-loop drive in a world"))
    p.add_argument("--ckpt", action="append")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--speed", type=float, default=0.5, help="metres per step")
    p.add_argument("--driver", choices=["model", "expert"], default="model")
    p = common(sub.add_parser("trace", help="per-frame gate trace CSV"))
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", action="append", required=True)
    p.add_argument("--case", type=int, choices=P.CASES)
    p = common(sub.add_parser("pipeline", help="data, stages 1.1 to 3 and evaluation"))
    p.add_argument("--data", help="directory with train.mmed / test.mmed to reuse")
    p.add_argument("--loss-ablation", action="store_true", help="alpha = beta = 0 in stages 1.1 / 2.1")
    p = common(sub.add_parser("ablate", help="loss or end-to-end ablation"))
    p.add_argument("--kind", choices=["loss", "e2e"], required=True)
    p.add_argument("--data", help="directory with train.mmed / test.mmed")
    p.add_argument("--ckpt", action="append")
    return ap


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    man = RunManifest(args.command, argv, args.seed, {k: v for k, v in vars(args).items() if k != "command"})
    try:
        if args.command == "pipeline":
            Path(args.out).mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, man)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except P.StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(e.__cause__, NumericError) else EXIT_DATA
    except (DataFormatError, CheckpointError, ConfigurationError, WorldError, FileNotFoundError,
            ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    man.write(_manifest_path(args.out))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
