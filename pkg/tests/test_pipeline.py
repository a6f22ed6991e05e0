import json
from pathlib import Path

import numpy as np
import pytest

from mmexperts import objectives as O
from mmexperts import pipeline as P
from mmexperts.dataset import Dataset, load_dataset
from mmexperts.params import load_checkpoint

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def tiny_config(**kw):
    d = json.loads((CONFIGS / "tiny.json").read_text())
    d.update(kw)
    return P.PipelineConfig.from_dict(d)


def frame(n=2, cols=450, seed=0):
    rng = np.random.default_rng(seed)
    cams = [rng.uniform(0.1, 1, (n, 3, 4, 5)).astype(np.float32) for _ in range(3)]
    return (*cams, rng.uniform(0.1, 1, (n, 2, 3, cols)).astype(np.float32))


# -- scenarios ------------------------------------------------------------------------

def test_case2_zeroes_lidar_only():
    x = frame()
    out = P.apply_scenario(x, P.scenario_for(2))
    assert np.all(out[3] == 0)
    for a, b in zip(x[:3], out[:3]):
        np.testing.assert_array_equal(a, b)


def test_case3_zeroes_left_third():
    x = frame()
    out = P.apply_scenario(x, P.scenario_for(3))
    assert np.all(out[3][..., :150] == 0)
    np.testing.assert_array_equal(out[3][..., 150:], x[3][..., 150:])


def test_third_bounds_cover_width():
    assert P.third_bounds(450) == [(0, 150), (150, 300), (300, 450)]
    b = P.third_bounds(226)
    assert b[0][0] == 0 and b[-1][1] == 226


def test_all_on_is_identity_and_masks_idempotent():
    x = frame()
    same = P.apply_scenario(x, P.scenario_for(1, 0))
    for a, b in zip(x, same):
        np.testing.assert_array_equal(a, b)
    for case in P.CASES:
        sc = P.scenario_for(case, 2) if case == 1 else P.scenario_for(case)
        once = P.apply_scenario(x, sc)
        twice = P.apply_scenario(once, sc)
        for a, b in zip(once, twice):
            np.testing.assert_array_equal(a, b)


def test_per_frame_masks_match_single_frame():
    x = frame(3)
    scen = [P.scenario_for(1, 3), P.scenario_for(2), P.scenario_for(5)]
    batch = P.apply_scenarios(x, scen)
    for i, sc in enumerate(scen):
        one = P.apply_scenario(tuple(a[i:i + 1] for a in x), sc)
        for a, b in zip(batch, one):
            np.testing.assert_array_equal(a[i:i + 1], b)


def test_inconsistent_scenario_rejected():
    with pytest.raises(ValueError):
        P.Scenario(2, lidar=True)
    with pytest.raises(ValueError):
        P.Scenario(1, cameras=(False, False, True))


def test_eval_scenarios_are_fixed_per_frame():
    a = [P.eval_scenario(1, i, 0) for i in range(30)]
    assert a == [P.eval_scenario(1, i, 0) for i in range(30)]
    assert len({s.cameras for s in a}) > 1


# -- balanced sampler -------------------------------------------------------------------

BINS = np.repeat(np.arange(7), [5, 2, 6, 9, 4, 1, 3])


def test_sampler_counts_and_membership():
    idx = P.balanced_epoch_sample(BINS, 3, seed=0)
    assert len(idx) == 21
    assert np.bincount(BINS[idx], minlength=7).tolist() == [3] * 7


def test_sampler_without_replacement_when_possible():
    idx = P.balanced_epoch_sample(BINS, 3, seed=1)
    big = BINS[idx] == 3
    assert len(set(idx[big].tolist())) == 3


def test_sampler_deterministic():
    a = P.balanced_epoch_sample(BINS, 4, seed=5)
    np.testing.assert_array_equal(a, P.balanced_epoch_sample(BINS, 4, seed=5))


def test_sampler_empty_bin_named():
    bins = BINS[BINS != 5]
    with pytest.raises(ValueError, match=r"bin 6 \(0.33,0.67\]"):
        P.balanced_epoch_sample(bins, 2, seed=0)
    assert len(P.balanced_epoch_sample(bins, 2, seed=0, allow_empty=True)) == 12


# -- labels, metrics, config ------------------------------------------------------------

def test_labels_round_trip(tmp_path):
    t = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
    P.save_labels(tmp_path / "l.mmel", t)
    np.testing.assert_array_equal(P.load_labels(tmp_path / "l.mmel"), t)
    (tmp_path / "bad.mmel").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ValueError):
        P.load_labels(tmp_path / "bad.mmel")


def _toy_data(n=12, seed=0):
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0, 1, (n, 3, 2, 2)).astype(np.float32) for _ in range(3)]
    x4 = rng.uniform(0, 1, (n, 2, 2, 6)).astype(np.float32)
    return Dataset(*xs, x4, rng.uniform(-1, 1, n).astype(np.float32))


def test_evaluate_cases_oracle_and_zero():
    data = _toy_data()
    exact = P.evaluate_cases(lambda b: {"pred": b[4]}, data)
    assert all(r["mse"] == 0.0 for r in exact)
    zero = P.evaluate_cases(lambda b: {"pred": np.zeros(len(b[4]))}, data)
    ref = float(np.mean(np.asarray(data.y, np.float64) ** 2))
    for r in zero:
        assert r["mse"] == pytest.approx(ref, rel=1e-12)
    assert [r["case"] for r in zero] == ["1", "2", "3", "4", "5", "avg"]


def test_evaluate_cases_avg_is_weighted_mean():
    data = _toy_data()

    def predict(b):
        # depends on the masks, so cases differ
        return {"pred": np.tanh(b[3].mean(axis=(1, 2, 3)) - 0.3)}

    rows = P.evaluate_cases(predict, data)
    per = [r["mse"] for r in rows[:-1]]
    assert len(set(per)) > 1
    assert rows[-1]["mse"] == pytest.approx(np.mean(per))
    assert np.isnan(rows[-1]["gate_acc"])


def test_default_learning_rates():
    assert P.DEFAULT_LR["1.1"] == 1e-3 and P.DEFAULT_LR["1.3"] == 1e-3 and P.DEFAULT_LR["2.1"] == 1e-4
    assert P.DEFAULT_LR["1.2"] == 1e-3 and P.DEFAULT_LR["2.2"] == 1e-3 and P.DEFAULT_LR["3"] == 1e-4
    stages = P.default_stages()
    assert all(stages[s].learning_rate == P.DEFAULT_LR[s] for s in ("1.1", "1.2", "1.3", "2.1", "2.2", "3"))


def test_loss_ablation_flag_routes_zero_weights():
    cfg = P.PipelineConfig()
    assert cfg.stage("1.1").weights == O.STAGE_1_1_WEIGHTS
    assert cfg.stage("2.1").weights == O.STAGE_2_1_WEIGHTS
    abl = P.PipelineConfig(loss_ablation=True)
    assert abl.stage("1.1").weights == O.LossWeights(0, 0)
    assert abl.stage("2.1").weights == O.LossWeights(0, 0)
    assert abl.stage("3") == cfg.stage("3")


def test_config_dict_round_trip():
    cfg = tiny_config()
    assert P.PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError, match="unknown"):
        P.PipelineConfig.from_dict({"colour": 1})


# -- tiny end-to-end run -----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    report = P.run_pipeline(tiny_config(), out, log=lambda *a: None)
    return out, report


def test_tiny_pipeline_files(tiny_run):
    out, report = tiny_run
    for name in P.STAGE_FILES.values():
        assert (out / name).exists()
    assert {"labels_stage1_1.mmel", "labels_stage2_1.mmel", "final_metrics.csv"} <= set(report["files"])
    lines = (out / "final_metrics.csv").read_text().splitlines()
    assert lines[0] == "case,mse,gate_acc,n_frames" and len(lines) == 7
    s1 = P.load_labels(out / "labels_stage1_1.mmel")
    assert s1.shape == (48, 5)
    assert P.load_labels(out / "labels_stage2_1.mmel").shape == (5 * 48, 4)


def test_tiny_pipeline_gates_frozen(tiny_run):
    out, report = tiny_run
    b = report["bundle"]
    lidar_gate = b.store.digest("lidar_gate.")
    assert report["stages"]["1.3"]["gate_digest"] == lidar_gate
    assert report["stages"]["3"]["gate_digests"]["lidar_gate"] == lidar_gate
    assert report["stages"]["3"]["gate_digests"]["main_gate"] == b.store.digest("main_gate.")
    # checkpoints of the gate stages hold the same bytes as the final bundle
    assert load_checkpoint(out / "stage1_2.mmen").digest("lidar_gate.") == lidar_gate
    assert load_checkpoint(out / "stage2_2.mmen").digest("main_gate.") == b.store.digest("main_gate.")


def test_tiny_labels_regenerate_identically(tiny_run):
    out, report = tiny_run
    b = report["bundle"]
    train = load_dataset(out / "train.mmed")
    again = P.teacher_table(P.teacher_outputs(b, train, 0))
    np.testing.assert_array_equal(again.astype(np.float32), P.load_labels(out / "labels_stage2_1.mmel"))
