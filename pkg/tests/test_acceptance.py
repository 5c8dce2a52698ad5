"""Acceptance suite: one test per criterion, each at its stated tolerance and time limit.

Every test records a one-line verdict; conftest prints them all in the
terminal summary, so a plain ``pytest -v`` run lists pass/fail per criterion.
"""

import hashlib
import time

import numpy as np
import pytest
from oracles import (
    brute_adjacency_ranks, brute_auc, brute_best_split, brute_occlusion_levels, lstsq_plane,
)

from pickrank.cli import EXIT_OK, main
from pickrank.eoat import CENTER, RANDOM, EoATModel, WorkcellLimits, generate_candidates
from pickrank.evaluation import roc_auc, run_ab_test
from pickrank.features import FEATURE_NAMES, feature_matrix
from pickrank.gbdt import TrainConfig, _presort, fit_boosted, grow_tree, train_boosted, train_ensemble
from pickrank.oracle import (
    calibrate_base_rate, dataset_arrays, default_oracle, generate_dataset, generate_eval_dataset,
    OracleParams, calibrate_on_features, make_past_oracle, probe_features, success_probs,
)
from pickrank.perception import fit_plane_points, perceive
from pickrank.ranking import ModelScorer, parse_ranker, rank_picks, segment_score_learned
from pickrank.scene import SceneConfig, generate_scene

D = len(FEATURE_NAMES)
pytestmark = pytest.mark.acceptance
RESULTS = []  # (criterion, passed, detail), read by conftest's terminal summary


class Verdict:
    """Times one criterion and records its verdict line, even when an assertion fails."""

    def __init__(self, number, title, limit_s):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.detail = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        in_time = elapsed < self.limit_s
        passed = exc_type is None and in_time
        line = (f"criterion {self.number:>2} {'PASS' if passed else 'FAIL'}  {self.title}: "
                f"{self.detail} [{elapsed:.1f}s of {self.limit_s:.0f}s]")
        RESULTS.append((self.number, passed, line))
        print(line)
        if exc_type is None:
            assert in_time, line
        return False


def record(verdict, text):
    verdict.detail = text


# -- 1 -----------------------------------------------------------------------------------------

def test_criterion_01_auc_oracle():
    with Verdict(1, "AUC equals pairwise statistic, constant scores 0.5", 5) as v:
        rng = np.random.default_rng(1)
        worst = 0.0
        for k in range(200):
            n = int(rng.integers(2, 501))
            levels = int(rng.integers(2, 12)) if k % 2 else 0
            s = rng.integers(0, levels, n).astype(float) if levels else rng.normal(size=n)
            y = rng.integers(0, 2, n)
            y[0], y[1] = 0, 1
            worst = max(worst, abs(roc_auc(s, y) - brute_auc(s, y)))
        const = roc_auc(np.full(300, 0.7), np.r_[0, 1, rng.integers(0, 2, 298)])
        record(v, f"max |diff| {worst:.2e} over 200 instances, constant scores {const}")
        assert worst <= 1e-12
        assert const == 0.5


# -- 2 -----------------------------------------------------------------------------------------

def test_criterion_02_boosting_correctness():
    with Verdict(2, "deviance non-increasing, depth-1 splits match enumeration", 30) as v:
        rng = np.random.default_rng(2)
        rises = splits_checked = split_mismatch = 0
        for k in range(20):
            n = int(rng.integers(8, 65)) if k < 10 else int(rng.integers(200, 2000))
            X = rng.normal(size=(n, D))
            X[:, : D // 2] = np.round(X[:, : D // 2], 1)
            logit = X[:, 0] - 0.5 * X[:, 1] * X[:, 2]
            y = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(float)
            y[0], y[1] = 0.0, 1.0
            cfg = TrainConfig(max_trees=40, learning_rate=float(rng.choice([0.05, 0.3, 1.0])),
                              max_depth=int(rng.integers(1, 7)), min_samples_leaf=1,
                              validation_fraction=0.0)
            dev = fit_boosted(X, y, cfg).training_meta["train_deviance"]
            rises += sum(b > a for a, b in zip(dev, dev[1:]))
            if n <= 64:
                for _ in range(5):
                    p = rng.uniform(0.05, 0.95, n)
                    g, h = p - y, p * (1 - p)
                    w = np.ones(n)
                    l2, leaf = float(rng.choice([0.0, 3.0])), int(rng.choice([1, 4]))
                    vals, idx = _presort(X)
                    tree = grow_tree(vals, idx, X, g, h, w, 1, l2, leaf)
                    best, arg = brute_best_split(X, g, h, w, l2, leaf)
                    splits_checked += 1
                    if not arg:
                        split_mismatch += tree.n_nodes != 1
                        continue
                    mask = X[:, tree.feature[0]] <= tree.threshold[0]
                    same = any(f == tree.feature[0] and np.array_equal(mask, m) for f, m in arg)
                    split_mismatch += not (same and abs(tree.gain[0] - best) <= 1e-9 * max(1.0, best))
        record(v, f"{rises} deviance rises over 20 datasets, {split_mismatch} of {splits_checked} "
                  f"depth-1 splits differ from enumeration")
        assert rises == 0
        assert split_mismatch == 0


# -- shared simulation fixtures --------------------------------------------------------------------

@pytest.fixture(scope="module")
def calibrated():
    t0 = time.perf_counter()
    oracle = default_oracle(seed=0)
    return oracle, time.perf_counter() - t0


# -- 3 -----------------------------------------------------------------------------------------

def test_criterion_03_oracle_ceiling(calibrated):
    oracle, t_cal = calibrated
    with Verdict(3, "5-member ensemble within 0.03 of the true-probability AUC", 600 - t_cal) as v:
        X_ev, y_ev, p_ev = dataset_arrays(generate_eval_dataset("ev", 20000, CENTER, oracle, seed=99)[0])
        ceiling = roc_auc(p_ev, y_ev)
        gaps = []
        for s in range(5):
            X, y, _ = dataset_arrays(generate_dataset("c", 50000, CENTER, 0.151, oracle, seed=10 + s)[0])
            ens = train_ensemble((X, y), TrainConfig(seed=s))
            gaps.append(ceiling - roc_auc(ens.predict_prob(X_ev), y_ev))
        hits = sum(g <= 0.03 for g in gaps)
        record(v, f"ceiling {ceiling:.4f}, gaps {' '.join(f'{g:.4f}' for g in gaps)}, {hits}/5 within 0.03"
                  f" (+{t_cal:.0f}s calibration)")
        assert hits >= 4


# -- 4 -----------------------------------------------------------------------------------------

def test_criterion_04_training_distribution_ordering(calibrated):
    oracle, t_cal = calibrated
    with Verdict(4, "random-trained beats center-trained on random eval; past model worse", 900 - t_cal) as v:
        X_ec, y_ec, _ = dataset_arrays(generate_eval_dataset("ec", 20000, CENTER, oracle, seed=99)[0])
        X_er, y_er, _ = dataset_arrays(generate_eval_dataset("er", 20000, RANDOM, oracle, seed=98)[0])
        # A past fleet ran near today's success rate, so each drifted oracle is
        # recalibrated to the same center-policy mean before labelling.
        probe = probe_features(CENTER, 20000, seed=0)
        rand_gaps, past_gaps = [], []
        for s in range(5):
            c = dataset_arrays(generate_dataset("c", 50000, CENTER, 0.151, oracle, seed=10 + s)[0])
            r = dataset_arrays(generate_dataset("r", 50000, RANDOM, 0.151, oracle, seed=20 + s)[0])
            past = calibrate_on_features(make_past_oracle(oracle, 1.0, seed=30 + s), probe, 0.944)
            pc = dataset_arrays(generate_dataset("p", 50000, CENTER, 0.151, past, seed=40 + s)[0])
            m_c = train_boosted(c[:2], TrainConfig(seed=s))
            m_r = train_boosted(r[:2], TrainConfig(seed=s))
            m_p = train_boosted(pc[:2], TrainConfig(seed=s))
            rand_gaps.append(roc_auc(m_r.predict_prob(X_er), y_er) - roc_auc(m_c.predict_prob(X_er), y_er))
            past_gaps.append(roc_auc(m_c.predict_prob(X_ec), y_ec) - roc_auc(m_p.predict_prob(X_ec), y_ec))
        hits_r = sum(g >= 0.01 for g in rand_gaps)
        hits_p = sum(g > 0 for g in past_gaps)
        record(v, f"random-minus-center {' '.join(f'{g:+.4f}' for g in rand_gaps)} ({hits_r}/5 >= 0.01); "
                  f"current-minus-past {' '.join(f'{g:+.4f}' for g in past_gaps)} ({hits_p}/5 > 0)")
        assert hits_r >= 4
        assert hits_p >= 4


# -- 5 and 6 --------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def random_model(calibrated):
    """Random-policy-trained ensemble used by every learned arm."""
    oracle, _ = calibrated
    t0 = time.perf_counter()
    X, y, _ = dataset_arrays(generate_dataset("r", 50000, RANDOM, 0.151, oracle, seed=2)[0])
    model = train_ensemble((X, y), TrainConfig(seed=0))
    return model, time.perf_counter() - t0


def _ab_line(rep, a, b):
    ra, rb = rep.arm(a), rep.arm(b)
    return (f"{a} {100 * ra.failure_rate:.2f}% vs {b} {100 * rb.failure_rate:.2f}% failures, "
            f"p={rep.pair(a, b).p_value:.2g}")


def test_criterion_05_table3_ordering(calibrated, random_model):
    oracle, t_cal = calibrated
    model, t_model = random_model
    with Verdict(5, "LPR arms fail less than TopoZ arms over 2000 paired scenes",
                 1200 - t_cal - t_model) as v:
        rep = run_ab_test(["TopoZ-Center", "LPR-Center", "TopoZ-Random", "LPR-Random"], 2000,
                          SceneConfig(), oracle, {"*": model}, seed=11)
        record(v, f"{_ab_line(rep, 'LPR-Center', 'TopoZ-Center')}; "
                  f"{_ab_line(rep, 'LPR-Random', 'TopoZ-Random')} (+{t_cal + t_model:.0f}s setup)")
        for lpr, topo in (("LPR-Center", "TopoZ-Center"), ("LPR-Random", "TopoZ-Random")):
            assert rep.arm(lpr).failure_rate < rep.arm(topo).failure_rate
            assert rep.pair(lpr, topo).p_value < 0.05


def test_criterion_06_table2_ordering(calibrated, random_model):
    oracle, t_cal = calibrated
    model, t_model = random_model
    with Verdict(6, "Experiment beats Baseline over 2000 paired scenes", 1200 - t_cal - t_model) as v:
        rep = run_ab_test(["Baseline", "Experiment"], 2000, SceneConfig(), oracle, {"*": model}, seed=12)
        e, b = rep.arm("Experiment"), rep.arm("Baseline")
        record(v, f"success {100 * e.success_rate:.2f}% vs {100 * b.success_rate:.2f}%, "
                  f"p={rep.pair('Experiment', 'Baseline').p_value:.2g} (+{t_cal + t_model:.0f}s setup)")
        assert e.success_rate > b.success_rate
        assert rep.pair("Experiment", "Baseline").p_value < 0.05


# -- 7 -----------------------------------------------------------------------------------------

def _mean_success(params, X):
    """Mean success probability recomputed from the parameters, cup cap included."""
    col = {n: k for k, n in enumerate(FEATURE_NAMES)}
    z = np.full(len(X), params.base_logit)
    for name, w in zip(FEATURE_NAMES, params.weights):
        z += w * X[:, col[name]]
    for material, m in params.material_modifiers:
        z += m * X[:, col[f"material_{material}"]]
    p = 1.0 / (1.0 + np.exp(-z))
    capped = X[:, col["n_active_cups"]] < params.hard_floor_cups
    return float(np.mean(np.where(capped, np.minimum(p, params.cap_value), p)))


def test_criterion_07_calibration():
    with Verdict(7, "calibration at 0.944 and center episode success in [0.90, 0.97]", 120) as v:
        hits = []
        for seed in (0, 1, 2):
            oracle = calibrate_base_rate(OracleParams(), CENTER, 0.944, 20000, seed=seed)
            probe = probe_features(CENTER, 20000, seed=seed)
            hits.append(_mean_success(oracle, probe))
            if seed == 0:
                fresh = success_probs(oracle, probe_features(CENTER, 20000, seed=7)).mean()
                rep = run_ab_test(["TopoZ-Center", "Z-Center"], 250, SceneConfig(), oracle, seed=13)
        rates = [rep.arm(a).success_rate for a in ("TopoZ-Center", "Z-Center")]
        record(v, f"calibrated mean p {' '.join(f'{h:.4f}' for h in hits)} on probe seeds 0-2 "
                  f"(seed-0 oracle on an unseen probe: {fresh:.4f}); episode success "
                  f"TopoZ-Center {rates[0]:.4f}, Z-Center {rates[1]:.4f}")
        assert all(abs(h - 0.944) <= 0.005 for h in hits)
        assert all(0.90 <= r <= 0.97 for r in rates)


# -- 8 -----------------------------------------------------------------------------------------

def test_criterion_08_geometry_oracles():
    with Verdict(8, "plane fits, adjacency ranks and occlusion levels match brute force", 60) as v:
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(3, 400))
            x, y = rng.uniform(0, 1.6, n), rng.uniform(0, 1.0, n)
            a, b, c = rng.normal(0, 0.3, 3)
            z = a * x + b * y + c + rng.normal(0, 0.005, n)
            plane = fit_plane_points(x, y, z)
            worst = max(worst, float(np.max(np.abs(np.array([plane.a, plane.b, plane.c]) - lstsq_plane(x, y, z)))))
        bad_rank = bad_level = 0
        for s in range(100):
            scene = generate_scene(SceneConfig(), 1000 + s)
            p = perceive(scene)
            ids = list(p.segments)
            rank, edges = brute_adjacency_ranks(p.heightmap.owner, p.heightmap.top, ids, 3)
            bad_rank += rank != p.graph.rank or frozenset(edges) != p.graph.edges
            bad_level += brute_occlusion_levels(ids, scene) != p.graph.occlusion_level
        record(v, f"max plane coefficient diff {worst:.1e}; {bad_rank} adjacency and {bad_level} "
                  f"occlusion mismatches over 100 scenes")
        assert worst <= 1e-9
        assert bad_rank == 0 and bad_level == 0


# -- 9 -----------------------------------------------------------------------------------------

def _pipeline(root):
    seed = ["--seed", "9"]
    assert main(["gen-dataset", "--policy", "random", "--n", "5000", *seed, "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", "--data", str(root / "data" / "random.jsonl.gz"), *seed,
                 "--out", str(root / "model")]) == EXIT_OK
    assert main(["ab", "--arms", "TopoZ-Random,LPR-Random", "--scenes", "60", *seed,
                 "--model", str(root / "model" / "model.json"),
                 "--oracle", str(root / "data" / "oracle.json"), "--episodes",
                 "--out", str(root / "ab")]) == EXIT_OK
    names = ["data/random.jsonl.gz", "data/random.manifest.json", "data/oracle.json",
             "model/model.json", "ab/ab_report.json", "ab/ab_report.txt", "ab/episodes.jsonl"]
    return {n: hashlib.sha256((root / n).read_bytes()).hexdigest() for n in names}


def test_criterion_09_end_to_end_determinism(tmp_path):
    with Verdict(9, "gen-dataset, train and ab reruns are byte-identical", 900) as v:
        first = _pipeline(tmp_path / "one")
        second = _pipeline(tmp_path / "two")
        differ = [n for n in first if first[n] != second[n]]
        record(v, f"{len(first)} artifacts compared, {len(differ)} differ {differ or ''}".strip())
        assert not differ


# -- 10 ----------------------------------------------------------------------------------------

def _small_model(eoat, limits):
    """GBDT trained on candidate features from a few scenes with synthetic labels."""
    rows = []
    for s in range(12):
        p = perceive(generate_scene(SceneConfig(), 900 + s))
        cands = generate_candidates(p, RANDOM, 5, s, eoat, limits)
        rows.append(feature_matrix(p, list(cands.picks), eoat))
    X = np.vstack(rows)
    rng = np.random.default_rng(10)
    logit = np.tanh(X @ rng.normal(size=D))
    y = (rng.random(len(X)) < 1.0 / (1.0 + np.exp(-2.0 * logit))).astype(float)
    return fit_boosted(X, y, TrainConfig(max_trees=60, max_depth=3, min_samples_leaf=5,
                                         validation_fraction=0.0))


def test_criterion_10_two_step_invariants():
    with Verdict(10, "segment score is the max pick probability; first pick monotone-invariant", 60) as v:
        eoat, limits = EoATModel(), WorkcellLimits()
        transforms = (lambda p: p ** 3, lambda p: np.log(p) - np.log1p(-p), lambda p: 10.0 * p - 4.0,
                      np.sqrt)
        scorer = ModelScorer(_small_model(eoat, limits), eoat)
        bad_max = bad_first = checked = 0
        for s in range(40):
            p = perceive(generate_scene(SceneConfig(), 500 + s))
            policy = CENTER if s % 2 else RANDOM
            cands = generate_candidates(p, policy, 5, s, eoat, limits)
            probs = scorer(p, list(cands.picks))
            for sid in {q.segment_id for q in cands.picks}:
                mine = [q for q in cands.picks if q.segment_id == sid]
                brute = max(probs[k] for k, q in enumerate(cands.picks) if q.segment_id == sid)
                bad_max += segment_score_learned(mine, scorer, p) != brute
            for spec_text in (f"lpr/{policy}", f"topo+lpr/{policy}", f"z/{policy}/lpr"):
                spec = parse_ranker(spec_text)
                base = rank_picks(spec, p, cands, scorer).picks[0]
                for f in transforms:
                    moved = rank_picks(spec, p, cands, lambda pr, pk, X=None, f=f: f(scorer(pr, pk, X)))
                    bad_first += moved.picks[0] != base
                    checked += 1
        record(v, f"{bad_max} segment-score mismatches, {bad_first} of {checked} first picks moved")
        assert bad_max == 0 and bad_first == 0
