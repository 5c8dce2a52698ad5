import json
from pathlib import Path

import numpy as np
import pytest
from conftest import box, fixed_scene
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_lexsort, brute_rank

from pickrank.eoat import CENTER, RANDOM, EoATModel, Pick, WorkcellLimits, feasible_mask, generate_candidates
from pickrank.errors import ConfigError
from pickrank.features import feature_matrix
from pickrank.oracle import OracleParams, success_probs
from pickrank.perception import AdjacencyGraph, Segment, perceive
from pickrank.ranking import (
    ARMS, ATTEMPT_CAP, EMPTIED, HEURISTIC_CUPS, LEARNED, PLANNING_FAILURE, TOPO, Z_ORDER,
    EpisodeConfig, ModelScorer, OracleScorer, RankerSpec, execute_episode, parse_ranker, rank_picks,
    rank_segments_learned, rank_segments_size, rank_segments_topo, rank_segments_z_order,
    rank_within_segment_heuristic, rank_within_segment_learned, resolve_arm, segment_score_learned,
)
from pickrank.scene import SceneConfig, generate_scene
from pickrank.seeding import derive_seed

EOAT = EoATModel()
LIMITS = WorkcellLimits()
GOLDEN = Path(__file__).parent / "golden" / "rank_orderings.json"
SCORER = OracleScorer(OracleParams(base_logit=2.0))


def seg(i, height=0.1, area=0.05, xy=(0.5, 0.5)):
    return Segment(i, i, np.array([0]), area, xy, height, height, "rigid_box", 1.0)


def graph(levels):
    ids = tuple(sorted(levels))
    return AdjacencyGraph(ids, frozenset(), {i: 1 for i in ids}, dict(levels), {i: 0.1 for i in ids})


def const_scorer(values):
    return lambda products, picks, X=None: np.asarray([values[p.pick_id] for p in picks])


def vpick(pid, sid, xy, cups, yaw=0.0):
    return Pick(pid, sid, sid, (xy[0], xy[1], 0.1), (0.0, 0.0, 1.0), yaw, tuple(cups))


# -- segment orders ------------------------------------------------------------------

def test_z_order_examples():
    assert rank_segments_z_order([seg(0, 0.3), seg(1, 0.1), seg(2, 0.2)]) == [0, 2, 1]
    assert rank_segments_z_order([seg(0, 0.2, 0.01), seg(1, 0.2, 0.03), seg(2, 0.2, 0.03)]) == [1, 2, 0]


def test_size_order_examples():
    assert rank_segments_size([seg(0, area=0.01), seg(1, area=0.05), seg(2, area=0.03)]) == [1, 2, 0]
    assert rank_segments_size([seg(0, 0.1, 0.02), seg(1, 0.3, 0.02), seg(2, 0.3, 0.02)]) == [1, 2, 0]


def test_topo_level_dominates_height():
    segs = [seg(0, 0.1), seg(1, 0.2), seg(2, 0.9)]
    assert rank_segments_topo(segs, graph({0: 0, 1: 0, 2: 1})) == [1, 0, 2]
    flat = graph({0: 0, 1: 0, 2: 0})
    assert rank_segments_topo(segs, flat) == rank_segments_z_order(segs)
    scores = {0: 0.9, 1: 0.5, 2: 0.99}
    assert rank_segments_topo(segs, graph({0: 0, 1: 0, 2: 1}), LEARNED, scores) == [0, 1, 2]
    assert rank_segments_topo(segs, flat, LEARNED, scores) == rank_segments_learned(segs, scores)
    with pytest.raises(ConfigError):
        rank_segments_topo(segs, flat, LEARNED)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_segment_orders_match_lexicographic_oracle(seed):
    p = perceive(generate_scene(SceneConfig(), seed))
    segs = list(p.segments.values())
    lv = p.graph.occlusion_level
    rng = np.random.default_rng(seed)
    scores = {s.id: float(rng.choice([0.2, 0.5, 0.8])) for s in segs}  # coarse values force ties
    cases = [
        (rank_segments_z_order(segs), lambda s: (-s.max_height, -s.visible_area, s.id)),
        (rank_segments_size(segs), lambda s: (-s.visible_area, -s.max_height, s.id)),
        (rank_segments_topo(segs, p.graph), lambda s: (lv[s.id], -s.max_height, -s.visible_area, s.id)),
        (rank_segments_topo(segs, p.graph, LEARNED, scores), lambda s: (lv[s.id], -scores[s.id], s.id)),
        (rank_segments_learned(segs, scores), lambda s: (-scores[s.id], s.id)),
    ]
    for got, key in cases:
        assert got == [s.id for s in brute_lexsort(segs, key)]


# -- segment scores and within-segment orders ------------------------------------------------

def test_segment_score_is_max():
    one = [vpick(0, 0, (0.5, 0.5), range(8))]
    assert segment_score_learned(one, const_scorer({0: 0.7})) == 0.7
    three = [vpick(k, 0, (0.5, 0.5), range(8)) for k in range(3)]
    assert segment_score_learned(three, const_scorer({0: 0.708, 1: 0.756, 2: 0.825})) == 0.825
    with pytest.raises(ConfigError):
        segment_score_learned([], const_scorer({}))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_segment_score_equals_brute_max(probs):
    picks = [vpick(k, 0, (0.5, 0.5), range(8)) for k in range(len(probs))]
    best = probs[0]
    for v in probs[1:]:
        if v > best:
            best = v
    assert segment_score_learned(picks, const_scorer(dict(enumerate(probs)))) == best


def test_learned_within_segment_order():
    picks = [vpick(k, 0, (0.5, 0.5), range(8)) for k in range(3)]
    got = rank_within_segment_learned(picks, [0.708, 0.825, 0.756])
    assert [p.pick_id for p in got] == [1, 2, 0]
    assert [p.pick_id for p in rank_within_segment_learned(picks[::-1], [0.5] * 3)] == [0, 1, 2]


def test_heuristic_within_segment_order():
    s = seg(0, xy=(0.5, 0.5))
    four = vpick(0, 0, (0.5, 0.5), (0, 1, 2, 3))
    eight = vpick(1, 0, (0.6, 0.6), range(8))
    assert rank_within_segment_heuristic([four, eight], s)[0] is eight
    near = vpick(5, 0, (0.52, 0.5), range(8))
    far = vpick(2, 0, (0.56, 0.5), range(8))
    assert [p.pick_id for p in rank_within_segment_heuristic([far, near], s)] == [5, 2]
    tie = vpick(3, 0, (0.48, 0.5), range(8))
    assert [p.pick_id for p in rank_within_segment_heuristic([near, tie], s)] == [3, 5]


# -- two-step ranking ------------------------------------------------------------------------

def test_spec_requires_model():
    p = perceive(fixed_scene((box(0), (0.8, 0.5))))
    cands = generate_candidates(p, CENTER, 3, 0, EOAT, LIMITS)
    with pytest.raises(ConfigError):
        rank_picks(parse_ranker("lpr/center"), p, cands)
    assert len(rank_picks(parse_ranker("z/center"), p, cands)) == len(cands.picks)


def test_single_segment_equals_within_order():
    p = perceive(fixed_scene((box(0, 0.4, 0.4), (0.8, 0.5))))
    cands = generate_candidates(p, RANDOM, 10, 4, EOAT, LIMITS)
    ranked = rank_picks(parse_ranker("z/random"), p, cands)
    assert ranked.picks == rank_within_segment_heuristic(list(cands.picks), p.segments[0], EOAT)


def test_segment_blocks_are_contiguous():
    p = perceive(fixed_scene((box(0, 0.3, 0.3, 0.1), (0.4, 0.5)), (box(1, 0.3, 0.3, 0.2), (1.2, 0.5))))
    cands = generate_candidates(p, CENTER, 4, 0, EOAT, LIMITS)
    ranked = rank_picks(parse_ranker("z/center"), p, cands)
    assert [q.segment_id for q in ranked.picks] == [1] * 4 + [0] * 4
    assert [e.segment_rank for e in ranked.entries] == [0] * 4 + [1] * 4


def test_golden_orderings_for_named_arms():
    golden = json.loads(GOLDEN.read_text())
    p = perceive(generate_scene(SceneConfig(), golden["scene_seed"]))
    scorer = OracleScorer(OracleParams(base_logit=golden["scorer_base_logit"]))
    assert set(golden["orderings"]) == set(ARMS)
    for arm, expected in golden["orderings"].items():
        _, spec = resolve_arm(arm)
        cands = generate_candidates(p, spec.pick_policy, golden["picks_per_segment"],
                                    golden["candidate_seed"], EOAT, LIMITS)
        ranked = rank_picks(spec, p, cands, scorer)
        assert [q.pick_id for q in ranked.picks] == expected, arm


SEG_RULES = ("lpr", "size", "topo+lpr", "topo+z", "z")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from(SEG_RULES), st.sampled_from([CENTER, RANDOM]),
       st.sampled_from(["cups", "lpr"]))
def test_rank_picks_matches_brute_rank(seed, seg_rule, policy, within):
    p = perceive(generate_scene(SceneConfig(), seed))
    cands = generate_candidates(p, policy, 4, seed, EOAT, LIMITS)
    spec = parse_ranker(f"{seg_rule}/{policy}/{within}")
    ranked = rank_picks(spec, p, cands, SCORER)
    probs = SCORER(p, list(cands.picks))
    pr = {q.pick_id: float(v) for q, v in zip(cands.picks, probs)}
    expected = brute_rank(seg_rule, within, p.segments, p.graph.occlusion_level, cands.picks, pr,
                          EOAT.cup_offsets)
    got = [q.pick_id for q in ranked.picks]
    assert sorted(got) == sorted(q.pick_id for q in cands.picks)
    assert got == expected


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([CENTER, RANDOM]))
def test_first_pick_from_best_segment_and_monotone_invariant(seed, policy):
    p = perceive(generate_scene(SceneConfig(), seed))
    cands = generate_candidates(p, policy, 5, seed, EOAT, LIMITS)
    spec = parse_ranker(f"lpr/{policy}")
    ranked = rank_picks(spec, p, cands, SCORER)
    top = ranked.entries[0]
    probs = SCORER(p, list(cands.picks))
    assert top.pick_score == probs.max()
    assert top.segment_score == probs.max()
    for f in (lambda v: v ** 3, lambda v: np.log(v) - np.log1p(-v), lambda v: 2.0 * v - 7.0):
        moved = rank_picks(spec, p, cands, lambda prod, picks, X=None: f(SCORER(prod, picks, X)))
        assert moved.picks[0] == ranked.picks[0]


def test_model_scorer_uses_feature_rows():
    class Half:
        def predict_prob(self, X):
            return np.full(X.shape[0], 0.5) + 0.01 * X[:, 0]

    p = perceive(fixed_scene((box(0), (0.8, 0.5))))
    picks = list(generate_candidates(p, CENTER, 2, 0, EOAT, LIMITS).picks)
    X = feature_matrix(p, picks, EOAT)
    np.testing.assert_array_equal(ModelScorer(Half())(p, picks), 0.5 + 0.01 * X[:, 0])
    inv = OracleScorer(OracleParams(), invert=True)(p, picks)
    np.testing.assert_allclose(inv, 1.0 - success_probs(OracleParams(), X))


# -- ranker grammar ---------------------------------------------------------------------------

def test_parse_ranker_grammar():
    s = parse_ranker("topo+z/center")
    assert (s.segment_strategy, s.topo_tiebreak, s.within_segment_strategy, s.pick_policy) == \
        (TOPO, Z_ORDER, HEURISTIC_CUPS, CENTER)
    assert parse_ranker("TopoLPR/Random") == parse_ranker("topo+lpr/random/lpr")
    assert parse_ranker("lpr/center").within_segment_strategy == LEARNED
    assert parse_ranker("z/random/lpr").needs_model
    assert not parse_ranker("size/random").needs_model
    for text in ARMS.values():
        assert parse_ranker(str(parse_ranker(text))) == parse_ranker(text)
    for bad in ("x", "z", "q/center", "z/left", "z/center/best", "z/center/cups/x"):
        with pytest.raises(ConfigError):
            parse_ranker(bad)
    with pytest.raises(ConfigError):
        RankerSpec(TOPO, HEURISTIC_CUPS, CENTER)


def test_named_arms():
    assert {"TopoZ-Center", "Z-Center", "TopoZ-Random", "TopoLPR-Center", "LPR-Center",
            "LPR-Random", "Baseline", "Experiment"} == set(ARMS)
    assert resolve_arm("Baseline")[1] == parse_ranker("topo+z/random/cups")
    assert resolve_arm("Experiment")[1] == parse_ranker("topo+lpr/random/lpr")
    assert resolve_arm("z/center") == ("z/center", parse_ranker("z/center"))


# -- episodes -----------------------------------------------------------------------------------

def test_certain_success_empties_lone_box():
    scene = fixed_scene((box(0, 0.3, 0.3), (0.8, 0.5)))
    res = execute_episode(scene, parse_ranker("z/center"), None, OracleParams(base_logit=60.0))
    assert len(res.attempts) == 1 and res.n_success == 1 and res.n_holding_failure == 0
    assert res.cleared_reason == EMPTIED and res.remaining_packages == 0
    assert res.attempts[0].outcome.true_prob == 1.0


def test_unreachable_scene_is_planning_failure():
    scene = generate_scene(SceneConfig(), 3)
    far = WorkcellLimits(reach_center_xy=(10.0, 10.0), reach_radius=0.5)
    res = execute_episode(scene, parse_ranker("topo+z/center"), None, OracleParams(), far)
    assert res.attempts == () and res.cleared_reason == PLANNING_FAILURE
    assert res.remaining_packages == len(scene)


def test_certain_failure_hits_attempt_cap():
    scene = fixed_scene((box(0), (0.8, 0.5)), (box(1), (0.3, 0.5)))
    res = execute_episode(scene, parse_ranker("z/random"), None, OracleParams(base_logit=-60.0),
                          attempt_cap=4)
    assert len(res.attempts) == 4 and res.n_holding_failure == 4 and res.n_success == 0
    assert res.cleared_reason == ATTEMPT_CAP and res.remaining_packages == 2
    assert all(a.outcome.failure_kind == "holding" for a in res.attempts)
    with pytest.raises(ConfigError):
        execute_episode(scene, parse_ranker("z/random"), None, OracleParams(), attempt_cap=0)
    with pytest.raises(ConfigError):
        execute_episode(scene, parse_ranker("lpr/random"), None, OracleParams())


@pytest.mark.parametrize("arm", sorted(ARMS))
def test_episode_is_deterministic_and_consistent(arm, oracle):
    _, spec = resolve_arm(arm)
    scene = generate_scene(SceneConfig(), 21)
    a = execute_episode(scene, spec, SCORER, oracle, seed=5, scene_id=21)
    b = execute_episode(scene, spec, SCORER, oracle, seed=5, scene_id=21)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert a.n_success + a.n_holding_failure == len(a.attempts)
    assert a.n_success + a.remaining_packages == len(scene)
    assert len(a.attempts) <= 3 * len(scene)
    if a.cleared_reason == EMPTIED:
        assert a.remaining_packages == 0


def test_first_attempt_is_first_feasible_pick(oracle):
    scene = generate_scene(SceneConfig(), 8)
    spec = parse_ranker("topo+z/random")
    res = execute_episode(scene, spec, None, oracle, seed=2, config=EpisodeConfig())
    p = perceive(scene)
    cands = generate_candidates(p, RANDOM, 5, derive_seed(2, "picks", 0), EOAT, LIMITS)
    ranked = rank_picks(spec, p, cands)
    mask = feasible_mask(ranked.picks, scene, p.heightmap, LIMITS, EOAT)
    k = int(np.flatnonzero(mask)[0])
    assert res.attempts[0].rank_position == k
    assert res.attempts[0].pick == ranked.picks[k]
