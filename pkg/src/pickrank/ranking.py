"""Segment and pick ranking (heuristic and learned) and the scene-clearing loop.

Ranking is two-step: segments are ordered first, then each segment's picks,
and the within-segment lists are concatenated in segment order. Every sort
key ends in an id so orders are total and reproducible.

Ranker strings have the form ``SEG/POLICY[/WITHIN]``:

    SEG     z | size | topo+z | topo+lpr | lpr   (topoz, topolpr accepted)
    POLICY  center | random                      (how candidate picks are sampled)
    WITHIN  cups | lpr                           (default: cups for heuristic SEG,
                                                  lpr for learned SEG)
"""

from dataclasses import dataclass, field

import numpy as np

from .eoat import CENTER, POLICIES, RANDOM, EoATModel, WorkcellLimits, cup_positions, feasible_mask, generate_candidates
from .errors import ConfigError
from .features import feature_matrix
from .oracle import outcome_from_uniform, success_probs
from .perception import PerceptionConfig, perceive
from .scene import perturb_package, remove_package
from .seeding import derive_seed, rng_for

Z_ORDER = "z_order"
SIZE = "package_size"
TOPO = "topo"
LEARNED = "learned"
HEURISTIC_CUPS = "heuristic_center_cups"

_SEG_ALIASES = {
    "z": (Z_ORDER, None),
    "size": (SIZE, None),
    "topo+z": (TOPO, Z_ORDER),
    "topoz": (TOPO, Z_ORDER),
    "topo+lpr": (TOPO, LEARNED),
    "topolpr": (TOPO, LEARNED),
    "lpr": (LEARNED, None),
}
_WITHIN_ALIASES = {"cups": HEURISTIC_CUPS, "lpr": LEARNED}

GRAMMAR = "SEG/POLICY[/WITHIN] with SEG in {z, size, topo+z, topo+lpr, lpr}, " \
          "POLICY in {center, random}, WITHIN in {cups, lpr}"


@dataclass(frozen=True)
class RankerSpec:
    segment_strategy: str
    within_segment_strategy: str
    pick_policy: str
    topo_tiebreak: str = None

    def __post_init__(self):
        if self.segment_strategy not in (Z_ORDER, SIZE, TOPO, LEARNED):
            raise ConfigError(f"unknown segment strategy {self.segment_strategy!r}")
        if self.within_segment_strategy not in (HEURISTIC_CUPS, LEARNED):
            raise ConfigError(f"unknown within-segment strategy {self.within_segment_strategy!r}")
        if self.pick_policy not in POLICIES:
            raise ConfigError(f"unknown pick policy {self.pick_policy!r}")
        if (self.segment_strategy == TOPO) != (self.topo_tiebreak in (Z_ORDER, LEARNED)):
            raise ConfigError("topo_tiebreak is required for, and only for, topological order")

    @property
    def needs_model(self):
        return LEARNED in (self.segment_strategy, self.within_segment_strategy, self.topo_tiebreak)

    def __str__(self):
        seg = {Z_ORDER: "z", SIZE: "size", LEARNED: "lpr"}.get(self.segment_strategy)
        if seg is None:
            seg = "topo+z" if self.topo_tiebreak == Z_ORDER else "topo+lpr"
        within = "lpr" if self.within_segment_strategy == LEARNED else "cups"
        return f"{seg}/{self.pick_policy}/{within}"


def parse_ranker(text):
    parts = text.strip().lower().split("/")
    if len(parts) not in (2, 3) or parts[0] not in _SEG_ALIASES or parts[1] not in POLICIES:
        raise ConfigError(f"bad ranker {text!r}; expected {GRAMMAR}")
    seg, tiebreak = _SEG_ALIASES[parts[0]]
    learned_seg = LEARNED in (seg, tiebreak)
    if len(parts) == 3:
        if parts[2] not in _WITHIN_ALIASES:
            raise ConfigError(f"bad within-segment strategy in {text!r}; expected {GRAMMAR}")
        within = _WITHIN_ALIASES[parts[2]]
    else:
        within = LEARNED if learned_seg else HEURISTIC_CUPS
    return RankerSpec(seg, within, parts[1], tiebreak)


# Named arms of the multi-arm comparisons.
ARMS = {
    "TopoZ-Center": "topo+z/center",
    "Z-Center": "z/center",
    "TopoZ-Random": "topo+z/random",
    "TopoLPR-Center": "topo+lpr/center",
    "LPR-Center": "lpr/center",
    "LPR-Random": "lpr/random",
    "Baseline": "topo+z/random/cups",
    "Experiment": "topo+lpr/random/lpr",
}


def resolve_arm(name_or_spec):
    """(display name, RankerSpec) for an arm name or a ranker string."""
    if name_or_spec in ARMS:
        return name_or_spec, parse_ranker(ARMS[name_or_spec])
    spec = parse_ranker(name_or_spec)
    return name_or_spec, spec


# -- scorers ------------------------------------------------------------------------

class ModelScorer:
    """Predicted success probability of picks from a trained model."""

    def __init__(self, model, eoat=EoATModel()):
        self.model = model
        self.eoat = eoat

    def __call__(self, products, picks, X=None):
        if X is None:
            X = feature_matrix(products, picks, self.eoat)
        return self.model.predict_prob(X)


class OracleScorer:
    """True success probability; ``invert`` ranks by 1 - p instead."""

    def __init__(self, params, eoat=EoATModel(), invert=False):
        self.params = params
        self.eoat = eoat
        self.invert = invert

    def __call__(self, products, picks, X=None):
        if X is None:
            X = feature_matrix(products, picks, self.eoat)
        p = success_probs(self.params, X)
        return 1.0 - p if self.invert else p


# -- segment ranking ------------------------------------------------------------------

def rank_segments_z_order(segments):
    """Highest surface first; ties by larger visible area, then lower id."""
    return [s.id for s in sorted(segments, key=lambda s: (-s.max_height, -s.visible_area, s.id))]


def rank_segments_size(segments):
    """Largest visible area first; ties by higher surface, then lower id."""
    return [s.id for s in sorted(segments, key=lambda s: (-s.visible_area, -s.max_height, s.id))]


def rank_segments_topo(segments, graph, tiebreak=Z_ORDER, scores=None):
    """Ascending occlusion level; within a level by height or by learned score."""
    level = graph.occlusion_level
    if tiebreak == Z_ORDER:
        key = lambda s: (level[s.id], -s.max_height, -s.visible_area, s.id)  # noqa: E731
    elif tiebreak == LEARNED:
        if scores is None:
            raise ConfigError("learned tiebreak needs segment scores")
        key = lambda s: (level[s.id], -scores[s.id], s.id)  # noqa: E731
    else:
        raise ConfigError(f"unknown topo tiebreak {tiebreak!r}")
    return [s.id for s in sorted(segments, key=key)]


def rank_segments_learned(segments, scores):
    """Descending segment score, then lower id."""
    return [s.id for s in sorted(segments, key=lambda s: (-scores[s.id], s.id))]


def segment_score_learned(picks, scorer, products=None):
    """Segment score: the maximum predicted success probability over its picks."""
    if len(picks) == 0:
        raise ConfigError("a segment needs at least one candidate pick to be scored")
    return float(np.max(scorer(products, picks)))


# -- within-segment ranking -------------------------------------------------------------

def active_cup_centers(picks, eoat=EoATModel()):
    """(P, 2) mean xy of each pick's active cups (the pick point when none are active)."""
    if not picks:
        return np.zeros((0, 2))
    cups = cup_positions([p.point for p in picks], [p.axis for p in picks],
                         [p.yaw for p in picks], eoat)[:, :, :2]
    mask = np.zeros(cups.shape[:2])
    for n, p in enumerate(picks):
        mask[n, list(p.active_cups)] = 1.0
    count = mask.sum(axis=1)
    centers = (cups * mask[:, :, None]).sum(axis=1) / np.maximum(count, 1.0)[:, None]
    points = np.asarray([p.point[:2] for p in picks], dtype=float)
    return np.where(count[:, None] > 0, centers, points)


def active_cup_center(pick, eoat=EoATModel()):
    return active_cup_centers([pick], eoat)[0]


def rank_within_segment_heuristic(picks, segment, eoat=EoATModel(), centers=None):
    """More active cups first, then active-cup centroid nearer the segment centroid, then id.

    ``centers`` optionally supplies ``active_cup_centers(picks)``.
    """
    cx, cy = segment.centroid_xy
    c = active_cup_centers(list(picks), eoat) if centers is None else centers
    dist = np.hypot(c[:, 0] - cx, c[:, 1] - cy)
    order = sorted(range(len(picks)),
                   key=lambda k: (-len(picks[k].active_cups), float(dist[k]), picks[k].pick_id))
    return [picks[k] for k in order]


def rank_within_segment_learned(picks, probs):
    """Descending predicted probability, then pick id."""
    order = sorted(range(len(picks)), key=lambda k: (-float(probs[k]), picks[k].pick_id))
    return [picks[k] for k in order]


# -- two-step ranking -------------------------------------------------------------------

@dataclass(frozen=True)
class RankedPick:
    pick: object
    segment_rank: int  # position of the pick's segment in the segment order
    segment_score: float  # learned segment score, or NaN for heuristic orders
    pick_score: float  # learned pick probability, or NaN when not scored


@dataclass(frozen=True)
class RankedPickList:
    entries: tuple

    @property
    def picks(self):
        return [e.pick for e in self.entries]

    def __len__(self):
        return len(self.entries)


def rank_picks(spec, products, candidates, scorer=None, eoat=EoATModel(), X=None):
    """Total order over the candidate picks: segments first, then picks within each segment.

    ``X`` optionally supplies precomputed feature rows for the candidates.
    """
    picks = list(candidates.picks if hasattr(candidates, "picks") else candidates)
    if spec.needs_model and scorer is None:
        raise ConfigError(f"ranker {spec} needs a model")
    if not picks:
        return RankedPickList(())
    probs = None
    if spec.needs_model:
        probs = np.asarray(scorer(products, picks, X), dtype=float)
    by_seg = {}
    for k, p in enumerate(picks):
        by_seg.setdefault(p.segment_id, []).append(k)
    segments = [products.segments[sid] for sid in sorted(by_seg)]
    scores = None
    if probs is not None:
        scores = {sid: float(probs[idx].max()) for sid, idx in by_seg.items()}

    if spec.segment_strategy == Z_ORDER:
        order = rank_segments_z_order(segments)
    elif spec.segment_strategy == SIZE:
        order = rank_segments_size(segments)
    elif spec.segment_strategy == TOPO:
        order = rank_segments_topo(segments, products.graph, spec.topo_tiebreak, scores)
    else:
        order = rank_segments_learned(segments, scores)

    centers = None
    if spec.within_segment_strategy != LEARNED:
        centers = active_cup_centers(picks, eoat)
    nan = float("nan")
    entries = []
    for rank, sid in enumerate(order):
        idx = by_seg[sid]
        seg_picks = [picks[k] for k in idx]
        if spec.within_segment_strategy == LEARNED:
            ordered = rank_within_segment_learned(seg_picks, probs[idx])
        else:
            ordered = rank_within_segment_heuristic(seg_picks, products.segments[sid], eoat,
                                                    centers[idx])
        pos = {id(p): k for p, k in zip(seg_picks, idx)}
        for p in ordered:
            k = pos[id(p)]
            entries.append(RankedPick(
                p, rank, scores[sid] if scores is not None else nan,
                float(probs[k]) if probs is not None else nan,
            ))
    return RankedPickList(tuple(entries))


# -- episodes -------------------------------------------------------------------------------

EMPTIED = "emptied"
PLANNING_FAILURE = "planning_failure"
ATTEMPT_CAP = "attempt_cap"


@dataclass(frozen=True)
class EpisodeConfig:
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    eoat: EoATModel = field(default_factory=EoATModel)
    picks_per_segment: int = 5
    random_radius: float = 0.30
    cap_factor: int = 3  # attempt cap = cap_factor * initial package count


@dataclass(frozen=True)
class Attempt:
    index: int
    pick: object
    outcome: object
    rank_position: int  # index of the executed pick in the ranked list


@dataclass(frozen=True)
class EpisodeResult:
    scene_id: int
    attempts: tuple
    n_success: int
    n_holding_failure: int
    cleared_reason: str
    remaining_packages: int

    def to_dict(self):
        return {
            "scene_id": self.scene_id,
            "attempts": [
                {"index": a.index, "pick": a.pick.to_dict(), "outcome": a.outcome.to_dict(),
                 "rank_position": a.rank_position}
                for a in self.attempts
            ],
            "n_success": self.n_success,
            "n_holding_failure": self.n_holding_failure,
            "cleared_reason": self.cleared_reason,
            "remaining_packages": self.remaining_packages,
        }


def first_feasible(ranked, scene, heightmap, limits, eoat, chunk=8):
    """Index of the first ranked pick passing the feasibility filter, or -1."""
    picks = ranked.picks
    for start in range(0, len(picks), chunk):
        mask = feasible_mask(picks[start:start + chunk], scene, heightmap, limits, eoat)
        hit = np.flatnonzero(mask)
        if hit.size:
            return start + int(hit[0])
    return -1


def execute_episode(scene, spec, scorer, oracle, limits=WorkcellLimits(), seed=0,
                    attempt_cap=None, config=EpisodeConfig(), scene_id=0):
    """Clear a scene pick by pick with the first feasible pick of each ranked list.

    Outcomes use uniforms from ``(seed, attempt)`` so arms sharing a seed see
    common random numbers.
    """
    if attempt_cap is None:
        attempt_cap = config.cap_factor * len(scene)
    if attempt_cap < 1:
        raise ConfigError("attempt_cap must be at least 1")
    if spec.needs_model and scorer is None:
        raise ConfigError(f"ranker {spec} needs a model")
    eoat = config.eoat
    attempts = []
    n_success = n_fail = 0
    reason = EMPTIED
    for a in range(attempt_cap):
        if len(scene) == 0:
            break
        products = perceive(scene, config.perception)
        cands = generate_candidates(products, spec.pick_policy, config.picks_per_segment,
                                    derive_seed(seed, "picks", a), eoat, limits, config.random_radius)
        X = feature_matrix(products, cands.picks, eoat) if spec.needs_model else None
        ranked = rank_picks(spec, products, cands, scorer, eoat, X)
        k = first_feasible(ranked, scene, products.heightmap, limits, eoat)
        if k < 0:
            reason = PLANNING_FAILURE
            break
        pick = ranked.picks[k]
        if X is not None:
            row = X[cands.picks.index(pick)][None, :]
        else:
            row = feature_matrix(products, [pick], eoat)
        prob = float(success_probs(oracle, row)[0])
        outcome = outcome_from_uniform(prob, rng_for(seed, "outcome", a).random())
        attempts.append(Attempt(a, pick, outcome, k))
        if outcome.success:
            n_success += 1
            scene = remove_package(scene, pick.package_id)
        else:
            n_fail += 1
            scene = perturb_package(scene, pick.package_id, derive_seed(seed, "perturb", a))
    else:
        if len(scene) > 0:
            reason = ATTEMPT_CAP
    if reason == EMPTIED and len(scene) > 0:
        reason = ATTEMPT_CAP
    return EpisodeResult(scene_id, tuple(attempts), n_success, n_fail, reason, len(scene))


__all__ = [
    "ARMS", "CENTER", "RANDOM", "GRAMMAR", "RankerSpec", "RankedPick", "RankedPickList",
    "EpisodeResult", "EpisodeConfig", "Attempt", "ModelScorer", "OracleScorer",
    "parse_ranker", "resolve_arm", "rank_segments_z_order", "rank_segments_size",
    "rank_segments_topo", "rank_segments_learned", "segment_score_learned",
    "rank_within_segment_heuristic", "active_cup_center", "active_cup_centers", "rank_within_segment_learned", "rank_picks",
    "execute_episode", "first_feasible",
]
