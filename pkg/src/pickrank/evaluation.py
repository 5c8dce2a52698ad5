"""Ranking metrics, failure rates and the paired multi-arm A/B harness.

AUC is computed by exact integer counting over tied score groups, so it is
the pairwise statistic P(s+ > s-) + 0.5 P(s+ = s-) with a single rounding.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .eoat import WorkcellLimits
from .errors import ConfigError, DataError, SingleClassError
from .ranking import ATTEMPT_CAP, PLANNING_FAILURE, EpisodeConfig, ModelScorer, RankerSpec, execute_episode, resolve_arm
from .scene import SceneConfig, generate_scene
from .seeding import derive_seed


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise DataError(f"{s.size} scores but {y.size} labels")
    if np.isnan(s).any():
        raise DataError("scores contain NaN")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC needs both positive and negative examples")
    return s, y, n_pos, n_neg


def _group_counts(s, y):
    """Per distinct score (ascending): positive and negative counts."""
    _, inv = np.unique(s, return_inverse=True)
    n_groups = int(inv.max()) + 1
    pos = np.bincount(inv[y], minlength=n_groups).astype(np.int64)
    neg = np.bincount(inv[~y], minlength=n_groups).astype(np.int64)
    return inv, pos, neg


def _twice_u(pos, neg):
    below = np.cumsum(neg) - neg
    return int(np.sum(pos * (2 * below + neg)))


def roc_auc(scores, labels):
    """Mann-Whitney AUC; tied scores count one half."""
    s, y, n_pos, n_neg = _prepare(scores, labels)
    _, pos, neg = _group_counts(s, y)
    return _twice_u(pos, neg) / (2 * n_pos * n_neg)


def bootstrap_aucs(scores, labels, n_resamples=1000, seed=0):
    """AUCs of stratified bootstrap resamples (positives and negatives drawn separately)."""
    s, y, n_pos, n_neg = _prepare(scores, labels)
    inv, _, _ = _group_counts(s, y)
    n_groups = int(inv.max()) + 1
    pos_groups = inv[y]
    neg_groups = inv[~y]
    rng = np.random.default_rng(derive_seed(seed, "bootstrap"))
    out = np.empty(n_resamples)
    denom = 2 * n_pos * n_neg
    for k in range(n_resamples):
        pg = pos_groups[rng.integers(0, n_pos, size=n_pos)]
        ng = neg_groups[rng.integers(0, n_neg, size=n_neg)]
        pos = np.bincount(pg, minlength=n_groups).astype(np.int64)
        neg = np.bincount(ng, minlength=n_groups).astype(np.int64)
        out[k] = _twice_u(pos, neg) / denom
    return out


def bootstrap_ci(scores, labels, n_resamples=1000, level=0.95, seed=0):
    """Percentile interval of the stratified bootstrap AUC distribution."""
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    if n_resamples < 1:
        raise ConfigError("n_resamples must be positive")
    aucs = bootstrap_aucs(scores, labels, n_resamples, seed)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(aucs, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def roc_curve(scores, labels):
    """(fpr, tpr) points of the threshold sweep, from (0, 0) to (1, 1)."""
    s, y, n_pos, n_neg = _prepare(scores, labels)
    _, pos, neg = _group_counts(s, y)
    # Lower the threshold from the highest distinct score downwards.
    tp = np.concatenate([[0], np.cumsum(pos[::-1])])
    fp = np.concatenate([[0], np.cumsum(neg[::-1])])
    return list(zip((fp / n_neg).tolist(), (tp / n_pos).tolist()))


def curve_area(curve):
    """Trapezoidal area under a list of (x, y) points."""
    pts = np.asarray(curve, dtype=float)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


@dataclass(frozen=True)
class EvalReport:
    name: str
    auc: float
    ci: tuple
    n_pos: int
    n_neg: int
    curve: list = field(repr=False)

    def to_dict(self):
        return {
            "name": self.name,
            "auc": self.auc,
            "ci": list(self.ci),
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }


def evaluate_scores(name, scores, labels, n_resamples=1000, level=0.95, seed=0):
    """AUC, bootstrap interval and ROC curve for one scorer.

    The percentile interval can miss the point estimate by a resampling
    step; it is widened to contain it.
    """
    s, y, n_pos, n_neg = _prepare(scores, labels)
    auc = roc_auc(s, y)
    lo, hi = bootstrap_ci(s, y, n_resamples, level, seed)
    return EvalReport(name, auc, (min(lo, auc), max(hi, auc)), n_pos, n_neg, roc_curve(s, y))


def format_auc_table(reports, title="ROC-AUC with confidence intervals"):
    rows = [(r.name, f"{r.auc:.3f} ({r.ci[0]:.3f}, {r.ci[1]:.3f})", str(r.n_pos), str(r.n_neg))
            for r in reports]
    return _format_table(title, ("Model", "ROC-AUC (CI)", "n_pos", "n_neg"), rows)


def _format_table(title, header, rows):
    widths = [max(len(header[c]), *(len(r[c]) for r in rows)) if rows else len(header[c])
              for c in range(len(header))]
    line = "  ".join(h.ljust(w) for h, w in zip(header, widths))
    out = [title, line, "-" * len(line)]
    for r in rows:
        out.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    return "\n".join(out) + "\n"


# -- failure rates and significance ---------------------------------------------

def failure_counts(episodes):
    attempts = sum(len(e.attempts) for e in episodes)
    failed = sum(e.n_holding_failure for e in episodes)
    return failed, attempts


def failure_rate(episodes):
    """Holding failures over executed attempts; planning failures are not attempts."""
    failed, attempts = failure_counts(episodes)
    if attempts == 0:
        raise DataError("no pick attempts to rate")
    return failed / attempts


def two_proportion_z(failed_a, total_a, failed_b, total_b):
    """Pooled two-proportion z statistic (a minus b) and two-sided p-value."""
    if total_a <= 0 or total_b <= 0:
        raise DataError("both arms need attempts")
    pa, pb = failed_a / total_a, failed_b / total_b
    pooled = (failed_a + failed_b) / (total_a + total_b)
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / total_a + 1.0 / total_b))
    if se == 0.0:
        return 0.0, 1.0
    z = (pa - pb) / se
    return z, math.erfc(abs(z) / math.sqrt(2.0))


# -- paired A/B experiments -----------------------------------------------------

@dataclass(frozen=True)
class ArmResult:
    name: str
    ranker: str
    n_scenes: int
    attempts: int
    successes: int
    holding_failures: int
    planning_failures: int  # scenes abandoned because no feasible pick remained
    attempt_caps: int  # scenes stopped by the attempt cap
    log_digest: str  # sha256 over the per-scene attempt logs

    @property
    def success_rate(self):
        return self.successes / self.attempts if self.attempts else float("nan")

    @property
    def failure_rate(self):
        return self.holding_failures / self.attempts if self.attempts else float("nan")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["success_rate"] = self.success_rate
        d["failure_rate"] = self.failure_rate
        return d


@dataclass(frozen=True)
class PairTest:
    arm_a: str
    arm_b: str
    z: float  # positive when arm_a fails more often than arm_b
    p_value: float

    def to_dict(self):
        return {"arm_a": self.arm_a, "arm_b": self.arm_b, "z": self.z, "p_value": self.p_value}


@dataclass(frozen=True)
class ABReport:
    arms: tuple
    pairs: tuple
    n_scenes: int
    seed: int

    def arm(self, name):
        for a in self.arms:
            if a.name == name:
                return a
        raise KeyError(name)

    def pair(self, a, b):
        """Test of arm ``a`` against arm ``b`` (z sign follows the argument order)."""
        for t in self.pairs:
            if (t.arm_a, t.arm_b) == (a, b):
                return t
            if (t.arm_a, t.arm_b) == (b, a):
                return PairTest(a, b, -t.z, t.p_value)
        raise KeyError((a, b))

    def to_dict(self):
        return {
            "format": "pickrank.ab/1",
            "n_scenes": self.n_scenes,
            "seed": self.seed,
            "arms": [a.to_dict() for a in self.arms],
            "pairs": [t.to_dict() for t in self.pairs],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def format_table(self, title="Pick success rates of the A/B arms"):
        rows = [(a.name, a.ranker, str(a.attempts), str(a.holding_failures),
                 str(a.planning_failures), f"{100.0 * a.success_rate:.2f}%") for a in self.arms]
        text = _format_table(title, ("Arm", "Ranker", "Total picks", "Holding failures",
                                     "Planning failures", "Success rate"), rows)
        prow = [(t.arm_a, t.arm_b, f"{t.z:+.3f}", f"{t.p_value:.3g}") for t in self.pairs]
        return text + "\n" + _format_table("Two-proportion z-tests on failure rate",
                                           ("Arm A", "Arm B", "z", "p"), prow)


def _normalize_arms(arms):
    out = []
    for a in arms:
        if isinstance(a, RankerSpec):
            out.append((str(a), a))
        elif isinstance(a, tuple):
            out.append((a[0], a[1] if isinstance(a[1], RankerSpec) else resolve_arm(a[1])[1]))
        else:
            out.append(resolve_arm(a))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate arm names in {names}")
    return out


def _scorer_for(name, spec, model_registry, eoat):
    if not spec.needs_model:
        return None
    registry = model_registry or {}
    model = registry.get(name, registry.get("*"))
    if model is None:
        raise ConfigError(f"arm {name!r} ({spec}) needs a model and none is registered")
    if hasattr(model, "predict_prob"):
        return ModelScorer(model, eoat)
    return model  # already a scorer callable


def run_ab_test(arms, n_scenes, scene_config, oracle, model_registry=None, seed=0,
                limits=WorkcellLimits(), config=EpisodeConfig(), on_episode=None):
    """Clear ``n_scenes`` scenes with every arm under common random numbers.

    Scene ``i`` is generated from seed ``(seed, scene, i)`` and its episode
    draws outcomes from ``(seed, episode, i)``, identically for all arms.
    ``model_registry`` maps arm names (or ``"*"`` for all) to a trained model
    or to a scorer callable. ``on_episode(arm_name, episode)`` is called for
    every finished episode, scene by scene and arm by arm.
    """
    arms = _normalize_arms(arms)
    if len(arms) < 2:
        raise ConfigError("an A/B test needs at least two arms")
    if n_scenes < 1:
        raise ConfigError("n_scenes must be positive")
    scene_config = scene_config or SceneConfig()
    scorers = [_scorer_for(n, s, model_registry, config.eoat) for n, s in arms]
    totals = [[0, 0, 0, 0, 0] for _ in arms]
    digests = [hashlib.sha256() for _ in arms]
    for i in range(n_scenes):
        scene = generate_scene(scene_config, derive_seed(seed, "scene", i))
        ep_seed = derive_seed(seed, "episode", i)
        for k, ((name, spec), scorer) in enumerate(zip(arms, scorers)):
            ep = execute_episode(scene, spec, scorer, oracle, limits, ep_seed, None, config, i)
            t = totals[k]
            t[0] += len(ep.attempts)
            t[1] += ep.n_success
            t[2] += ep.n_holding_failure
            t[3] += ep.cleared_reason == PLANNING_FAILURE
            t[4] += ep.cleared_reason == ATTEMPT_CAP
            digests[k].update(json.dumps(ep.to_dict(), sort_keys=True).encode())
            if on_episode is not None:
                on_episode(name, ep)
    results = tuple(
        ArmResult(name, str(spec), n_scenes, *t, digests[k].hexdigest())
        for k, ((name, spec), t) in enumerate(zip(arms, totals))
    )
    pairs = []
    for a in range(len(results)):
        for b in range(a + 1, len(results)):
            ra, rb = results[a], results[b]
            if ra.attempts and rb.attempts:
                z, p = two_proportion_z(ra.holding_failures, ra.attempts,
                                        rb.holding_failures, rb.attempts)
            else:
                z, p = 0.0, 1.0
            pairs.append(PairTest(ra.name, rb.name, z, p))
    return ABReport(results, tuple(pairs), n_scenes, seed)
