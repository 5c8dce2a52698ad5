"""Hidden ground-truth pick success function, outcome sampling and dataset streams.

The success probability is linear-logistic in the feature vector, plus a
per-material offset and a cap for picks with too few sealing cups. Datasets
are produced by clearing simulated scenes and logging every feasible
candidate pick with an outcome drawn from its true probability; failures
are kept and successes subsampled to reach the requested failure share.
"""

import gzip
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .eoat import CENTER, POLICIES, EoATModel, Pick, WorkcellLimits, feasible_mask, generate_candidates
from .errors import BudgetExhaustedError, CalibrationError, ConfigError, DataError, SchemaMismatchError
from .features import FEATURE_NAMES, INDEX, SCHEMA_VERSION, FeatureVector, check_schema, feature_matrix
from .perception import PerceptionConfig, perceive
from .scene import MATERIALS, SceneConfig, generate_scene, perturb_package, remove_package
from .seeding import derive_seed, rng_for

DATASET_FORMAT = "pickrank.dataset/1"
HOLDING = "holding"

# Invented defaults. Signs follow the stated correlations: flatter, larger,
# less occluded surfaces with more sealing cups succeed more often.
DEFAULT_WEIGHTS = {
    "package_height": -1.5,
    "plane_rms_residual": -150.0,
    "n_active_cups": 0.2,
    "alignment_angle": -3.0,
    "cup_plane_offset_mean": -300.0,
    "cup_plane_offset_max": -30.0,
    "inactive_clearance_mean": -3.0,
    "inactive_clearance_min": 0.0,
    "n_nearby_segments": -0.08,
    "adjacency_rank": -0.2,
    "n_neighbors": 0.0,
    "occlusion_level": -0.7,
    "visible_area": 6.0,
    "classification_score": 1.5,
    "material_rigid_box": 0.0,
    "material_polybag": 0.0,
    "material_envelope": 0.0,
    "dist_pick_to_centroid": -10.0,
    "dist_to_nearest_wall": 4.0,
    "tool_tilt": -2.0,
}
DEFAULT_MATERIAL_MODIFIERS = {"rigid_box": 0.0, "polybag": -0.6, "envelope": -0.3}


@dataclass(frozen=True)
class OracleParams:
    base_logit: float = 0.0
    weights: tuple = tuple(DEFAULT_WEIGHTS[n] for n in FEATURE_NAMES)
    material_modifiers: tuple = tuple(sorted(DEFAULT_MATERIAL_MODIFIERS.items()))
    hard_floor_cups: int = 2
    cap_value: float = 0.5
    drift_tag: str = "current"
    station_noise_std: float = 0.0  # per-station logit offset, hidden from features
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(v) for v in self.weights))
        object.__setattr__(
            self, "material_modifiers",
            tuple(sorted((str(k), float(v)) for k, v in dict(self.material_modifiers).items())),
        )
        if len(self.weights) != len(FEATURE_NAMES):
            raise ConfigError(f"need {len(FEATURE_NAMES)} weights, got {len(self.weights)}")
        if not 0.0 < self.cap_value < 1.0:
            raise ConfigError("cap_value must lie in (0, 1)")
        if self.station_noise_std < 0:
            raise ConfigError("station_noise_std must be non-negative")
        unknown = set(dict(self.material_modifiers)) - {m.value for m in MATERIALS}
        if unknown:
            raise ConfigError(f"unknown materials {sorted(unknown)}")

    def weight(self, name):
        return self.weights[INDEX[name]]

    def to_dict(self):
        return {
            "base_logit": self.base_logit,
            "weights": dict(zip(FEATURE_NAMES, self.weights)),
            "material_modifiers": dict(self.material_modifiers),
            "hard_floor_cups": self.hard_floor_cups,
            "cap_value": self.cap_value,
            "drift_tag": self.drift_tag,
            "station_noise_std": self.station_noise_std,
            "schema_version": self.schema_version,
        }

    @classmethod
    def from_dict(cls, doc):
        check_schema(doc["schema_version"])
        w = doc["weights"]
        return cls(
            float(doc["base_logit"]), tuple(w[n] for n in FEATURE_NAMES),
            tuple(doc["material_modifiers"].items()), int(doc["hard_floor_cups"]),
            float(doc["cap_value"]), doc["drift_tag"], float(doc.get("station_noise_std", 0.0)),
            doc["schema_version"],
        )


def with_weights(params, **named):
    """Copy of ``params`` with some weights replaced by name."""
    w = list(params.weights)
    for name, v in named.items():
        w[INDEX[name]] = float(v)
    return replace(params, weights=tuple(w))


def station_offset(params, station_id):
    if params.station_noise_std == 0.0 or station_id is None:
        return 0.0
    rng = rng_for(0, "station-offset", params.drift_tag, station_id)
    return float(rng.normal(0.0, params.station_noise_std))


def true_logit(params, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mods = dict(params.material_modifiers)
    m = np.array([mods.get(mat.value, 0.0) for mat in MATERIALS])
    onehot = X[:, [INDEX[f"material_{mat.value}"] for mat in MATERIALS]]
    return params.base_logit + X @ np.asarray(params.weights) + onehot @ m


def success_probs(params, X, station_ids=None):
    """Vectorized success probability for feature rows ``X`` (n, d)."""
    z = true_logit(params, X)
    if station_ids is not None and params.station_noise_std > 0:
        z = z + np.array([station_offset(params, s) for s in station_ids])
    p = 1.0 / (1.0 + np.exp(-z))
    capped = X_cups(X) < params.hard_floor_cups
    return np.where(capped, np.minimum(p, params.cap_value), p)


def X_cups(X):
    return np.atleast_2d(np.asarray(X, dtype=float))[:, INDEX["n_active_cups"]]


def true_success_prob(params, features, station_id=None):
    """Success probability of one pick from its FeatureVector."""
    check_schema(features.schema_version)
    if params.schema_version != features.schema_version:
        raise SchemaMismatchError("oracle and features use different schemas")
    ids = None if station_id is None else [station_id]
    return float(success_probs(params, features.values[None, :], ids)[0])


@dataclass(frozen=True)
class PickOutcome:
    success: bool
    true_prob: float
    failure_kind: str = None

    def __post_init__(self):
        if self.success == (self.failure_kind is not None):
            raise ConfigError("failure_kind is set exactly when the pick failed")

    def to_dict(self):
        return {"success": self.success, "true_prob": self.true_prob, "failure_kind": self.failure_kind}

    @classmethod
    def from_dict(cls, d):
        return cls(bool(d["success"]), float(d["true_prob"]), d.get("failure_kind"))


def outcome_from_uniform(prob, u):
    ok = bool(u < prob)
    return PickOutcome(ok, float(prob), None if ok else HOLDING)


def sample_outcome(prob, seed):
    """Bernoulli(prob) realization, deterministic per seed."""
    if not 0.0 <= prob <= 1.0:
        raise ConfigError(f"probability {prob} outside [0, 1]")
    u = np.random.default_rng(derive_seed(seed, "outcome")).random()
    return outcome_from_uniform(prob, u)


# -- induct stream ----------------------------------------------------------------

@dataclass(frozen=True)
class StreamConfig:
    """Simulation settings shared by dataset generation and calibration probes."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    eoat: EoATModel = field(default_factory=EoATModel)
    limits: WorkcellLimits = field(default_factory=WorkcellLimits)
    picks_per_segment: int = 16  # logged candidates per segment, denser than live ranking
    random_radius: float = 0.30
    n_stations: int = 8


@dataclass(frozen=True, eq=False)
class InductRecord:
    features: FeatureVector
    outcome: PickOutcome
    pick: Pick
    scene_id: int
    policy: str
    station_id: str
    timestamp_index: int

    def to_dict(self):
        return {
            "schema_version": self.features.schema_version,
            "features": self.features.values.tolist(),
            "outcome": self.outcome.to_dict(),
            "pick": self.pick.to_dict(),
            "scene_id": self.scene_id,
            "policy": self.policy,
            "station_id": self.station_id,
            "timestamp_index": self.timestamp_index,
        }

    @classmethod
    def from_dict(cls, d):
        check_schema(d["schema_version"])
        values = np.asarray(d["features"], dtype=float)
        values.setflags(write=False)
        return cls(
            FeatureVector(values, d["schema_version"]), PickOutcome.from_dict(d["outcome"]),
            Pick.from_dict(d["pick"]), int(d["scene_id"]), d["policy"], d["station_id"],
            int(d["timestamp_index"]),
        )


def stream_inducts(params, policy, seed, config=StreamConfig()):
    """Endless stream of simulated inducts, one record per feasible candidate pick.

    Each scene is cleared by executing one feasible pick per step (drawn
    uniformly, preferring unoccluded segments); that pick's logged outcome
    decides whether its package is removed or disturbed.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown pick policy {policy!r}")
    t = 0
    scene_id = 0
    while True:
        scene = generate_scene(config.scene, derive_seed(seed, "scene", scene_id))
        station = f"station-{scene_id % config.n_stations}"
        cap = 3 * len(scene)
        for step in range(cap):
            if len(scene) == 0:
                break
            products = perceive(scene, config.perception)
            cands = generate_candidates(
                products, policy, config.picks_per_segment, derive_seed(seed, "picks", scene_id, step),
                config.eoat, config.limits, config.random_radius,
            )
            mask = feasible_mask(cands.picks, scene, products.heightmap, config.limits, config.eoat)
            feasible = [p for p, ok in zip(cands.picks, mask) if ok]
            if not feasible:
                break
            X = feature_matrix(products, feasible, config.eoat)
            X.setflags(write=False)
            probs = success_probs(params, X, [station] * len(feasible))
            rng = rng_for(seed, "outcome", scene_id, step)
            u = rng.random(len(feasible))
            outcomes = [outcome_from_uniform(p, v) for p, v in zip(probs, u)]
            for k, pick in enumerate(feasible):
                yield InductRecord(FeatureVector(X[k]), outcomes[k], pick, scene_id, policy, station, t)
                t += 1
            level = products.graph.occlusion_level
            top = [k for k, p in enumerate(feasible) if level[p.segment_id] == 0] or range(len(feasible))
            top = list(top)
            chosen = top[int(rng.integers(0, len(top)))]
            pick = feasible[chosen]
            if outcomes[chosen].success:
                scene = remove_package(scene, pick.package_id)
            else:
                scene = perturb_package(scene, pick.package_id, derive_seed(seed, "perturb", scene_id, step))
        scene_id += 1


def calibrate_base_rate(params, policy=CENTER, target_rate=0.944, n_probe=20000, seed=0,
                        config=StreamConfig(), tol=0.005, max_steps=60):
    """Bisect ``base_logit`` so the mean probability over probe picks hits ``target_rate``."""
    if not 0.0 < target_rate < 1.0:
        raise ConfigError("target_rate must lie in (0, 1)")
    X = probe_features(policy, n_probe, seed, config)
    return calibrate_on_features(params, X, target_rate, tol, max_steps)


def probe_features(policy, n_probe, seed, config=StreamConfig()):
    """Feature rows of the first ``n_probe`` inducts of a probe stream (outcomes unused)."""
    rows = []
    # The stream's outcomes do not affect features until a pick is executed,
    # so a neutral oracle gives the same probe geometry for every candidate.
    for rec in stream_inducts(OracleParams(), policy, derive_seed(seed, "probe"), config):
        rows.append(rec.features.values)
        if len(rows) >= n_probe:
            break
    return np.array(rows)


def calibrate_on_features(params, X, target_rate, tol=0.005, max_steps=60):
    def mean_p(b):
        return float(success_probs(replace(params, base_logit=b), X).mean())

    lo, hi = -30.0, 30.0
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        m = mean_p(mid)
        if abs(m - target_rate) <= tol / 10.0:
            return replace(params, base_logit=mid)
        if m < target_rate:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    if abs(mean_p(mid) - target_rate) <= tol:
        return replace(params, base_logit=mid)
    raise CalibrationError(f"bisection did not reach {target_rate} within {max_steps} steps")


def default_oracle(seed=0, config=StreamConfig(), n_probe=20000):
    """Default weights with the base logit calibrated to a 0.944 center-policy success rate."""
    return calibrate_base_rate(OracleParams(), CENTER, 0.944, n_probe, seed, config)


ORACLE_FORMAT = "pickrank.oracle/1"


def oracle_to_json(params):
    doc = dict(params.to_dict(), format=ORACLE_FORMAT)
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def save_oracle(params, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(oracle_to_json(params))


def load_oracle(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read oracle file {path}: {exc}") from None
    if doc.get("format") != ORACLE_FORMAT:
        raise DataError(f"{path}: expected oracle format {ORACLE_FORMAT!r}")
    try:
        return OracleParams.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad oracle document: {exc}") from None


def make_past_oracle(params, drift_magnitude, seed):
    """Weights scaled by seeded multiplicative noise: w * (1 + drift * N(0, 1))."""
    if drift_magnitude < 0:
        raise ConfigError("drift_magnitude must be non-negative")
    rng = rng_for(seed, "drift")
    w = np.asarray(params.weights)
    new_w = w * (1.0 + drift_magnitude * rng.normal(size=w.size))
    mods = dict(params.material_modifiers)
    names = sorted(mods)
    noise = rng.normal(size=len(names))
    new_mods = {n: mods[n] * (1.0 + drift_magnitude * z) for n, z in zip(names, noise)}
    tag = f"{params.drift_tag}~drift({drift_magnitude:g},{seed})"
    return replace(params, weights=tuple(new_w), material_modifiers=tuple(new_mods.items()), drift_tag=tag)


# -- datasets -----------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetManifest:
    name: str
    n_success: int
    n_fail: int
    policy: str
    drift_tag: str
    seed: int
    fail_fraction: float = None
    n_streamed: int = 0
    schema_version: str = SCHEMA_VERSION

    def to_dict(self):
        return {
            "format": DATASET_FORMAT,
            "name": self.name,
            "n_success": self.n_success,
            "n_fail": self.n_fail,
            "policy": self.policy,
            "drift_tag": self.drift_tag,
            "seed": self.seed,
            "fail_fraction": self.fail_fraction,
            "n_streamed": self.n_streamed,
            "schema_version": self.schema_version,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != DATASET_FORMAT:
            raise DataError(f"expected dataset format {DATASET_FORMAT!r}")
        return cls(d["name"], int(d["n_success"]), int(d["n_fail"]), d["policy"], d["drift_tag"],
                   int(d["seed"]), d.get("fail_fraction"), int(d.get("n_streamed", 0)),
                   d["schema_version"])


class _Reservoir:
    """Uniform fixed-size sample of a stream (Algorithm R) with its own RNG."""

    def __init__(self, size, seed):
        self.size = size
        self.items = []
        self.seen = 0
        self.rng = np.random.default_rng(seed)

    def offer(self, item):
        self.seen += 1
        if len(self.items) < self.size:
            self.items.append(item)
            return
        j = int(self.rng.integers(0, self.seen))
        if j < self.size:
            self.items[j] = item


def generate_dataset(name, n_target, policy, fail_fraction=0.151, oracle=None, seed=0,
                     config=StreamConfig(), budget_factor=50):
    """Oversampled dataset of ``n_target`` inducts with the given failure share.

    The rarer class is kept in full up to its quota; the other is a uniform
    random subsample of everything streamed. Fails with BudgetExhaustedError
    when the stream runs past ``budget_factor * n_target`` inducts.
    """
    if n_target < 1:
        raise ConfigError("n_target must be positive")
    if not 0.0 < fail_fraction <= 0.5:
        raise ConfigError("fail_fraction must lie in (0, 0.5]")
    if oracle is None:
        raise ConfigError("generate_dataset needs oracle parameters")
    n_fail = int(round(fail_fraction * n_target))
    n_fail = min(max(n_fail, 1), n_target - 1) if n_target > 1 else n_fail
    n_succ = n_target - n_fail
    fails = _Reservoir(n_fail, derive_seed(seed, "keep-fail"))
    succs = _Reservoir(n_succ, derive_seed(seed, "keep-success"))
    budget = budget_factor * n_target
    streamed = 0
    for rec in stream_inducts(oracle, policy, seed, config):
        streamed += 1
        (succs if rec.outcome.success else fails).offer(rec)
        if fails.seen >= n_fail and succs.seen >= n_succ:
            break
        if streamed >= budget:
            raise BudgetExhaustedError(
                f"{streamed} inducts gave {fails.seen} failures and {succs.seen} successes; "
                f"need {n_fail} and {n_succ}"
            )
    records = sorted(fails.items + succs.items, key=lambda r: r.timestamp_index)
    manifest = DatasetManifest(name, len(succs.items), len(fails.items), policy, oracle.drift_tag,
                               seed, fail_fraction, streamed)
    return records, manifest


def generate_eval_dataset(name, n_records, policy, oracle, seed=0, config=StreamConfig()):
    """Plain (not oversampled) stream prefix, for held-out evaluation."""
    records = []
    for rec in stream_inducts(oracle, policy, seed, config):
        records.append(rec)
        if len(records) >= n_records:
            break
    n_fail = sum(not r.outcome.success for r in records)
    manifest = DatasetManifest(name, len(records) - n_fail, n_fail, policy, oracle.drift_tag, seed,
                               None, len(records))
    return records, manifest


def records_to_jsonl(records):
    return "".join(
        json.dumps(r.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"
        for r in records
    )


def save_dataset(records, manifest, path, manifest_path=None):
    """Write records as JSON lines (gzip when ``path`` ends in .gz) plus a JSON manifest."""
    text = records_to_jsonl(records).encode("utf-8")
    if str(path).endswith(".gz"):
        with open(path, "wb") as fh:
            with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(text)
    else:
        with open(path, "wb") as fh:
            fh.write(text)
    manifest_path = manifest_path or default_manifest_path(path)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest_path


def default_manifest_path(path):
    p = str(path)
    for suffix in (".jsonl.gz", ".jsonl", ".gz"):
        if p.endswith(suffix):
            return p[: -len(suffix)] + ".manifest.json"
    return p + ".manifest.json"


def load_dataset(path, manifest_path=None):
    manifest_path = manifest_path or default_manifest_path(path)
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = DatasetManifest.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot read dataset manifest {manifest_path}: {exc}") from None
    check_schema(manifest.schema_version)
    opener = gzip.open if str(path).endswith(".gz") else open
    records = []
    try:
        with opener(path, "rt", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                d = json.loads(line)
                if d.get("schema_version") != manifest.schema_version:
                    raise SchemaMismatchError(f"line {line_no}: schema differs from the manifest")
                records.append(InductRecord.from_dict(d))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    n_fail = sum(not r.outcome.success for r in records)
    if (len(records) - n_fail, n_fail) != (manifest.n_success, manifest.n_fail):
        raise DataError("record counts disagree with the manifest")
    return records, manifest


def dataset_arrays(records):
    """(X, y, true_prob) arrays for a list of records."""
    X = np.array([r.features.values for r in records], dtype=float).reshape(-1, len(FEATURE_NAMES))
    y = np.array([r.outcome.success for r in records], dtype=float)
    p = np.array([r.outcome.true_prob for r in records], dtype=float)
    return X, y, p


def logit(p):
    return math.log(p / (1.0 - p))
