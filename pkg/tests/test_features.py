import json

import numpy as np
import pytest
from conftest import box, fixed_scene
from hypothesis import given, settings
from hypothesis import strategies as st

from pickrank.eoat import RANDOM, EoATModel, Pick, WorkcellLimits, compute_active_cups, generate_candidates
from pickrank.errors import SchemaMismatchError
from pickrank.features import (
    FEATURE_NAMES, SCHEMA_VERSION, FeatureSchema, FeatureVector, check_schema, extract_features,
    feature_matrix, schema,
)
from pickrank.perception import perceive
from pickrank.scene import SceneConfig, generate_scene

EOAT = EoATModel()
SEGMENT_LEVEL = ("package_height", "plane_rms_residual", "alignment_angle", "n_nearby_segments",
                 "adjacency_rank", "n_neighbors", "occlusion_level", "visible_area",
                 "classification_score", "material_rigid_box", "material_polybag",
                 "material_envelope", "tool_tilt")


def placed_pick(products, seg_id, x, y, pid=0):
    seg, plane = products.segments[seg_id], products.planes[seg_id]
    raw = Pick(pid, seg_id, seg.package_id, (x, y, plane.z_at(x, y)), (0.0, 0.0, 1.0), 0.0, ())
    cups = compute_active_cups(raw, seg, plane, products.heightmap, EOAT)
    return Pick(pid, seg_id, seg.package_id, raw.point, raw.axis, 0.0, cups)


def test_centered_pick_on_lone_box():
    p = perceive(fixed_scene((box(0, 0.4, 0.4, 0.1), (0.8, 0.5))))
    f = extract_features(p, placed_pick(p, 0, 0.8, 0.5), EOAT)
    assert f["package_height"] == pytest.approx(0.1)
    assert f["plane_rms_residual"] == pytest.approx(0.0, abs=1e-15)
    assert f["n_active_cups"] == 8
    assert f["alignment_angle"] == pytest.approx(0.0, abs=1e-7)
    assert f["occlusion_level"] == 0
    assert f["adjacency_rank"] == 1
    assert f["dist_pick_to_centroid"] == pytest.approx(0.0, abs=1e-12)
    assert f["dist_to_nearest_wall"] == pytest.approx(0.5)
    assert f["material_rigid_box"] == 1.0
    assert f["inactive_clearance_mean"] == 0.0


def test_edge_pick_changes_only_pick_level_features():
    p = perceive(fixed_scene((box(0, 0.4, 0.4, 0.1), (0.8, 0.5))))
    center = extract_features(p, placed_pick(p, 0, 0.8, 0.5), EOAT)
    edge = extract_features(p, placed_pick(p, 0, 0.65, 0.5), EOAT)
    assert edge["n_active_cups"] < 8
    assert edge["dist_pick_to_centroid"] > 0
    assert edge["inactive_clearance_mean"] > 0
    for name in SEGMENT_LEVEL:
        assert edge[name] == center[name], name


def test_pick_on_lower_stacked_box():
    s = fixed_scene((box(0, 0.45, 0.4, 0.1), (0.8, 0.5)), (box(1, 0.15, 0.15, 0.1), (0.65, 0.5)))
    p = perceive(s)
    f = extract_features(p, placed_pick(p, 0, 0.9, 0.5), EOAT)
    assert f["occlusion_level"] == 1
    assert f["adjacency_rank"] == 2
    assert f["n_neighbors"] == 1
    assert f["classification_score"] < 1.0


def test_schema_contract(tmp_path):
    sc = schema()
    p = perceive(generate_scene(SceneConfig(), 1))
    cands = generate_candidates(p, RANDOM, 3, 0, EOAT, WorkcellLimits())
    assert sc.d == len(extract_features(p, cands.picks[0], EOAT).values)
    assert len(set(sc.names)) == sc.d
    back = FeatureSchema.from_dict(json.loads(json.dumps(sc.to_dict())))
    assert back == sc and back.names == FEATURE_NAMES


def test_schema_version_checks():
    check_schema(SCHEMA_VERSION)
    with pytest.raises(SchemaMismatchError):
        check_schema("pickfeat-0")
    with pytest.raises(SchemaMismatchError):
        FeatureVector(np.zeros(3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_matrix_rows_match_single_extraction_and_are_finite(seed):
    p = perceive(generate_scene(SceneConfig(), seed))
    picks = list(generate_candidates(p, RANDOM, 4, seed, EOAT, WorkcellLimits()).picks)
    X = feature_matrix(p, picks, EOAT)
    assert X.shape == (len(picks), schema().d)
    assert np.all(np.isfinite(X))
    for k in range(0, len(picks), 7):
        np.testing.assert_array_equal(X[k], extract_features(p, picks[k], EOAT).values)
    onehot = X[:, [FEATURE_NAMES.index(f"material_{m}") for m in ("rigid_box", "polybag", "envelope")]]
    assert np.all(onehot.sum(axis=1) == 1.0)
    assert np.all(X[:, FEATURE_NAMES.index("n_active_cups")] >= 1)
