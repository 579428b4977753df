import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geosampler.village import (
    CovariateSchema,
    CovariateSet,
    HouseRecord,
    VillageError,
    build_frame,
    default_schema_path,
    derive_density,
    derive_distance_to_perimeter,
    load_village,
    standardize,
    write_village_csv,
)

from conftest import make_frame


# ---------------------------------------------------------------------------
# standardize


def test_standardize_simple():
    scaled, mean, sd = standardize([1.0, 2.0, 3.0])
    assert np.allclose(scaled, [-1.0, 0.0, 1.0])
    assert mean == 2.0 and sd == 1.0


def test_standardize_constant_column_maps_to_zero():
    scaled, mean, sd = standardize([5.0, 5.0, 5.0])
    assert np.all(scaled == 0.0)
    assert mean == 5.0 and sd == 0.0


def test_standardize_empty_errors():
    with pytest.raises(VillageError):
        standardize([])


@given(
    st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40).filter(
        lambda xs: max(xs) - min(xs) > 1e-6
    )
)
@settings(max_examples=60, deadline=None)
def test_standardize_round_trip(values):
    scaled, mean, sd = standardize(values)
    assert sd > 0
    back = scaled * sd + mean
    assert np.max(np.abs(back - np.asarray(values))) < 1e-12 * max(
        1.0, np.max(np.abs(values))
    )


def test_standardize_idempotent():
    rng = np.random.default_rng(0)
    col = rng.normal(3.0, 2.5, 50)
    once, _, _ = standardize(col)
    twice, mean2, sd2 = standardize(once)
    assert np.max(np.abs(twice - once)) < 1e-9
    assert abs(mean2) < 1e-12 and abs(sd2 - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# density


def test_density_isolated_house():
    counts = derive_density(np.array([[0.0, 0.0], [150.0, 0.0], [300.0, 0.0]]))
    assert counts.tolist() == [0.0, 0.0, 0.0]


def test_density_complete_triangle():
    counts = derive_density(np.array([[0.0, 0.0], [50.0, 0.0], [25.0, 43.3]]))
    assert counts.tolist() == [2.0, 2.0, 2.0]


def test_density_boundary_is_closed():
    counts = derive_density(np.array([[0.0, 0.0], [100.0, 0.0]]))
    assert counts.tolist() == [1.0, 1.0]


def test_density_matches_brute_force():
    rng = np.random.default_rng(202)
    coords = rng.uniform(0.0, 400.0, (100, 2))
    counts = derive_density(coords)
    for i in range(100):
        expected = 0
        for j in range(100):
            if i == j:
                continue
            if math.dist(coords[i], coords[j]) <= 100.0:
                expected += 1
        assert counts[i] == expected


def test_density_symmetry():
    rng = np.random.default_rng(7)
    coords = rng.uniform(0.0, 300.0, (40, 2))
    d = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
    within = d <= 100.0
    assert np.array_equal(within, within.T)


# ---------------------------------------------------------------------------
# distance to perimeter


def test_perimeter_hull_vertex_gets_offset_exactly():
    coords = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0], [20.0, 20.0]])
    dist = derive_distance_to_perimeter(coords)
    assert dist[0] == 50.0 and dist[1] == 50.0 and dist[2] == 50.0
    assert dist[3] > 50.0


def test_perimeter_triangle_centroid_inradius():
    # equilateral triangle, side 100; centroid sits inradius = side/(2 sqrt 3)
    # from every edge -> 50 + 28.867513459481287
    side = 100.0
    pts = np.array(
        [
            [0.0, 0.0],
            [side, 0.0],
            [side / 2.0, side * math.sqrt(3) / 2.0],
        ]
    )
    centroid = pts.mean(axis=0, keepdims=True)
    dist = derive_distance_to_perimeter(np.vstack([pts, centroid]))
    assert dist[3] == pytest.approx(78.86751345948129, abs=1e-9)


def test_perimeter_matches_dense_boundary_oracle():
    rng = np.random.default_rng(31)
    coords = rng.uniform(0.0, 500.0, (60, 2))
    dist = derive_distance_to_perimeter(coords)

    from scipy.spatial import ConvexHull

    hull = ConvexHull(coords)
    verts = coords[hull.vertices]
    boundary = []
    for k in range(len(verts)):
        a, b = verts[k], verts[(k + 1) % len(verts)]
        ts = np.linspace(0.0, 1.0, 20000)[:, None]
        boundary.append(a + ts * (b - a))
    boundary = np.vstack(boundary)
    for i in range(60):
        oracle = np.min(np.linalg.norm(boundary - coords[i], axis=1)) + 50.0
        assert abs(dist[i] - oracle) < 1e-4


def test_perimeter_collinear_fallback_is_total():
    coords = np.array([[0.0, 0.0], [0.0, 100.0], [0.0, 200.0]])
    dist = derive_distance_to_perimeter(coords)
    # all points lie on the degenerate hull segment
    assert np.allclose(dist, 50.0)


def test_perimeter_lower_bound_and_hull_equality():
    rng = np.random.default_rng(99)
    coords = rng.uniform(0.0, 500.0, (50, 2))
    dist = derive_distance_to_perimeter(coords)
    assert np.all(dist >= 50.0)
    from scipy.spatial import ConvexHull

    hull_idx = set(ConvexHull(coords).vertices.tolist())
    for i in range(50):
        if i in hull_idx:
            assert dist[i] == pytest.approx(50.0, abs=1e-9)


# ---------------------------------------------------------------------------
# frame construction


def test_collinear_village_scaling(collinear3):
    assert collinear3.diameter_m == 200.0
    assert np.allclose(sorted(collinear3.scaled_coords[:, 1]), [0.0, 0.5, 1.0])
    assert np.allclose(collinear3.scaled_coords[:, 0], 0.0)


def test_scaled_diameter_is_one_and_rigid_motion_invariant(random_frame):
    coords = random_frame.scaled_coords
    d = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
    assert abs(d.max() - 1.0) < 1e-9

    raw = random_frame.raw_coords()
    theta = 0.71
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    moved = raw @ rot.T + np.array([1234.5, -987.0])
    frame2 = make_frame(moved)
    assert frame2.diameter_m == pytest.approx(random_frame.diameter_m, rel=1e-12)
    coords2 = frame2.scaled_coords
    d2 = np.sqrt(((coords2[:, None] - coords2[None]) ** 2).sum(-1))
    assert abs(d2.max() - 1.0) < 1e-9


def test_design_matrix_columns_standardized(random_frame):
    x = random_frame.design_matrix
    assert np.allclose(x[:, 0], 1.0)
    for j, stat in enumerate(random_frame.covariate_stats):
        if stat.scaled and not stat.constant:
            assert abs(x[:, j].mean()) < 1e-9
            assert abs(x[:, j].std(ddof=1) - 1.0) < 1e-9


def test_constant_covariate_flagged_and_zeroed():
    schema = CovariateSchema(continuous=("flat",))
    covs = [{"flat": 7} for _ in range(5)]
    rng = np.random.default_rng(1)
    frame = make_frame(
        rng.uniform(0, 100, (5, 2)), covariates=covs, schema=schema,
        selector=CovariateSet.ALL,
    )
    j = frame.column_names.index("flat")
    assert frame.covariate_stats[j].constant
    assert np.all(frame.design_matrix[:, j] == 0.0)


def test_categorical_one_hot_alphabetical_reference():
    schema = CovariateSchema(categorical={"wall": ("clay", "brick", "adobe")})
    covs = [{"wall": w} for w in ("adobe", "brick", "clay", "clay")]
    frame = make_frame(
        [(0, 0), (10, 0), (0, 10), (10, 10)], covariates=covs, schema=schema,
        selector=CovariateSet.ALL,
    )
    # adobe is the alphabetical reference; brick and clay get indicators
    assert "wall[brick]" in frame.column_names
    assert "wall[clay]" in frame.column_names
    assert "wall[adobe]" not in frame.column_names
    jb = frame.column_names.index("wall[brick]")
    jc = frame.column_names.index("wall[clay]")
    assert frame.design_matrix[:, jb].tolist() == [0.0, 1.0, 0.0, 0.0]
    assert frame.design_matrix[:, jc].tolist() == [0.0, 0.0, 1.0, 1.0]


def test_unknown_categorical_level_rejected():
    schema = CovariateSchema(categorical={"wall": ("adobe", "brick")})
    covs = [{"wall": "straw"}, {"wall": "adobe"}]
    with pytest.raises(VillageError, match="straw"):
        make_frame([(0, 0), (1, 1)], covariates=covs, schema=schema,
                   selector=CovariateSet.ALL)


def test_duplicate_id_rejected():
    houses = [
        HouseRecord(id="a", x_m=0.0, y_m=0.0),
        HouseRecord(id="a", x_m=1.0, y_m=1.0),
    ]
    with pytest.raises(VillageError, match="duplicate"):
        build_frame(houses, CovariateSchema(), CovariateSet.GLOBAL_ONLY)


def test_single_house_rejected():
    with pytest.raises(VillageError):
        build_frame(
            [HouseRecord(id="a", x_m=0.0, y_m=0.0)],
            CovariateSchema(),
            CovariateSet.GLOBAL_ONLY,
        )


def test_global_only_has_exactly_three_columns(random_frame):
    assert random_frame.column_names == ("intercept", "density", "dist_perimeter")


# ---------------------------------------------------------------------------
# CSV round trip


def test_csv_round_trip(tmp_path):
    schema = CovariateSchema(
        continuous=("n_dogs",), categorical={"wall": ("adobe", "brick")}
    )
    rng = np.random.default_rng(4)
    houses = [
        HouseRecord(
            id=f"h{i}", x_m=float(rng.uniform(0, 300)), y_m=float(rng.uniform(0, 300)),
            covariates={"n_dogs": int(rng.integers(0, 5)), "wall": "adobe" if i % 2 else "brick"},
            true_status=int(rng.random() < 0.3),
        )
        for i in range(12)
    ]
    path = tmp_path / "village.csv"
    write_village_csv(houses, schema, path)
    assert default_schema_path(path).exists()

    frame = load_village(path, CovariateSet.ALL)
    assert frame.n == 12
    assert frame.true_status is not None
    direct = build_frame(houses, schema, CovariateSet.ALL)
    assert np.allclose(frame.design_matrix, direct.design_matrix)
    assert frame.diameter_m == pytest.approx(direct.diameter_m)


def test_load_drops_rows_with_missing_values(tmp_path):
    path = tmp_path / "v.csv"
    path.write_text(
        "id,x_m,y_m,status\n"
        "a,0,0,unknown\n"
        "b,,10,unknown\n"
        "c,10,10,infested\n",
        encoding="utf-8",
    )
    with pytest.warns(UserWarning, match="dropped 1"):
        frame = load_village(path, CovariateSet.GLOBAL_ONLY)
    assert frame.n == 2
    assert frame.ids == ("a", "c")


def test_load_rejects_non_numeric_coordinate(tmp_path):
    path = tmp_path / "v.csv"
    path.write_text("id,x_m,y_m\na,zero,0\nb,1,1\n", encoding="utf-8")
    with pytest.raises(VillageError, match="non-numeric"):
        load_village(path, CovariateSet.GLOBAL_ONLY)


def test_load_el_amatillo_size(tmp_path):
    # village of 172 rows still produces a 172-row design matrix
    rng = np.random.default_rng(172)
    schema = CovariateSchema(continuous=("c1",))
    houses = [
        HouseRecord(
            id=f"h{i:03d}", x_m=float(rng.uniform(0, 900)),
            y_m=float(rng.uniform(0, 900)), covariates={"c1": float(rng.poisson(3))},
        )
        for i in range(172)
    ]
    path = tmp_path / "amatillo.csv"
    write_village_csv(houses, schema, path, include_true_status=False)
    frame = load_village(path, CovariateSet.ALL)
    assert frame.design_matrix.shape[0] == 172
