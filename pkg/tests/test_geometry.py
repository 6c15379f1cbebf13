import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heightbev.errors import DataError, InvalidCamera, InvalidQuery, NonPositiveDepth
from heightbev.geometry import (
    BoundQuery,
    CameraModel,
    depth_error_bound,
    height_error_bound,
    project,
    project_points,
    random_queries,
    rotation_about_y,
    unproject,
    verify_depth_bound,
    verify_height_bound,
)


def cam1000(**kw):
    args = dict(fx=1000.0, fy=1000.0, u0=500.0, v0=500.0, width=1000, height=1000)
    args.update(kw)
    return CameraModel(**args)


def test_project_principal_axis():
    assert project(cam1000(), (0, 0, 10)) == pytest.approx((500, 500, 10))


def test_project_offset_point():
    assert project(cam1000(), (1, 0, 10)) == pytest.approx((600, 500, 10))


def test_unproject_inverts_the_simple_cases():
    assert unproject(cam1000(), (500, 500, 10)) == pytest.approx((0, 0, 10))
    assert unproject(cam1000(), (600, 500, 10)) == pytest.approx((1, 0, 10))


def test_round_trip_many_points():
    rng = np.random.default_rng(0)
    for k in range(200):
        cam = cam1000(rotation=rotation_about_y(rng.uniform(-np.pi, np.pi)), translation=rng.normal(0, 2, 3))
        for _ in range(50):
            p = cam.to_world(np.array([rng.uniform(-20, 20), rng.uniform(-5, 5), rng.uniform(0.5, 80)]))
            back = unproject(cam, project(cam, p))
            assert np.max(np.abs(np.asarray(back) - p)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(
    x=st.floats(-50, 50),
    y=st.floats(-10, 10),
    z=st.floats(0.1, 100),
    yaw=st.floats(-math.pi, math.pi),
)
def test_round_trip_property(x, y, z, yaw):
    cam = cam1000(rotation=rotation_about_y(yaw))
    p = cam.to_world(np.array([x, y, z]))
    assert np.allclose(unproject(cam, project(cam, p)), p, atol=1e-9, rtol=0)


def test_vectorized_projection_matches_scalar():
    cam = cam1000(rotation=rotation_about_y(0.3), translation=(0.5, -1.0, 2.0))
    rng = np.random.default_rng(1)
    pts = rng.uniform(-10, 10, (40, 3))
    u, v, d = project_points(cam, pts)
    for k, p in enumerate(pts):
        if d[k] > 0:
            assert (u[k], v[k], d[k]) == pytest.approx(project(cam, p))
        else:
            assert np.isnan(u[k]) and np.isnan(v[k])


def test_point_behind_camera_raises():
    with pytest.raises(NonPositiveDepth):
        project(cam1000(), (0, 0, -1))
    with pytest.raises(NonPositiveDepth):
        unproject(cam1000(), (500, 500, 0))


@pytest.mark.parametrize(
    "kw",
    [dict(fx=0.0), dict(fy=-1.0), dict(u0=2000.0), dict(width=0), dict(rotation=np.diag([1.0, 1.0, 2.0]))],
)
def test_invalid_camera(kw):
    with pytest.raises(InvalidCamera):
        cam1000(**kw)


def test_calibration_round_trip(tmp_path):
    cam = cam1000(rotation=rotation_about_y(1.1), translation=(1, 2, 3))
    cam.save(tmp_path / "c.json")
    back = CameraModel.load(tmp_path / "c.json")
    assert back.to_dict() == cam.to_dict()


def test_bad_calibration_file(tmp_path):
    (tmp_path / "c.json").write_text('{"fx": 1}')
    with pytest.raises(DataError):
        CameraModel.load(tmp_path / "c.json")
    with pytest.raises(DataError):
        CameraModel.load(tmp_path / "missing.json")


# --- bounds -------------------------------------------------------------------


def q(u=500.0, v=500.0, depth=20.0, eps=0.512, **kw):
    return BoundQuery(cam1000(**kw), u, v, depth, eps)


def test_depth_bound_on_axis_is_eps():
    assert depth_error_bound(q()) == 0.512


def test_depth_bound_arithmetic():
    assert depth_error_bound(q(u=1500.0, width=2000)) == pytest.approx(0.256)


def test_height_bound_zero_offset():
    assert height_error_bound(q()) == 0.0


def test_height_bound_arithmetic():
    assert height_error_bound(q(v=1000.0, height=1200)) == pytest.approx(0.256)


def test_invalid_queries():
    with pytest.raises(InvalidQuery):
        q(eps=0.0)
    with pytest.raises(InvalidQuery):
        q(depth=-1.0)


def test_oracle_on_axis():
    assert verify_depth_bound(q()) == pytest.approx(0.512, rel=1e-4)
    assert verify_height_bound(q()) == 0.0


def test_oracle_reproduces_hand_examples():
    assert verify_depth_bound(q(u=1500.0, width=2000)) == pytest.approx(0.256, rel=0.01)
    assert verify_height_bound(q(v=1000.0, height=1200)) == pytest.approx(0.256, rel=0.01)


def test_oracle_needs_enough_steps():
    with pytest.raises(InvalidQuery):
        verify_depth_bound(q(), steps=10)


def test_oracle_brackets_analytic_on_sample():
    for query in random_queries(40, seed=3):
        for analytic, oracle in (
            (depth_error_bound(query), verify_depth_bound),
            (height_error_bound(query), verify_height_bound),
        ):
            emp = oracle(query)
            if analytic == 0:
                assert emp == 0
            else:
                assert 0.99 <= emp / analytic <= 1.0


@settings(max_examples=100, deadline=None)
@given(
    u=st.floats(0, 999),
    v=st.floats(0, 999),
    fy=st.floats(200, 3000),
    eps=st.floats(0.01, 5),
)
def test_bound_ratio_identity(u, v, fy, eps):
    query = q(u=u, v=v, eps=eps, fy=fy)
    expected = depth_error_bound(query) * abs(v - 500.0) / fy
    assert height_error_bound(query) == pytest.approx(expected, rel=1e-12, abs=1e-300)


@settings(max_examples=50, deadline=None)
@given(u=st.floats(0, 999), eps=st.floats(0.01, 5), scale=st.floats(0.1, 10))
def test_bounds_scale_linearly_with_eps(u, eps, scale):
    a = depth_error_bound(q(u=u, eps=eps))
    b = depth_error_bound(q(u=u, eps=eps * scale))
    assert b == pytest.approx(a * scale, rel=1e-12)
    assert a <= eps


def test_random_queries_deterministic():
    a = random_queries(5, seed=9)
    b = random_queries(5, seed=9)
    assert [(x.u_gt, x.v_gt, x.gt_depth, x.epsilon) for x in a] == [(x.u_gt, x.v_gt, x.gt_depth, x.epsilon) for x in b]
