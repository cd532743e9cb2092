import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caltok.camera import PinholeCamera, ray_map
from caltok.geometry import CameraPose, axis_angle, random_rotation, rotation_angle
from caltok.metrics import (DegenerateAlignment, MetricReport, SimilarityTransform, auc_pose, chamfer,
                            depth_metrics, fov_metrics, icp_refine, point_metrics, pose_angular,
                            read_reports_csv, scale_shift_fit, sequence_report, trajectory, umeyama,
                            write_aggregate_json, write_reports_csv)

seeds = st.integers(0, 2**32 - 1)


def _poses(rng, n):
    return [CameraPose(random_rotation(rng), rng.normal(size=3)) for _ in range(n)]


def _random_sim(rng):
    return SimilarityTransform(float(rng.uniform(0.3, 3.0)), random_rotation(rng), rng.normal(size=3))


# -- pose accuracy ------------------------------------------------------------------------------

def test_perfect_poses():
    p = _poses(np.random.default_rng(0), 4)
    assert pose_angular(p, p, 1.0) == (1.0, 1.0)
    assert auc_pose(p, p) == 1.0


@settings(max_examples=25)
@given(seeds)
def test_pose_accuracy_gauge_invariant(seed):
    rng = np.random.default_rng(seed)
    gt = _poses(rng, 4)
    pred = [CameraPose(random_rotation(rng) @ p.R if i == 2 else p.R, p.t + rng.normal(0, 0.3, 3))
            for i, p in enumerate(gt)]
    G = CameraPose(random_rotation(rng), rng.normal(size=3))
    moved = [G.compose(p) for p in pred]
    assert pose_angular(moved, gt) == pose_angular(pred, gt)
    assert abs(auc_pose(moved, gt) - auc_pose(pred, gt)) < 1e-12


def test_pose_accuracy_brute_force():
    rng = np.random.default_rng(1)
    gt = _poses(rng, 4)
    pred = [CameraPose(axis_angle(rng.normal(size=3), rng.uniform(0, 0.4)) @ p.R, p.t + rng.normal(0, 0.4, 3))
            for p in gt]
    rot_ok = trans_ok = 0
    for i, j in itertools.permutations(range(4), 2):
        Rp = pred[i].R.T @ pred[j].R
        Rg = gt[i].R.T @ gt[j].R
        c = (np.trace(Rg.T @ Rp) - 1) / 2
        rot_ok += math.degrees(math.acos(min(1.0, max(-1.0, c)))) <= 15
        tp = pred[i].R.T @ (pred[j].t - pred[i].t)
        tg = gt[i].R.T @ (gt[j].t - gt[i].t)
        ang = math.degrees(math.acos(np.clip(tp @ tg / np.linalg.norm(tp) / np.linalg.norm(tg), -1, 1)))
        trans_ok += ang <= 15
    rra, rta = pose_angular(pred, gt, 15.0)
    assert rra == rot_ok / 12 and rta == trans_ok / 12


def test_zero_translation_conventions():
    R = np.eye(3)
    gt = [CameraPose(R, np.zeros(3)), CameraPose(R, np.zeros(3))]
    assert pose_angular(gt, gt) == (1.0, 1.0)
    pred = [CameraPose(R, np.zeros(3)), CameraPose(R, np.array([1.0, 0, 0]))]
    assert pose_angular(pred, gt, 89.0)[1] == 0.0 and pose_angular(pred, gt, 90.0)[1] == 1.0
    with pytest.raises(ValueError):
        pose_angular(gt[:1], gt[:1])


def test_auc_two_pair_trapezoid_oracle():
    a = 12.5
    gt = [CameraPose.identity(), CameraPose(np.eye(3), np.array([1.0, 0, 0]))]
    pred = [gt[0], CameraPose(axis_angle([1, 0, 0], math.radians(a)), gt[1].t)]
    taus = np.linspace(0, 30, 2_000_001)
    curve = (taus >= a).astype(float)
    oracle = float(np.sum((curve[1:] + curve[:-1]) * 0.5 * np.diff(taus))) / 30
    assert abs(auc_pose(pred, gt) - oracle) < 1e-6
    assert abs(auc_pose(pred, gt) - (30 - a) / 30) < 1e-12


def test_auc_zero_when_all_errors_exceed_range():
    gt = [CameraPose.identity(), CameraPose(np.eye(3), np.array([1.0, 0, 0]))]
    pred = [gt[0], CameraPose(axis_angle([1, 0, 0], math.radians(31)), gt[1].t)]
    assert auc_pose(pred, gt) == 0.0


# -- trajectory ---------------------------------------------------------------------------------------

def test_trajectory_perfect_and_similarity():
    rng = np.random.default_rng(2)
    gt = _poses(rng, 5)
    assert trajectory(gt, gt) == pytest.approx((0, 0, 0), abs=1e-9)
    sim = _random_sim(rng)
    moved = [CameraPose(sim.R @ p.R, sim.apply(p.t[None])[0]) for p in gt]
    ate, rpet, rper = trajectory(moved, gt)
    assert ate < 1e-9 and rpet < 1e-9 and rper < 1e-6


def test_trajectory_three_frame_hand_case():
    I = np.eye(3)
    gt = [CameraPose(I, np.zeros(3)), CameraPose(I, np.array([1.0, 0, 0])), CameraPose(I, np.array([0, 1.0, 0]))]
    Rz = axis_angle([0, 0, 1], math.radians(10))
    pred = [gt[0], CameraPose(Rz, gt[1].t), gt[2]]
    ate, rpet, rper = trajectory(pred, gt)
    assert ate < 1e-12
    assert abs(rper - 10.0) < 1e-9
    d = 2 * math.sin(math.radians(5)) * math.sqrt(2)
    assert abs(rpet - math.sqrt(d * d / 2)) < 1e-12


# -- depth -------------------------------------------------------------------------------------------------

@settings(max_examples=25)
@given(st.floats(0.1, 10), st.floats(-2, 2), seeds)
def test_depth_affine_error_removed(a, b, seed):
    gt = np.random.default_rng(seed).uniform(1, 5, size=(2, 6, 6))
    rel, rmse, d1 = depth_metrics(a * gt + b, gt)
    assert rel < 1e-9 and rmse < 1e-9 and d1 == 1.0


def test_depth_delta_per_pixel_enumeration():
    gt = np.random.default_rng(3).uniform(1, 5, size=(4, 5))
    pred = gt.copy()
    pred[2, 3] *= 2
    A = np.array([[np.sum(pred * pred), np.sum(pred)], [np.sum(pred), pred.size]])
    rhs = np.array([np.sum(pred * gt), np.sum(gt)])
    a, b = np.linalg.solve(A, rhs)
    al = a * pred + b
    count = sum(max(p / g, g / p) < 1.25 for p, g in zip(al.ravel(), gt.ravel()))
    assert depth_metrics(pred, gt)[2] == count / gt.size


@settings(max_examples=25)
@given(seeds)
def test_scale_shift_normal_equations(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.uniform(0.5, 4, 50), rng.uniform(0.5, 4, 50)
    A = np.array([[p @ p, p.sum()], [p.sum(), 50.0]])
    ref = np.linalg.solve(A, [p @ g, g.sum()])
    assert np.allclose(scale_shift_fit(p, g), ref, atol=1e-9)


def test_depth_errors():
    with pytest.raises(ValueError):
        depth_metrics(np.ones(3), np.ones(3), np.zeros(3, bool))
    with pytest.raises(ValueError):
        depth_metrics(np.ones(3), np.array([1.0, 0.0, 1.0]))


# -- alignment ------------------------------------------------------------------------------------------------

def test_umeyama_identity_and_recovery():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(20, 3))
    I = umeyama(src, src)
    assert abs(I.s - 1) < 1e-12 and np.allclose(I.R, np.eye(3)) and np.allclose(I.t, 0, atol=1e-12)
    for _ in range(50):
        sim = _random_sim(rng)
        est = umeyama(src, sim.apply(src))
        assert abs(est.s - sim.s) < 1e-9 and np.max(np.abs(est.R - sim.R)) < 1e-9
        assert np.max(np.abs(est.t - sim.t)) < 1e-9


def test_umeyama_noisy_is_least_squares():
    rng = np.random.default_rng(5)
    src = rng.normal(size=(30, 3))
    dst = _random_sim(rng).apply(src) + rng.normal(0, 0.05, (30, 3))
    est = umeyama(src, dst)
    best = np.sum((est.apply(src) - dst) ** 2)
    for _ in range(1000):
        cand = SimilarityTransform(est.s * rng.uniform(0.9, 1.1),
                                   axis_angle(rng.normal(size=3), rng.normal(0, 0.05)) @ est.R,
                                   est.t + rng.normal(0, 0.05, 3))
        assert best <= np.sum((cand.apply(src) - dst) ** 2)


def test_umeyama_degenerate():
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateAlignment):
        umeyama(line, line)


def test_similarity_inverse():
    rng = np.random.default_rng(6)
    sim = _random_sim(rng)
    pts = rng.normal(size=(10, 3))
    assert np.max(np.abs(sim.inverse().apply(sim.apply(pts)) - pts)) < 1e-9


def _cloud(rng, n=300):
    # points on the faces of an irregular box: no symmetry for ICP to slip along
    dims = np.array([1.0, 0.7, 0.4])
    pts = rng.uniform(0, 1, (n, 3)) * dims
    face = rng.integers(0, 3, n)
    pts[np.arange(n), face] = np.where(rng.random(n) < 0.5, 0.0, dims[face])
    return pts


def test_icp_optimal_init_and_recovery():
    rng = np.random.default_rng(7)
    cloud = _cloud(rng)
    res = icp_refine(cloud, cloud)
    assert res.iterations <= 1 and res.residuals[-1] == 0.0
    R = axis_angle([0.3, 1.0, -0.2], math.radians(3))
    moved = cloud @ R.T
    res = icp_refine(moved, cloud, max_iters=100, tol=1e-14)
    assert np.max(np.abs(res.transform.apply(moved) - cloud)) < 1e-6
    assert all(b <= a for a, b in zip(res.residuals, res.residuals[1:]))


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_icp_residuals_never_increase(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(80, 3)), rng.normal(size=(90, 3))
    res = icp_refine(a, b)
    assert all(y <= x for x, y in zip(res.residuals, res.residuals[1:]))


# -- point metrics ---------------------------------------------------------------------------------------------

def test_chamfer_identical_and_outlier():
    rng = np.random.default_rng(8)
    gt = rng.normal(size=(50, 3))
    assert chamfer(gt, gt) == (0.0, 0.0, 0.0)
    out = np.array([[10.0, 0, 0]])
    dist = np.min(np.linalg.norm(gt - out, axis=1))
    acc, comp, cd = chamfer(np.concatenate([gt, out]), gt)
    assert comp == 0.0 and abs(acc - dist / 51) < 1e-12 and cd == pytest.approx((acc + comp) / 2)


@settings(max_examples=20, deadline=None)
@given(seeds, st.integers(1, 120), st.integers(1, 120))
def test_chamfer_brute_force(seed, n, m):
    rng = np.random.default_rng(seed)
    p, g = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    D = np.sqrt(((p[:, None] - g[None]) ** 2).sum(-1))
    acc, comp, _ = chamfer(p, g)
    assert abs(acc - D.min(1).mean()) < 1e-12 and abs(comp - D.min(0).mean()) < 1e-12


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_point_metrics_similarity_invariant(seed):
    rng = np.random.default_rng(seed)
    gt = _cloud(rng, 200)
    sim = _random_sim(rng)
    acc, comp, cd = point_metrics(sim.apply(gt), gt)
    assert cd < 1e-6


def test_point_metrics_empty():
    with pytest.raises(ValueError):
        point_metrics(np.zeros((0, 3)), np.zeros((3, 3)))


# -- field of view -----------------------------------------------------------------------------------------

def _pin(f):
    return PinholeCamera(f, f, 32.0, 32.0, 64, 64)


def test_fov_exact_rays():
    rays = [ray_map(_pin(32.0)).dirs] * 3
    assert fov_metrics(rays, rays) == (0.0, 0.0, 1.0)


def test_fov_constant_five_degree_error():
    f1 = 32.0
    half = math.atan(31.5 / f1)
    f2 = 31.5 / math.tan(half + math.radians(2.5))
    gt = [ray_map(_pin(f1)).dirs] * 4
    pred = [ray_map(_pin(f2)).dirs] * 4
    h, v, auc = fov_metrics(pred, gt)
    assert abs(h - 5) < 1e-9 and abs(v - 5) < 1e-9
    assert abs(auc - 0.5) < 1e-9


def test_fov_median_robust_to_one_bad_frame():
    gt = [ray_map(_pin(32.0)).dirs] * 9
    pred = list(gt)
    pred[4] = ray_map(_pin(10.0)).dirs
    h, v, auc = fov_metrics(pred, gt)
    assert h == 0.0 and v == 0.0 and abs(auc - 8 / 9) < 1e-12


# -- whole report -----------------------------------------------------------------------------------------

def _gt_sequence(rng, s=3):
    cam = _pin(32.0)
    rays = ray_map(cam).dirs
    out = {"rays": np.stack([rays] * s), "depth": rng.uniform(2, 4, (s, 64, 64)),
           "valid": np.ones((s, 64, 64), bool)}
    poses = [CameraPose(axis_angle([0, 1, 0], 0.1 * i), np.array([0.3 * i, 0, 0.1 * i])) for i in range(s)]
    out["R"] = np.stack([p.R for p in poses])
    out["t"] = np.stack([p.t for p in poses])
    return out


def test_report_perfect_and_rigid_invariant():
    rng = np.random.default_rng(9)
    gt = _gt_sequence(rng)
    rep = sequence_report(gt, gt, max_points=3000)
    v = rep.as_dict()
    assert v["RRA"] == v["RTA"] == v["AUC30"] == v["delta1"] == v["AUC_FoV"] == 1.0
    assert max(v["ATE"], v["RPEt"], v["Rel"], v["RMSE"], v["CD"], v["hErr"]) < 1e-6
    G = CameraPose(random_rotation(rng), rng.normal(size=3))
    pred = dict(gt)
    pred["R"] = np.stack([G.R @ R for R in gt["R"]])
    pred["t"] = np.stack([G.apply(t[None])[0] for t in gt["t"]])
    rep2 = sequence_report(pred, gt, max_points=3000)
    for k in ("RRA", "RTA", "AUC30", "Rel", "delta1", "hErr", "vErr", "AUC_FoV"):
        assert rep2.as_dict()[k] == pytest.approx(v[k], abs=1e-9)
    assert rep2.CD < 1e-6 and rep2.ATE < 1e-9


def test_report_columns_and_serialisation(tmp_path):
    assert len(MetricReport.columns()) == 15
    rep = MetricReport(*np.linspace(0, 1, 15))
    rows = [({"split": "test", "sequence": 0}, rep), ({"split": "test", "sequence": 1}, rep)]
    write_reports_csv(tmp_path / "r.csv", rows)
    back = read_reports_csv(tmp_path / "r.csv")
    assert len(back) == 2 and np.allclose(back[0][1].values(), rep.values())
    header = (tmp_path / "r.csv").read_text().splitlines()[0].split(",")
    assert header[2:] == MetricReport.columns()
    write_aggregate_json(tmp_path / "a.json", {"g": MetricReport.mean([rep, rep])})
    assert json.loads((tmp_path / "a.json").read_text())["g"]["CD"] == pytest.approx(rep.CD)


def test_rotation_angle_matches_acos():
    rng = np.random.default_rng(10)
    for _ in range(20):
        R = random_rotation(rng)
        ref = math.acos(np.clip((np.trace(R) - 1) / 2, -1, 1))
        assert abs(float(rotation_angle(R)) - ref) < 1e-7
