import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from vmprior.body_model import default_body_spec, forward_kinematics
from vmprior.losses import (
    Keypoints2D,
    LossWeights,
    cap_terms,
    loss_2d,
    loss_3d,
    loss_cap,
    loss_kl,
    loss_limb,
    loss_recon,
    loss_vmp,
    vmp_terms,
    weighted_terms,
)
from vmprior.motion_prior import GaussianParams, MotionParams

D = torch.float64
T = 3


@pytest.fixture(scope="module")
def spec():
    return default_body_spec()


def random_params(rng, T=T, batch=()):
    R = np.stack([oracles.random_rotation(rng) for _ in range(int(np.prod(batch, dtype=int)) * T * 24)])
    pose = np.concatenate([R[:, :, 0], R[:, :, 1]], -1).reshape(*batch, T, 24, 6)
    return MotionParams(
        torch.as_tensor(rng.standard_normal((*batch, T, 3))),
        torch.as_tensor(pose + 0.05 * rng.standard_normal(pose.shape)),
        torch.as_tensor(0.5 * rng.standard_normal((*batch, 10))),
    )


def np_params(p):
    return [x.detach().numpy() for x in p]


@pytest.fixture(scope="module")
def pair():
    rng = np.random.default_rng(0)
    return random_params(rng), random_params(rng)


def gaussian(rng, n=8, batch=()):
    return GaussianParams(torch.as_tensor(rng.standard_normal((*batch, n))), torch.as_tensor(0.5 * rng.standard_normal((*batch, n))))


def keypoints(rng, T=T):
    pts = rng.uniform(-1, 1, (T, 24, 2))
    conf = rng.uniform(0, 1, (T, 24))
    conf[0, :3] = 0.5  # exactly at the threshold: excluded
    return pts, conf


class TestAgainstLoopOracles:
    @pytest.mark.parametrize("w_r,lam_theta", [(1.0, 1.0), (0.0, 1.0), (1.0, 2.5)])
    def test_loss_3d(self, pair, w_r, lam_theta):
        a, b = pair
        ours = float(loss_3d(a, b, LossWeights(lambda_theta=lam_theta), w_r))
        ref = oracles.loss_3d(*np_params(a), *np_params(b), w_r=w_r, lam_theta=lam_theta)
        assert abs(ours - ref) < 1e-8

    def test_loss_limb(self, pair, spec):
        a, b = pair
        ours = float(loss_limb(a, b, spec))
        ref = oracles.loss_limb(np_params(a)[1], np_params(a)[2], np_params(b)[1], np_params(b)[2], spec)
        assert abs(ours - ref) < 1e-8

    def test_loss_limb_ignores_root(self, pair, spec):
        a, b = pair
        shifted = MotionParams(b.root + 10.0, b.pose, b.shape)
        assert float(loss_limb(a, shifted, spec)) == float(loss_limb(a, b, spec))

    def test_loss_recon(self, pair, spec):
        a, b = pair
        ours = float(loss_recon(a, b, spec))
        ref = oracles.loss_recon(*np_params(a), *np_params(b), spec)
        assert abs(ours - ref) < 1e-8 * max(1.0, ref)

    def test_loss_kl(self):
        g = gaussian(np.random.default_rng(1))
        assert abs(float(loss_kl(g)) - oracles.loss_kl(g.mu.tolist(), g.log_var.tolist())) < 1e-12

    def test_loss_2d(self, pair, spec):
        rng = np.random.default_rng(2)
        _, b = pair
        pts, conf = keypoints(rng)
        ours = float(loss_2d(pts, conf, b.pose, b.shape, 0.8, [0.1, -0.2], spec))
        ref = oracles.loss_2d(pts, conf, b.pose.numpy(), b.shape.numpy(), 0.8, [0.1, -0.2], spec)
        assert abs(ours - ref) < 1e-8

    def test_loss_2d_with_root(self, pair, spec):
        rng = np.random.default_rng(3)
        _, b = pair
        pts, conf = keypoints(rng)
        ours = float(loss_2d(pts, conf, b.pose, b.shape, 0.8, [0.1, -0.2], spec, root=b.root))
        # the oracle places the root at the origin; shift the keypoints instead
        shifted = pts - 0.8 * b.root.numpy()[:, None, :2]
        ref = oracles.loss_2d(shifted, conf, b.pose.numpy(), b.shape.numpy(), 0.8, [0.1, -0.2], spec)
        assert abs(ours - ref) < 1e-8

    def test_batch_is_mean_of_clips(self, spec):
        rng = np.random.default_rng(4)
        a, b = random_params(rng, batch=(3,)), random_params(rng, batch=(3,))
        for fn in (lambda x, y: loss_3d(x, y), lambda x, y: loss_limb(x, y, spec), lambda x, y: loss_recon(x, y, spec)):
            per = [float(fn(MotionParams(*(t[i] for t in a)), MotionParams(*(t[i] for t in b)))) for i in range(3)]
            assert float(fn(a, b)) == pytest.approx(np.mean(per), rel=1e-12)


class TestWeightedSums:
    def test_vmp_sum(self, pair, spec):
        a, b = pair
        g = gaussian(np.random.default_rng(5))
        w = LossWeights(lambda_kl=0.3, lambda_lb=7.0, lambda_V=0.5)
        expected = (float(loss_3d(a, b, w)) + 7.0 * float(loss_limb(a, b, spec))
                    + 0.5 * float(loss_recon(a, b, spec)) + 0.3 * float(loss_kl(g)))
        assert abs(float(loss_vmp(a, b, g, spec, w)) - expected) < 1e-12 * max(1.0, expected)

    def test_cap_sum(self, pair, spec):
        a, b = pair
        rng = np.random.default_rng(6)
        g = gaussian(rng)
        pts, conf = keypoints(rng)
        w = LossWeights()
        vmp = float(loss_vmp(a, b, g, spec, w))
        l2d = float(loss_2d(pts, conf, b.pose, b.shape, 0.9, [0.0, 0.1], spec))
        total = float(loss_cap(a, b, g, (pts, conf), torch.tensor(0.9, dtype=D), torch.tensor([0.0, 0.1], dtype=D), spec, w))
        assert abs(total - (vmp + 100.0 * l2d)) < 1e-12 * max(1.0, total)

    def test_weighted_terms_add_up(self, pair, spec):
        a, b = pair
        g = gaussian(np.random.default_rng(7))
        w = LossWeights()
        terms = weighted_terms(vmp_terms(a, b, g, spec, 1.0, w), w)
        assert abs(float(sum(terms.values())) - float(loss_vmp(a, b, g, spec, w))) < 1e-12 * float(loss_vmp(a, b, g, spec, w))

    def test_lambda_2d_example(self, spec):
        """One confident keypoint displaced by 5 units with all other terms zero."""
        pose = torch.tensor([1.0, 0, 0, 0, 1, 0], dtype=D).repeat(2, 24, 1)
        p = MotionParams(torch.zeros(2, 3, dtype=D), pose, torch.zeros(10, dtype=D))
        joints = forward_kinematics(p.root, p.pose, p.shape, spec)[..., :2].numpy().copy()
        joints[1, 5, 0] += 5.0
        g = GaussianParams(torch.zeros(4, dtype=D), torch.zeros(4, dtype=D))
        total = loss_cap(p, p, g, (joints, np.ones((2, 24))), torch.tensor(1.0, dtype=D), torch.zeros(2, dtype=D), spec)
        assert float(total) == pytest.approx(500.0, abs=1e-9)

    def test_missing_3d_target_drops_3d_terms(self, pair, spec):
        _, b = pair
        rng = np.random.default_rng(8)
        g = gaussian(rng)
        pts, conf = keypoints(rng)
        terms = cap_terms(None, b, g, (pts, conf), torch.tensor(1.0, dtype=D), torch.zeros(2, dtype=D), spec)
        assert float(terms["l3d"]) == float(terms["llb"]) == float(terms["lv"]) == 0.0
        assert float(terms["lkl"]) == float(loss_kl(g))


class TestKL:
    def test_closed_form_matches_monte_carlo(self):
        rng = np.random.default_rng(9)
        mu = rng.normal(0, 0.7, 4)
        log_var = rng.normal(0, 0.4, 4)
        sigma = np.exp(0.5 * log_var)
        z = mu + sigma * rng.standard_normal((1_000_000, 4))
        log_q = -0.5 * (((z - mu) / sigma) ** 2 + log_var + math.log(2 * math.pi)).sum(1)
        log_p = -0.5 * (z**2 + math.log(2 * math.pi)).sum(1)
        mc = float((log_q - log_p).mean())
        closed = float(loss_kl(GaussianParams(torch.as_tensor(mu), torch.as_tensor(log_var))))
        assert abs(mc - closed) / closed < 0.01

    def test_zero_at_standard_normal(self):
        assert float(loss_kl(GaussianParams(torch.zeros(256), torch.zeros(256)))) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=16))
    def test_non_negative(self, pairs):
        mu, lv = zip(*pairs)
        assert float(loss_kl(GaussianParams(torch.tensor(mu, dtype=D), torch.tensor(lv, dtype=D)))) >= 0.0


class TestProperties:
    def test_identical_inputs_give_zero(self, pair, spec):
        a, _ = pair
        assert float(loss_3d(a, a)) == 0.0
        assert float(loss_limb(a, a, spec)) == 0.0
        assert float(loss_recon(a, a, spec)) == 0.0

    def test_confidence_threshold_is_strict(self, pair, spec):
        _, b = pair
        pts = np.full((T, 24, 2), 3.0)
        assert float(loss_2d(pts, np.full((T, 24), 0.5), b.pose, b.shape, 1.0, [0.0, 0.0], spec)) == 0.0
        assert float(loss_2d(pts, np.full((T, 24), 0.5 + 1e-9), b.pose, b.shape, 1.0, [0.0, 0.0], spec)) > 0.0

    def test_shape_mismatch_raises(self, pair, spec):
        a, b = pair
        short = MotionParams(b.root[:2], b.pose[:2], b.shape)
        with pytest.raises(ValueError):
            loss_3d(a, short)
        with pytest.raises(ValueError):
            loss_2d(np.zeros((T, 23, 2)), np.ones((T, 23)), b.pose, b.shape, 1.0, [0.0, 0.0], spec)

    def test_keypoint_validation(self):
        with pytest.raises(ValueError):
            Keypoints2D(np.zeros((2, 24, 2)), np.full((2, 24), 1.5))
        with pytest.raises(ValueError):
            Keypoints2D(np.zeros((2, 24, 3)), np.ones((2, 24)))


class TestGradients:
    """Finite-difference checks at random points (away from the zero-difference kinks)."""

    @pytest.fixture
    def point(self):
        rng = np.random.default_rng(10)
        a, b = random_params(rng, T=2), random_params(rng, T=2)
        return a, b

    @pytest.mark.parametrize("field", ["root", "pose", "shape"])
    def test_vmp_terms(self, point, spec, field):
        a, b = point
        for name, fn in {
            "l3d": lambda p: loss_3d(a, p),
            "llb": lambda p: loss_limb(a, p, spec),
            "lv": lambda p: loss_recon(a, p, spec),
        }.items():
            if name == "llb" and field == "root":
                continue

            def f(x):
                return fn(b._replace(**{field: x}))

            assert oracles.fd_rel_error(f, getattr(b, field)) < 1e-4, name

    def test_kl(self):
        g = gaussian(np.random.default_rng(11))
        assert oracles.fd_rel_error(lambda m: loss_kl(GaussianParams(m, g.log_var)), g.mu) < 1e-6
        assert oracles.fd_rel_error(lambda lv: loss_kl(GaussianParams(g.mu, lv)), g.log_var) < 1e-6

    def test_2d(self, point, spec):
        _, b = point
        pts, conf = keypoints(np.random.default_rng(12), T=2)
        s, c = torch.tensor(0.8, dtype=D), torch.tensor([0.1, -0.1], dtype=D)
        assert oracles.fd_rel_error(lambda p: loss_2d(pts, conf, p, b.shape, s, c, spec), b.pose) < 1e-4
        assert oracles.fd_rel_error(lambda x: loss_2d(pts, conf, b.pose, x, s, c, spec), b.shape) < 1e-4
        assert oracles.fd_rel_error(lambda x: loss_2d(pts, conf, b.pose, b.shape, x, c, spec), s) < 1e-4
        assert oracles.fd_rel_error(lambda x: loss_2d(pts, conf, b.pose, b.shape, s, x, spec), c) < 1e-4


class TestWeightsConfig:
    def test_defaults(self):
        assert LossWeights().to_dict() == {"lambda_kl": 1e-5, "lambda_lb": 100.0, "lambda_V": 1.0, "lambda_2d": 100.0, "lambda_theta": 1.0}

    def test_json_and_validation(self, tmp_path):
        path = tmp_path / "w.json"
        path.write_text(json.dumps({"loss_weights": {"lambda_lb": 3}}))
        assert LossWeights.from_json(path).lambda_lb == 3.0
        with pytest.raises(ValueError):
            LossWeights.from_dict({"lambda_bogus": 1.0})
        with pytest.raises(ValueError):
            LossWeights(lambda_kl=-1.0)


class TestHandExamples:
    def test_single_frame_pose_offset(self):
        rng = np.random.default_rng(13)
        a = random_params(rng, T=1)
        pose = a.pose.clone()
        pose[0, 0, 0] += 0.3
        assert float(loss_3d(a, a._replace(pose=pose))) == pytest.approx(0.3, abs=1e-15)

    def test_root_masked_when_rootless(self):
        rng = np.random.default_rng(14)
        a = random_params(rng)
        assert float(loss_3d(a, a._replace(root=a.root + 1.0), w_r=0.0)) == 0.0

    def test_head_rotation_leaves_limb_loss_zero(self, spec):
        rng = np.random.default_rng(15)
        a = random_params(rng)
        pose = a.pose.clone()
        pose[:, 15] = torch.tensor([0.0, 1, 0, -1, 0, 0], dtype=D)  # head: no wrist/ankle below it
        b = a._replace(pose=pose)
        assert float(loss_limb(a, b, spec)) == 0.0
        assert float(loss_recon(a, b, spec)) > 0.0
