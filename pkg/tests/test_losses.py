import numpy as np
import pytest
from conftest import TRIALS

from dest.data import synth_scene
from dest.geometry import SE3Transform, rodrigues
from dest.losses import C1, LossConfig, photometric_error, photometric_loss, smoothness, ssim
from dest.tensor import Tensor


def img(seed, shape=(1, 3, 16, 24)):
    return Tensor(np.random.default_rng(seed).uniform(size=shape), dtype=np.float64)


def depth_to_disp(depth, lo=0.1, hi=100.0):
    return (1.0 / depth - 1.0 / hi) / (1.0 / lo - 1.0 / hi)


def test_ssim_identical_is_one():
    a = img(0)
    np.testing.assert_allclose(ssim(a, a).data, 1.0, atol=1e-6)


def test_ssim_constant_images_closed_form():
    # zero variance and covariance: SSIM = (2*0*1 + C1) / (0 + 1 + C1)
    a = Tensor(np.zeros((1, 3, 8, 8)))
    b = Tensor(np.ones((1, 3, 8, 8)))
    np.testing.assert_allclose(ssim(a, b).data, C1 / (1 + C1), rtol=1e-5)
    assert C1 / (1 + C1) < 1e-3


def test_ssim_symmetric_and_bounded():
    a, b = img(1), img(2)
    np.testing.assert_array_equal(ssim(a, b).data, ssim(b, a).data)
    s = ssim(a, b).data
    assert np.all((s >= -1) & (s <= 1))


def test_photometric_error_alpha_zero_is_l1():
    a, b = img(3), img(4)
    np.testing.assert_allclose(photometric_error(a, b, 0.0).data[:, 0],
                               np.abs(a.data - b.data).mean(axis=1))


def test_identical_frames_leave_only_smoothness():
    frame = img(5)
    disp = Tensor(np.random.default_rng(6).uniform(0.1, 0.9, size=(1, 1, 16, 24)))
    poses = [SE3Transform.identity(1, np.float64)] * 2
    from dest.geometry import CameraIntrinsics
    terms = photometric_loss(frame, [frame, frame], disp, poses,
                             CameraIntrinsics.kitti_like(16, 24))
    assert abs(terms.photo.item()) < 1e-6
    assert terms.total.item() == pytest.approx(1e-3 * terms.smooth.item(), abs=1e-6)


def test_constant_disparity_has_no_smoothness():
    assert smoothness(Tensor(np.full((1, 1, 8, 8), 0.3)), img(7, (1, 3, 8, 8))).item() == 0.0


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(ssim_weight=1.5)
    with pytest.raises(ValueError):
        LossConfig(reprojection="median")
    with pytest.raises(ValueError):
        LossConfig(smoothness_weight=-1)


def test_mean_combine_not_below_min():
    s = synth_scene(0, 32, 96)
    args = ([Tensor(s.prev[None]), Tensor(s.nxt[None])],
            Tensor(depth_to_disp(s.gt_depth[None])), list(s.gt_poses), s.K)
    lo = photometric_loss(Tensor(s.cur[None]), *args, LossConfig(reprojection="min"))
    hi = photometric_loss(Tensor(s.cur[None]), *args, LossConfig(reprojection="mean"))
    assert lo.photo.item() <= hi.photo.item()


def test_loss_rejects_mismatched_inputs():
    frame = img(8)
    with pytest.raises(ValueError):
        photometric_loss(frame, [frame], Tensor(np.ones((1, 1, 16, 24))), [], None)
    with pytest.raises(ValueError):
        photometric_loss(frame, [frame], Tensor(np.ones((1, 1, 8, 12))),
                         [SE3Transform.identity()], None)


def rotate(T, degrees, axis):
    r = np.zeros((1, 3))
    r[0, axis] = np.deg2rad(degrees)
    dR = rodrigues(Tensor(r, dtype=np.float64)).data
    return SE3Transform.from_numpy(dR @ T.rotation.data, T.translation.data)


def test_pose_perturbation_increases_loss():
    for seed in range(TRIALS):
        s = synth_scene(seed)
        target = Tensor(s.cur[None])
        sources = [Tensor(s.prev[None]), Tensor(s.nxt[None])]
        disp = Tensor(depth_to_disp(s.gt_depth[None]))
        base = photometric_loss(target, sources, disp, list(s.gt_poses), s.K).total.item()
        bad = [rotate(T, 5.0, seed % 3) for T in s.gt_poses]
        perturbed = photometric_loss(target, sources, disp, bad, s.K).total.item()
        assert base < perturbed, seed
