import numpy as np

from ladderflow import autodiff as ad
from ladderflow import bench, flow
from ladderflow.autodiff import Param, Tensor
from ladderflow.dit import Dit, DitConfig
from ladderflow.gradcheck import grad_check
from ladderflow.rng import stream
from ladderflow.verify import check_end_to_end, check_primitives


def test_quadratic_analytic_matches_difference():
    x = Param(np.array([3.0]), "x")
    report = grad_check(lambda: ad.sum_all(ad.mul(x, x)), [x], coords_per_param=1)
    assert report.ok
    assert abs(report.worst.analytic - 6.0) < 1e-8
    assert abs(report.worst.numeric - 6.0) < 1e-6


def test_negative_control_sign_flip_is_caught():
    x = Param(np.array([1.5, -0.5]), "flipped")

    def f():
        # correct value, deliberately wrong (sign-flipped) gradient
        out = Tensor(np.asarray((x.data ** 2).sum()),
                     ((x, lambda g: -g * 2 * x.data),))
        return out

    report = grad_check(f, [x], coords_per_param=2)
    assert not report.ok
    assert report.failures
    assert report.failures[0].name == "flipped"
    assert "FAIL" in str(report)


def test_one_layer_dit_flow_loss_passes():
    dit = Dit(DitConfig(n=1, d_dit=16, heads=2, img_side=8, patch=4, t_embed_dim=8), seed=5)
    rng = stream(5, "gc-dit")
    cond = rng.normal(0, 0.5, size=(1, 4, 16)).astype(np.float32)
    spec = bench.SceneSpec((bench.SceneObject("circle", "red", (0, 1)),), canvas=8)
    sample = flow.make_flow_sample(bench.render(spec)[None], stream(5, "gc-flow"))

    def f():
        v = dit.forward(sample.x_t, sample.t, [ad.tensor(cond)])
        return flow.fm_loss(v, sample)

    report = grad_check(f, dit.params(), tol=1e-3, coords_per_param=8)
    assert report.ok, str(report)


def test_all_layer_primitives_pass():
    for name, report in check_primitives():
        assert report.ok, f"{name}: {report}"


def test_full_ladder_end_to_end_passes():
    report = check_end_to_end(tol=1e-3, coords=16)
    assert report.ok, str(report)
    assert report.checked >= 16
