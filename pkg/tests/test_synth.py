import numpy as np
import pytest

from hairsplat.codec import curvature, fit_basis
from hairsplat.hairmap import decode_map, root_grid
from hairsplat.losses import pen_loss
from hairsplat.render import RenderConfig, build_splats, reference_rasterize
from hairsplat.scalp import project
from hairsplat.synth import StrandStyle, gen_scene, gen_strand_corpus, perturb_hairstyle, sample_hairstyle


def test_zero_amplitude_is_straight():
    style = StrandStyle(amplitude=(0.0, 0.0), droop=(0.0, 0.0), frizz=0.0)
    s = gen_strand_corpus(3, 20, style, L=50)
    g, _ = curvature(s)
    assert np.max(g) < 1e-9


def test_corpus_deterministic():
    assert np.array_equal(gen_strand_corpus(5, 50), gen_strand_corpus(5, 50))
    assert not np.array_equal(gen_strand_corpus(5, 50), gen_strand_corpus(6, 50))


def test_curvature_grows_with_amplitude():
    means = []
    for amp in (0.0, 0.005, 0.01, 0.02, 0.04):
        style = StrandStyle(amplitude=(amp, amp), frizz=0.0)
        g, _ = curvature(gen_strand_corpus(11, 300, style))
        means.append(g.mean())
    assert np.all(np.diff(means) > 0)


def test_strands_rise_from_root():
    s = gen_strand_corpus(2, 500)
    assert np.all(s[:, 0] == 0)
    assert np.all(np.diff(s[..., 2], axis=1) > 0)


def test_hairstyle_within_clip_and_no_penetration(basis, head):
    pca = sample_hairstyle(4, basis, head, (12, 12))
    z = pca.coeffs / basis.stddev
    assert np.all(np.abs(z) <= 2.0 + 1e-12)
    from hairsplat.hairmap import root_grid

    hair = decode_map(pca, basis, root_grid(head, 12, 12))
    assert pen_loss(hair, head)[0] == 0.0
    assert 0 < pca.active().sum() < 144


def test_scene_self_consistent_and_deterministic(basis, head):
    a = gen_scene(7, head, (8, 8), basis, image=24)
    b = gen_scene(7, head, (8, 8), basis, image=24)
    assert np.array_equal(a.targets.silhouette, b.targets.silhouette)
    assert np.array_equal(a.hairstyle.coeffs, b.hairstyle.coeffs)
    hair = decode_map(a.hairstyle, basis, a.roots)
    again = reference_rasterize(build_splats(hair.strands(), a.config), a.camera, a.config)
    assert np.array_equal(again.silhouette, a.buffers.silhouette)
    assert a.targets.silhouette.max() > 0.5


def test_scene_camera_elevation_range(basis, head):
    for seed in range(6):
        sc = gen_scene(seed, head, (4, 4), basis, image=16, reference=False, elevation=(0.1, 0.4))
        direction = sc.camera.position - np.array([0.0, 0.0, -0.05])
        el = np.arcsin(direction[2] / np.linalg.norm(direction))
        assert 0.1 - 1e-9 <= el <= 0.4 + 1e-9
        _, _, valid = project(sc.camera, np.zeros(3))
        assert valid


def test_perturbation_only_active(basis, head):
    pca = sample_hairstyle(1, basis, head, (8, 8))
    noisy = perturb_hairstyle(pca, basis, 0.5, seed=3)
    assert np.array_equal(noisy.coeffs[~pca.active()], pca.coeffs[~pca.active()])
    assert not np.array_equal(noisy.coeffs[pca.active()], pca.coeffs[pca.active()])
