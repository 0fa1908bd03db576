import numpy as np
import pytest

from hairsplat.codec import decode_strand, encode_strand
from hairsplat.errors import ShapeError
from hairsplat.hairmap import (
    PcaHairMap,
    decode_local,
    decode_map,
    project_dataset,
    root_grid,
    texel_uv,
    upsample_guides,
    upsample_matrix,
)
from hairsplat.scalp import scalp_point


def random_map(rng, basis, shape, frac=0.6):
    coeffs = rng.normal(size=shape + (basis.num_components,)) * basis.stddev
    bald = (rng.uniform(size=shape) < frac).astype(float)
    return PcaHairMap(coeffs, bald)


def test_all_bald_map_has_no_strands(basis, head):
    pca = PcaHairMap(np.zeros((4, 4, 64)), np.zeros((4, 4)))
    hair = decode_map(pca, basis, root_grid(head, 4, 4))
    assert hair.strands().shape == (0, basis.L, 3)


def test_single_texel_mean_strand(basis, head):
    bald = np.zeros((4, 4))
    bald[1, 2] = 1
    roots = root_grid(head, 4, 4)
    hair = decode_map(PcaHairMap(np.zeros((4, 4, 64)), bald), basis, roots)
    (s,) = hair.strands()
    mean = basis.mean_strand()
    expected = (mean - mean[0]) @ roots.frames[1, 2].T + roots.positions[1, 2]
    assert np.allclose(s, expected, atol=1e-12)


def test_decode_map_matches_texel_loop(basis, head, rng):
    pca = random_map(rng, basis, (8, 8))
    roots = root_grid(head, 8, 8)
    hair = decode_map(pca, basis, roots)
    for i in range(8):
        for j in range(8):
            if pca.baldness[i, j] < 0.5:
                assert np.all(hair.points[i, j] == 0)
                continue
            local = decode_strand(pca.coeffs[i, j], basis)
            local = local - local[0]
            world = np.array([roots.frames[i, j] @ p + roots.positions[i, j] for p in local])
            assert np.max(np.abs(hair.points[i, j] - world)) < 1e-10


def test_roots_anchored_on_scalp(basis, head, rng):
    pca = random_map(rng, basis, (8, 8))
    roots = root_grid(head, 8, 8)
    hair = decode_map(pca, basis, roots)
    err = np.linalg.norm(hair.points[hair.active][:, 0] - roots.positions[hair.active], axis=-1)
    assert err.max() < 1e-6


def test_decode_superposition(basis, head, rng):
    roots = root_grid(head, 4, 4)
    ones = np.ones((4, 4))
    a = rng.normal(size=(4, 4, 64)) * basis.stddev
    b = rng.normal(size=(4, 4, 64)) * basis.stddev
    pa = decode_map(PcaHairMap(a, ones), basis, roots).points
    pb = decode_map(PcaHairMap(b, ones), basis, roots).points
    pab = decode_map(PcaHairMap(a + b, ones), basis, roots).points
    p0 = decode_map(PcaHairMap(0 * a, ones), basis, roots).points
    assert np.max(np.abs(pab - (pa + pb - p0))) < 1e-9


def test_decode_map_shape_errors(basis, head):
    with pytest.raises(ShapeError):
        decode_map(PcaHairMap(np.zeros((4, 4, 10)), np.ones((4, 4))), basis, root_grid(head, 4, 4))
    with pytest.raises(ShapeError):
        decode_map(PcaHairMap(np.zeros((4, 4, 64)), np.ones((4, 4))), basis, root_grid(head, 5, 4))


def _world_strand(basis, head, uv, gamma):
    pos, frame = scalp_point(head, *uv)
    local = decode_local(gamma, basis)
    return local @ frame.T + pos


def test_project_single_strand(basis, head):
    s = _world_strand(basis, head, (0.5, 0.5), np.zeros(64))
    pca = project_dataset(s[None], [[0.5, 0.5]], basis, head, (64, 64))
    assert np.argwhere(pca.active()).tolist() == [[32, 32]]


def test_project_tie_break_lower_index(basis, head, rng):
    g = rng.normal(size=(2, 64)) * basis.stddev
    uv = [0.3, 0.7]
    strands = np.stack([_world_strand(basis, head, uv, gi) for gi in g])
    pca = project_dataset(strands, [uv, uv], basis, head, (16, 16))
    (r, c), = np.argwhere(pca.active())
    local = strands[0] - strands[0][0]
    roots = root_grid(head, 16, 16)
    expected = local @ roots.frames[r, c]
    assert np.allclose(pca.coeffs[r, c], encode_strand(expected, basis))


def test_project_occupancy_matches_hash_grid(basis, head, rng):
    n = 1000
    uvs = rng.uniform(0, 1, size=(n, 2))
    strands = np.repeat(basis.mean_strand()[None], n, axis=0)
    pca = project_dataset(strands, uvs, basis, head, (64, 64))
    occupied = set()
    for u, v in uvs:
        occupied.add((int(v * 64), int(u * 64)))
    assert int(pca.active().sum()) == len(occupied)
    for r, c in occupied:
        assert pca.baldness[r, c] == 1


def test_project_nearest_to_centre_wins(basis, head, rng):
    g = rng.normal(size=(2, 64)) * basis.stddev
    centre = texel_uv(8, 8)[3, 5]
    uvs = np.array([centre + [0.03, 0.0], centre + [0.01, 0.01]])
    strands = np.stack([_world_strand(basis, head, uv, gi) for uv, gi in zip(uvs, g)])
    pca = project_dataset(strands, uvs, basis, head, (8, 8))
    roots = root_grid(head, 8, 8)
    local = (strands[1] - strands[1][0]) @ roots.frames[3, 5]
    assert np.allclose(pca.coeffs[3, 5], encode_strand(local, basis))


def test_project_empty_is_bald(basis, head):
    pca = project_dataset(np.zeros((0, basis.L, 3)), np.zeros((0, 2)), basis, head, (8, 8))
    assert not pca.active().any()


def test_upsample_uniform_field(basis, head, rng):
    g = rng.normal(size=64) * basis.stddev
    pca = PcaHairMap(np.tile(g, (8, 8, 1)), np.ones((8, 8)))
    hair = decode_map(pca, basis, root_grid(head, 8, 8))
    up = upsample_guides(hair, (32, 32), 0.3)
    local = up.local_points()
    assert np.max(np.abs(local - local[0, 0])) < 1e-12


def test_upsample_nearest_weight_one_replicates(basis, head, rng):
    pca = random_map(rng, basis, (8, 8))
    hair = decode_map(pca, basis, root_grid(head, 8, 8))
    up = upsample_guides(hair, (16, 16), 1.0)
    guide_local = hair.local_points()
    up_local = up.local_points()
    for i in range(16):
        for j in range(16):
            if up.active[i, j]:
                assert np.allclose(up_local[i, j], guide_local[i // 2, j // 2], atol=1e-12)


def test_upsample_counts_and_anchoring(basis, head, rng):
    active = rng.uniform(size=(64, 64)) < 0.4
    mat, out_active = upsample_matrix(active, (256, 256))
    assert int(out_active.sum()) == 16 * int(active.sum())
    rows = np.asarray(mat.sum(axis=1)).ravel().reshape(256, 256)
    assert np.allclose(rows[out_active], 1.0)
    assert np.all(rows[~out_active] == 0)
    # only active guides are referenced
    used = np.unique(mat.indices)
    assert np.all(active.ravel()[used])


def test_upsample_convex_combination(basis, head, rng):
    pca = random_map(rng, basis, (8, 8), frac=0.7)
    hair = decode_map(pca, basis, root_grid(head, 8, 8))
    mat, _ = upsample_matrix(hair.active, (32, 32), 0.5)
    assert mat.data.min() >= 0
    up = upsample_guides(hair, (32, 32), 0.5)
    err = np.linalg.norm(up.points[up.active][:, 0] - up.roots.positions[up.active], axis=-1)
    assert err.max() < 1e-6
    lo = hair.local_points()[hair.active].min(axis=0)
    hi = hair.local_points()[hair.active].max(axis=0)
    ul = up.local_points()[up.active]
    assert np.all(ul >= lo - 1e-12) and np.all(ul <= hi + 1e-12)


def test_upsample_rejects_non_multiple():
    with pytest.raises(ShapeError):
        upsample_matrix(np.ones((8, 8), bool), (20, 16))
