"""Perplexity calibration, exact t-SNE behavior, and projection export."""

import csv
import io

import numpy as np
import pytest
from PIL import Image

from voicemap import project


def entropy_bits(p):
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def three_clusters(n_per=20, dim=64, sigma=1.0, sep=10.0, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.zeros((3, dim))
    centers[0, 0] = 0.0
    centers[1, 0] = sep * sigma
    centers[2, 1] = sep * sigma
    data = np.concatenate([
        centers[k] + sigma * rng.standard_normal((n_per, dim))
        for k in range(3)])
    labels = np.repeat(np.arange(3), n_per)
    return data, labels


def nn_purity(points, labels):
    d = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d, np.inf)
    return float((labels[d.argmin(axis=1)] == labels).mean())


# ---------------------------------------------------- perplexity_search

def test_uniform_distances_give_exact_uniform_entropy():
    d = np.full(9, 3.7)
    p, beta = project.perplexity_search(d, 9.0)
    assert np.allclose(p, 1.0 / 9.0)
    assert entropy_bits(p) == pytest.approx(np.log2(9), abs=1e-12)
    assert beta > 0


def test_uniform_distances_cannot_hit_other_targets():
    with pytest.raises(project.PerplexityError, match="achieved entropy"):
        project.perplexity_search(np.full(9, 2.0), 4.0)


def test_two_point_row_has_zero_entropy():
    p, _ = project.perplexity_search(np.array([0.5]), 1.0)
    assert p.shape == (1,)
    assert p[0] == pytest.approx(1.0)
    assert entropy_bits(p) == 0.0


def test_search_hits_target_entropy_on_random_rows():
    rng = np.random.default_rng(4)
    for target in (2.0, 5.0, 12.0):
        d = rng.uniform(0.1, 8.0, size=40)
        p, _ = project.perplexity_search(d, target)
        assert p.min() >= 0.0
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert abs(entropy_bits(p) - np.log2(target)) <= project.PERPLEXITY_TOL


def test_larger_perplexity_needs_smaller_precision():
    rng = np.random.default_rng(5)
    d = rng.uniform(0.5, 4.0, size=30)
    _, beta_sharp = project.perplexity_search(d, 2.0)
    _, beta_flat = project.perplexity_search(d, 20.0)
    assert beta_flat < beta_sharp


def test_search_input_validation():
    with pytest.raises(project.PerplexityError):
        project.perplexity_search(np.array([]), 1.0)
    with pytest.raises(project.PerplexityError, match="outside"):
        project.perplexity_search(np.ones(5), 6.0)
    with pytest.raises(project.PerplexityError, match="outside"):
        project.perplexity_search(np.ones(5), 0.5)


# ------------------------------------------------------ joint affinities

def test_joint_affinities_form_a_distribution():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((30, 8))
    p = project.joint_affinities(x, 7.0)
    assert p.shape == (30, 30)
    assert p.min() >= 0.0
    assert np.diagonal(p).max() == 0.0
    assert abs(p.sum() - 1.0) <= 1e-8
    assert np.allclose(p, p.T, atol=1e-15)


def test_kl_divergence_nonnegative_and_rigid_motion_invariant():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((20, 6))
    p = project.joint_affinities(x, 5.0)
    y = rng.standard_normal((20, 2))
    kl = project.kl_divergence(p, y)
    assert kl >= 0.0
    theta = 0.7
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    moved = y @ rot.T + np.array([3.5, -2.0])
    assert project.kl_divergence(p, moved) == pytest.approx(kl, abs=1e-10)


# ----------------------------------------------------------------- tsne

def test_tsne_input_validation():
    rng = np.random.default_rng(8)
    with pytest.raises(ValueError, match="at least 5"):
        project.tsne(rng.standard_normal((4, 3)))
    with pytest.raises(ValueError, match="too large"):
        project.tsne(rng.standard_normal((12, 3)), perplexity=4.0)
    with pytest.raises(ValueError, match="iterations"):
        project.tsne(rng.standard_normal((30, 3)), perplexity=5.0,
                     iterations=100)
    bad = rng.standard_normal((30, 3))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        project.tsne(bad, perplexity=5.0)


def test_tsne_separates_well_spaced_clusters():
    data, labels = three_clusters(n_per=20, seed=1)
    proj = project.tsne(data, perplexity=10.0, iterations=400, seed=3)
    assert proj.points.shape == (60, 2)
    assert nn_purity(proj.points, labels) >= 0.9
    assert proj.final_kl < proj.post_exaggeration_kl
    assert proj.final_kl >= 0.0


def test_tsne_is_deterministic_per_seed():
    data, _ = three_clusters(n_per=8, dim=10, seed=2)
    a = project.tsne(data, perplexity=6.0, iterations=260, seed=5)
    b = project.tsne(data, perplexity=6.0, iterations=260, seed=5)
    c = project.tsne(data, perplexity=6.0, iterations=260, seed=6)
    assert np.array_equal(a.points, b.points)
    assert a.final_kl == b.final_kl
    assert not np.array_equal(a.points, c.points)


def test_tsne_keeps_duplicates_as_mutual_neighbors():
    rng = np.random.default_rng(9)
    base = rng.standard_normal((9, 16)) * 5.0
    data = np.concatenate([base, base])  # every point duplicated
    proj = project.tsne(data, perplexity=4.0, iterations=1000, seed=0)
    d = ((proj.points[:, None] - proj.points[None, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d, np.inf)
    nn = d.argmin(axis=1)
    for i in range(9):
        assert nn[i] == i + 9, f"point {i} drifted from its duplicate"
        assert nn[i + 9] == i, f"point {i + 9} drifted from its duplicate"


def test_tsne_divergence_reports_iteration():
    data, _ = three_clusters(n_per=5, dim=6, seed=3)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(FloatingPointError, match="iteration"):
            project.tsne(data, perplexity=4.0, iterations=260,
                         learning_rate=1e300, seed=0)


# ----------------------------------------------------------------- export

def test_export_projection_writes_table_and_scatters(tmp_path):
    data, labels = three_clusters(n_per=5, dim=8, seed=4)
    proj = project.tsne(data, perplexity=4.0, iterations=260, seed=1)
    genders = ["female" if i % 2 == 0 else "male" for i in range(15)]
    statuses = ["healthy", "organic", "inorganic"] * 5
    metas = [(f"r{i:03d}", genders[i], statuses[i]) for i in range(15)]
    paths = project.export_projection(proj, metas, tmp_path, stem="proj")

    with open(paths["csv"], newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["id", "x", "y", "gender", "status"]
    assert len(rows) == 16
    assert rows[1][0] == "r000" and rows[1][3] == "female"
    assert float(rows[1][1]) == pytest.approx(proj.points[0, 0], abs=1e-6)

    for key, expected_colors in (("by_gender", 2), ("by_status", 3)):
        with Image.open(paths[key]) as im:
            px = np.asarray(im.convert("RGB"))
        assert px.shape == (360, 360, 3)
        colored = px[(px != 255).any(axis=2) & ~(px == 0).all(axis=2)]
        assert len({tuple(c) for c in colored}) >= expected_colors


def test_export_projection_is_deterministic(tmp_path):
    data, _ = three_clusters(n_per=5, dim=8, seed=4)
    proj = project.tsne(data, perplexity=4.0, iterations=260, seed=1)
    metas = [(f"r{i}", "female", "healthy") for i in range(15)]
    a = project.export_projection(proj, metas, tmp_path / "a")
    b = project.export_projection(proj, metas, tmp_path / "b")
    for key in ("csv", "by_gender", "by_status"):
        assert a[key].read_bytes() == b[key].read_bytes()


def test_export_projection_length_mismatch(tmp_path):
    data, _ = three_clusters(n_per=5, dim=8, seed=4)
    proj = project.tsne(data, perplexity=4.0, iterations=260, seed=1)
    with pytest.raises(ValueError, match="metadata rows"):
        project.export_projection(proj, [("a", "female", "healthy")], tmp_path)
