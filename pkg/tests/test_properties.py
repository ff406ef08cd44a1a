"""Randomized invariants across modules."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from fruitsplat.damage import FilteredPointCloud, Phase, StiffnessRecord, bruise_percentage, compare_damage, filter_strawberry
from fruitsplat.gaussians import GaussianCloud, export_ply, import_ply
from fruitsplat.rasterizer import composite_pixel
from fruitsplat.tactile import TactileFrame, contact_energy
from helpers import naive_composite

unit = st.floats(0.0, 1.0)
alpha = st.floats(0.0, 0.999)
entry = st.tuples(alpha, st.tuples(unit, unit, unit), unit, unit)
threshold = st.floats(0.01, 0.99)


@given(st.lists(entry, max_size=32), st.tuples(unit, unit, unit))
def test_composite_matches_naive(entries, bg):
    rgb, s, b, a = composite_pixel(entries, bg)
    w_rgb, w_s, w_b, w_a = naive_composite(entries, bg)
    assert np.allclose(rgb, w_rgb, rtol=0, atol=1e-12)
    assert abs(s - w_s) <= 1e-12 and abs(b - w_b) <= 1e-12 and abs(a - w_a) <= 1e-12
    assert s <= a + 1e-12 and b <= a + 1e-12 and 0.0 <= a < 1.0


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=50), threshold, threshold)
def test_bruise_percentage_non_increasing_in_threshold(scores, t1, t2):
    pc = FilteredPointCloud(np.zeros((len(scores), 3)), np.array(scores), 0.5)
    lo, hi = sorted((t1, t2))
    assert bruise_percentage(pc, hi) <= bruise_percentage(pc, lo)


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=50), threshold, threshold)
def test_filter_monotone(logits, t1, t2):
    n = len(logits)
    cloud = GaussianCloud(np.zeros((n, 3)), np.zeros((n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)), np.zeros(n),
                          np.zeros((n, 3)), logits, np.zeros(n))
    lo, hi = sorted((t1, t2))

    def count(t):
        try:
            return len(filter_strawberry(cloud, t))
        except ValueError:
            return 0

    assert count(hi) <= count(lo)


@given(st.lists(unit, min_size=1, max_size=30), st.lists(unit, min_size=1, max_size=30), threshold)
def test_compare_antisymmetric(a, b, t):
    pa = FilteredPointCloud(np.zeros((len(a), 3)), np.array(a), 0.5)
    pb = FilteredPointCloud(np.zeros((len(b), 3)), np.array(b), 0.5)
    r1, r2 = compare_damage(pa, pb, t), compare_damage(pb, pa, t)
    assert r1.delta_pct == -r2.delta_pct
    assert abs(r1.delta_pct - (r1.post_bruise_pct - r1.pre_bruise_pct)) <= 1e-9


@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=8), st.lists(st.floats(0.0, 10), min_size=1, max_size=8),
       st.floats(0.1, 5.0), st.floats(0.1, 5.0))
def test_retention_displacement_invariant(pre, post, d1, d2):
    from fruitsplat.damage import stiffness_retention

    r1 = stiffness_retention(StiffnessRecord("x", Phase.PRE, pre, d1), StiffnessRecord("x", Phase.POST, post, d1))
    r2 = stiffness_retention(StiffnessRecord("x", Phase.PRE, pre, d2), StiffnessRecord("x", Phase.POST, post, d2))
    assert abs(r1 - r2) <= 1e-9 * max(1.0, abs(r1))


@settings(max_examples=50)
@given(st.integers(0, 2 ** 31))
def test_energy_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = TactileFrame(rng.uniform(size=(4, 5, 3))), TactileFrame(rng.uniform(size=(4, 5, 3)))
    assert abs(contact_energy(a, b) - contact_energy(b, a)) <= 1e-12
    assert contact_energy(a, a) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2 ** 31))
def test_ply_import_export_identity(tmp_path_factory, n, seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    cloud = GaussianCloud(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                          rng.normal(size=n), rng.uniform(size=(n, 3)), rng.normal(0, 5, n), rng.normal(0, 5, n))
    path = tmp_path_factory.mktemp("ply") / "c.ply"
    export_ply(cloud, path)
    back = import_ply(path)
    for name in GaussianCloud.ARRAYS:
        assert np.allclose(getattr(back, name), getattr(cloud, name), rtol=0, atol=1e-6)
    # activation keeps the argmax
    export_ply(cloud, path, activated=True)
    from fruitsplat.gaussians import read_ply_vertices

    props, _ = read_ply_vertices(path)
    assert np.argmax(props["strawberry"]) == np.argmax(cloud.s_logits)
