import itertools

import numpy as np
import pytest

from lodseg.phantom import (
    BASE_MEANS,
    PhantomError,
    RosterConfig,
    SiteProfile,
    SubjectGeometry,
    _grid,
    generate_roster,
    generate_subject,
    histogram_distance,
    render_subject,
    template_labels,
)


def test_determinism_and_all_classes():
    g = SubjectGeometry.random(5)
    a = generate_subject(g, 32)
    b = generate_subject(g, 32)
    assert np.array_equal(a.data, b.data)
    assert sorted(np.unique(a.data).tolist()) == list(range(8))


@pytest.mark.parametrize("seed", range(6))
def test_eight_labels_for_random_geometries(seed):
    lab = generate_subject(SubjectGeometry.random(seed, amplitude=0.08), 48)
    assert len(np.unique(lab.data)) == 8


def test_zero_amplitude_is_template():
    g = SubjectGeometry(seed=3, deformation_amplitude=0.0)
    lab = generate_subject(g, 40)
    assert np.array_equal(lab.data, template_labels(_grid(40)))


def test_grid_too_small():
    with pytest.raises(PhantomError, match="too small"):
        generate_subject(SubjectGeometry(0), 16)


def test_flat_profile_is_class_mean_lookup():
    lab = generate_subject(SubjectGeometry(1), 32)
    site = SiteProfile("flat", class_mean=tuple(BASE_MEANS * 100))
    img = render_subject(lab, site)
    np.testing.assert_allclose(img.data, (BASE_MEANS * 100)[lab.data], rtol=1e-6)


def test_rendering_follows_class_means_and_keeps_labels():
    lab = generate_subject(SubjectGeometry(2), 32)
    copy = lab.data.copy()
    lo = SiteProfile("a", class_mean=tuple(BASE_MEANS * 100))
    hi = SiteProfile("b", class_mean=tuple(BASE_MEANS * 100 + np.arange(8) * 5))
    a, b = render_subject(lab, lo), render_subject(lab, hi)
    for c in range(8):
        m = lab.data == c
        assert b.data[m].mean() - a.data[m].mean() == pytest.approx(5 * c, abs=1e-3)
    assert np.array_equal(lab.data, copy)


def test_site_render_deterministic():
    lab = generate_subject(SubjectGeometry(4), 32)
    site = SiteProfile.sample("s", 12)
    assert np.array_equal(render_subject(lab, site).data, render_subject(lab, site).data)


def test_site_profile_invariants():
    with pytest.raises(PhantomError, match="gamma"):
        SiteProfile("x", gamma=2.5)
    with pytest.raises(PhantomError, match="apart"):
        SiteProfile("x", class_std=(0.2,) * 8, class_mean=tuple(BASE_MEANS))
    for seed in range(20):
        SiteProfile.sample(f"s{seed}", seed)  # validates on construction


def test_scanner_effect_exceeds_subject_variability():
    """Across-site distance of one subject beats across-subject distance within one site."""
    roster = RosterConfig(grid_side=32)
    sites = roster.site_profiles()[:4]
    subjects = [generate_subject(SubjectGeometry.random(100 + i), 32, source_id=f"s{i}")
                for i in range(10)]
    renders = {(si, j): render_subject(lab, site).data
               for si, site in enumerate(sites) for j, lab in enumerate(subjects)}
    across_sites = [histogram_distance(renders[a, j], renders[b, j])
                    for j in range(10) for a, b in itertools.combinations(range(4), 2)]
    across_subjects = [histogram_distance(renders[s, i], renders[s, j])
                       for s in range(4) for i, j in itertools.combinations(range(10), 2)]
    assert np.mean(across_sites) > np.mean(across_subjects)
    assert np.median(across_sites) > np.median(across_subjects)


def test_roster_counts_and_splits():
    roster = RosterConfig(n_sites=3, ext_sites=1, train_per_site=2, val_per_site=1,
                          test_per_site=1, ext_subjects=2, grid_side=32)
    items = list(generate_roster(roster))
    assert len(items) == 2 * 4 + 2
    ext_sites = {s.site_id for s, split in items if split == "test_ext"}
    train_sites = {s.site_id for s, split in items if split == "train"}
    assert ext_sites == {"site02"} and not ext_sites & train_sites


def test_roster_validation():
    with pytest.raises(PhantomError):
        RosterConfig(n_sites=0).validate()
    with pytest.raises(PhantomError):
        RosterConfig(n_sites=2, ext_sites=2).validate()
