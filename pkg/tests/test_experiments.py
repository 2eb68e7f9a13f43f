import pytest

from lodseg.augmentation import default_specs
from lodseg.experiments import AugmentationExperiment, SitesExperiment, _round_robin, covering_specs


def test_covering_specs_widen_only_swept_parameters():
    specs = covering_specs(default_specs(), {"gaussian": [0.25, 1.0], "ghosting": [0.1, 0.4],
                                             "blur": [3, 5, 7]})
    by = {s.name: s for s in specs}
    assert by["gaussian"].parameters["amount"] == [0.2, 1.0]
    assert by["ghosting"].parameters["intensity"] == [0.05, 0.4]
    assert by["blur"].parameters["limit"] == [3, 7]
    defaults = {s.name: s for s in default_specs()}
    for name in ("flip", "gamma", "contrast", "inhomogeneity"):
        assert by[name] == defaults[name]
    assert all(by[n].probability == defaults[n].probability for n in by)


def test_default_specs_untouched_by_covering():
    before = [s.to_dict() for s in default_specs()]
    covering_specs(default_specs(), {"gaussian": [5.0]})
    assert [s.to_dict() for s in default_specs()] == before


def test_explicit_augmentation_list_wins():
    exp = AugmentationExperiment(augmentation=["flip"])
    assert [s.name for s in exp.augmentation_specs()] == ["flip"]


def test_round_robin_interleaves_sites():
    assert _round_robin([["a0", "a1"], ["b0"], ["c0", "c1"]], 4) == ["a0", "b0", "c0", "a1"]


def test_sites_experiment_validation():
    with pytest.raises(ValueError):
        SitesExperiment(site_counts=[1, 9]).validate()
