import hashlib

import numpy as np
import pytest
from scipy.stats import spearmanr

from wealth_atlas import io as wio
from wealth_atlas import labels, synth
from wealth_atlas.atlas import load_lines, modality
from wealth_atlas.spatial import assign_footprints, build_index


def digest(fx):
    return {k: hashlib.sha256(p.read_bytes()).hexdigest() for k, p in fx.paths.items()}


def sub_index_table(fx):
    return {v.township_id: v for v in labels.compute_sub_indexes(wio.load_households(fx.paths["households"]).records)}


def test_files_pass_every_validator(small_fixture):
    p = small_fixture.paths
    for loader, key in [
        (wio.load_households, "households"),
        (wio.load_house_views, "house_views"),
        (wio.load_images, "images"),
        (wio.load_footprints, "footprints"),
        (wio.load_boundaries, "townships"),
        (wio.load_zones, "zones"),
        (wio.load_nightlight, "nightlight"),
    ]:
        res = loader(p[key])
        assert res.ok and res.n_rows > 0, key
    assert load_lines(p["lines"]).ok
    assert synth.load_truth(p["truth"]) == small_fixture.truth


def test_same_seed_byte_identical(tmp_path):
    cfg = synth.SynthConfig(n_townships=30, seed=4)
    assert digest(synth.generate(cfg, tmp_path / "a")) == digest(synth.generate(cfg, tmp_path / "b"))
    assert digest(synth.generate(cfg, tmp_path / "a")) != digest(synth.generate(synth.SynthConfig(n_townships=30, seed=5), tmp_path / "c"))


def test_footprints_inside_own_cell(small_fixture):
    bounds = wio.load_boundaries(small_fixture.paths["townships"]).records
    fps = wio.load_footprints(small_fixture.paths["footprints"]).records
    asg = assign_footprints(build_index(bounds), fps)
    assert asg.unassigned == 0 and not asg.conflicts


@pytest.mark.parametrize("pattern", synth.PATTERNS)
def test_noise_free_rates_monotone_in_latent(fixture_factory, pattern):
    fx = fixture_factory(n_townships=100, seed=2, noise_scale=0.0, latent_spatial_pattern=pattern, households_per_township=(40, 40))
    table = sub_index_table(fx)
    ids = sorted(table, key=lambda t: fx.truth[t])
    for name in labels.SUB_INDEX_NAMES:
        vals = [table[t][name] for t in ids]
        # with a fixed household count, stratified quotas give a non-decreasing step function of w
        assert all(a <= b for a, b in zip(vals, vals[1:])), name
    area = [table[t]["building_base_area"] for t in ids]
    assert all(a < b for a, b in zip(area, area[1:]))


def test_positive_rank_correlation_with_noise(fixture_factory):
    fx = fixture_factory(n_townships=200, seed=3, noise_scale=1.0)
    table = sub_index_table(fx)
    ids = sorted(table)
    w = [fx.truth[t] for t in ids]
    for name in labels.SUB_INDEX_NAMES:
        rho = spearmanr(w, [table[t][name] for t in ids]).statistic
        assert rho > 0, name


def test_two_cluster_truth_is_bimodal(fixture_factory):
    fx = fixture_factory(n_townships=400, seed=7, latent_spatial_pattern="two_cluster")
    assert modality(list(fx.truth.values())).mode_count == 2
    fx = fixture_factory(n_townships=400, seed=7, latent_spatial_pattern="uniform")
    assert modality(list(fx.truth.values())).mode_count == 1


def test_gradient_rises_eastward(fixture_factory):
    fx = fixture_factory(n_townships=100, seed=1, latent_spatial_pattern="gradient")
    bounds = {b.township_id: b for b in wio.load_boundaries(fx.paths["townships"]).records}
    lon = np.array([bounds[t].centroid[0] for t in fx.truth])
    assert np.corrcoef(lon, list(fx.truth.values()))[0, 1] > 0.95


def test_labeled_fraction(fixture_factory):
    fx = fixture_factory(n_townships=64, seed=11)
    table = sub_index_table(fx)
    assert sorted(table) == fx.labeled and len(fx.labeled) == 32


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_townships": 0},
        {"households_per_township": (5, 2)},
        {"latent_spatial_pattern": "ring"},
        {"noise_scale": float("inf")},
        {"labeled_fraction": 1.5},
    ],
)
def test_config_validation(kwargs, tmp_path):
    with pytest.raises(ValueError):
        synth.generate(synth.SynthConfig(**kwargs), tmp_path)


def test_config_dict_round_trip():
    cfg = synth.SynthConfig(n_townships=9, views_per_township=(1, 2))
    assert synth.SynthConfig.from_dict(cfg.to_dict()) == cfg
