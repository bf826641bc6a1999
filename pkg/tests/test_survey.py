import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markedlgcp.errors import DesignError
from markedlgcp.surface import PixelGrid
from markedlgcp.survey import (
    DesignSpec,
    Population,
    PopulationConfig,
    StratumDesign,
    area_inclusion_probability,
    build_frame,
    generate_population,
    grid_regions,
    ht_estimate,
    kernel_smooth,
    morton_key,
    proportional_design,
    read_regions_geojson,
    run_survey,
    sample_surfaces,
    select_areas,
    select_dwellings,
    write_regions_geojson,
)

from conftest import make_sample

SMALL = PopulationConfig(width=10, height=10, counties=(4, 4), counties_per_stratum=(2, 2), alpha1=3.0)


@pytest.fixture(scope="module")
def pop():
    return generate_population(SMALL, 11)


def census_design(pop):
    A = np.bincount(pop.buildings["stratum"][pop.dwelling_building_index()], minlength=len(pop.strata))
    big = int(pop.dwellings["people"].size)
    return DesignSpec(tuple(StratumDesign(r.id, int(A[k]), big) for k, r in enumerate(pop.strata) if A[k]), "areas")


def test_homogeneous_building_counts():
    cfg = PopulationConfig(width=10, height=10, alpha1=3.0, sim_max_edge=1.0)
    expected = math.exp(3.0) * 100
    assert expected == pytest.approx(2008.55, abs=0.01)
    ok = [abs(generate_population(cfg, s).n_buildings - expected) <= 3 * math.sqrt(expected) for s in range(40)]
    assert np.mean(ok) >= 0.95


def test_all_employed_world():
    pop = generate_population(PopulationConfig(width=5, height=5, alpha2=-20.0), 0)
    assert pop.buildings["unemployed"].sum() == 0


def test_population_determinism_and_roundtrip(tmp_path, pop):
    again = generate_population(SMALL, 11)
    for k in pop.buildings:
        np.testing.assert_array_equal(again.buildings[k], pop.buildings[k])
    pop.write(tmp_path, "# test")
    back = Population.read(tmp_path)
    for k in pop.buildings:
        np.testing.assert_array_equal(back.buildings[k], pop.buildings[k])
    for k in pop.dwellings:
        np.testing.assert_array_equal(back.dwellings[k], pop.dwellings[k])


def test_population_consistency(pop):
    b, d = pop.buildings, pop.dwellings
    per_b = np.bincount(pop.dwelling_building_index(), weights=d["unemployed"], minlength=pop.n_buildings)
    np.testing.assert_array_equal(per_b, b["unemployed"])
    assert np.all(d["unemployed"] <= d["people"])
    np.testing.assert_array_equal(d["employed"] + d["unemployed"] + d["inactive"], d["people"])
    np.testing.assert_array_equal(d["edu1"] + d["edu2"] + d["edu3"], d["people"])
    assert pop.region_totals().sum() == b["unemployed"].sum()


def test_area_probability_example():
    K = 1000 / 10
    assert K == 100
    assert area_inclusion_probability(50, K) == pytest.approx(0.5)
    assert area_inclusion_probability(150, K) == 1.0


def test_area_selection_frequency():
    sizes = np.array([300, 50, 200, 250, 120, 80])
    rng = np.random.default_rng(0)
    n = 20_000
    hits = 0
    for _ in range(n):
        sel = select_areas(sizes, 10, rng, K=100.0)
        hits += 1 in sel.index
    assert abs(hits / n - 0.5) < 0.02


def test_dwelling_probability_example():
    _, p, K, _ = select_dwellings(50, 5, np.random.default_rng(0))
    assert p == pytest.approx(0.1)
    assert K == 10
    assert p * 0.5 == pytest.approx(0.05)


def test_dwelling_census_case():
    pos, p, _, _ = select_dwellings(7, 7, np.random.default_rng(0))
    assert p == 1.0
    assert sorted(pos.tolist()) == list(range(7))


def test_dwelling_selection_frequency():
    rng = np.random.default_rng(1)
    A, n_jh, reps = 23, 4, 20_000
    counts = np.zeros(A)
    for _ in range(reps):
        pos, _, _, _ = select_dwellings(A, n_jh, rng)
        counts[pos] += 1
    assert np.abs(counts / reps - n_jh / A).max() < 0.02


@settings(max_examples=60, deadline=None)
@given(A=st.integers(1, 400), n=st.integers(1, 400), seed=st.integers(0, 2**31))
def test_dwelling_selection_size_and_distinct(A, n, seed):
    n = min(n, A)
    pos, p, _, _ = select_dwellings(A, n, np.random.default_rng(seed))
    assert pos.size == n
    assert np.unique(pos).size == n
    assert pos.min() >= 0 and pos.max() < A
    assert p == pytest.approx(n / A)


def test_select_dwellings_rejects_oversampling():
    with pytest.raises(DesignError):
        select_dwellings(3, 5, np.random.default_rng(0))


def test_census_design_recovers_population(pop):
    s = run_survey(pop, census_design(pop), 0)
    assert len(s) == pop.n_buildings
    order = np.searchsorted(pop.buildings["id"], s.ids)
    np.testing.assert_array_equal(s.mark, pop.buildings["unemployed"][order])
    np.testing.assert_allclose(s.p_ijh, 1.0)
    assert ht_estimate(s).total == pop.buildings["unemployed"].sum()


def test_marks_are_dwelling_sums(pop):
    s, draw = run_survey(pop, proportional_design(pop, 0.2, 4), 3, return_draw=True)
    d = pop.dwellings
    bid = d["building_id"][draw.dwellings]
    for i in range(min(len(s), 50)):
        sel = bid == s.ids[i]
        assert s.mark[i] == d["unemployed"][draw.dwellings][sel].sum()
        assert s.nind[i] == d["people"][draw.dwellings][sel].sum()


def test_sample_size_matches_design(pop):
    design = proportional_design(pop, 0.05, 3)
    _, draw = run_survey(pop, design, 5, return_draw=True)
    assert abs(draw.dwellings.size - int(np.minimum(3, draw.area_size).sum())) <= draw.area_size.size
    assert np.unique(draw.dwellings).size == draw.dwellings.size


def test_frame_is_stratum_contiguous(pop):
    fr = build_frame(pop)
    strat = pop.buildings["stratum"][pop.dwelling_building_index()][fr.order]
    assert np.all(np.diff(strat) >= 0)
    assert sum(sz.sum() for sz in fr.area_size) == pop.n_dwellings


def test_morton_key_interleaves():
    assert morton_key(np.array([0, 1, 0, 1]), np.array([0, 0, 1, 1])).tolist() == [0, 1, 2, 3]
    assert morton_key(np.array([2]), np.array([0]))[0] == 4


def test_ht_example():
    s = make_sample(np.zeros((3, 2)), mark=np.array([2, 0, 1]))
    s.p_area[:] = [0.5, 0.5, 0.25]
    est = ht_estimate(s)
    assert est.total == pytest.approx(8.0)
    assert est.n == 3


def test_ht_census_and_empty_region():
    s = make_sample(np.array([[0.5, 0.5], [1.5, 0.5]]), mark=np.array([3, 4]))
    assert ht_estimate(s).total == 7
    assert ht_estimate(s).variance == 0
    far = grid_regions((10, 10, 11, 11), 1, 1)[0]
    assert ht_estimate(s, far).empty


def test_ht_unbiased_small_world(pop):
    design = proportional_design(pop, 0.1, 3)
    fr = build_frame(pop)
    tot = [ht_estimate(run_survey(pop, design, r, frame=fr)).total for r in range(300)]
    truth = pop.buildings["unemployed"].sum()
    se = np.std(tot) / math.sqrt(len(tot))
    assert abs(np.mean(tot) - truth) < 4 * se


def test_design_json_roundtrip(tmp_path, pop):
    d = proportional_design(pop, 0.05, 3)
    d.write(tmp_path / "design.json")
    assert DesignSpec.read(tmp_path / "design.json") == d


def test_regions_geojson_roundtrip(tmp_path, pop):
    write_regions_geojson(tmp_path / "r.geojson", pop.counties)
    back = read_regions_geojson(tmp_path / "r.geojson")
    assert [r.id for r in back] == [r.id for r in pop.counties]
    assert sum(r.area for r in back) == pytest.approx(100.0)


def test_kernel_single_point_constant():
    grid = PixelGrid(0, 0, 1, 5, 5)
    s = kernel_smooth(np.array([[2.2, 2.7]]), [7.0], 2.0, grid)
    np.testing.assert_allclose(s.values[s.valid], 7.0)


def test_kernel_symmetry_midpoint():
    grid = PixelGrid(0, 0, 1, 3, 1)
    s = kernel_smooth(np.array([[0.5, 0.5], [2.5, 0.5]]), [0.0, 10.0], 1.0, grid)
    assert s.values[1] == pytest.approx(5.0, abs=1e-12)


def test_kernel_tiny_bandwidth_localises():
    grid = PixelGrid(0, 0, 1, 4, 4)
    pts = np.array([[0.5, 0.5], [3.5, 3.5], [1.5, 2.5]])
    s = kernel_smooth(pts, [1.0, 2.0, 3.0], 1e-6, grid)
    np.testing.assert_allclose(s.values[grid.cell_index(pts)], [1.0, 2.0, 3.0])


def test_kernel_far_cells_flagged():
    grid = PixelGrid(0, 0, 1, 30, 1)
    s = kernel_smooth(np.array([[0.5, 0.5], [1.5, 0.5]]), [1.0, 3.0], 1.0, grid)
    assert not s.valid[-1]
    assert s.values[-1] == pytest.approx(2.0)


def test_sample_surfaces_consistency(pop):
    s = run_survey(pop, proportional_design(pop, 0.1, 3), 2)
    surf = sample_surfaces(s, pop.grid, 2.0)
    np.testing.assert_allclose(surf["p_area"].values * surf["p_dwel"].values, surf["p"].values, rtol=1e-12)
    np.testing.assert_allclose(surf["offset2"].values, np.log(surf["nind"].values))
    assert np.all((surf["p_dwel"].values > 0) & (surf["p_dwel"].values <= 1))
