import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from conftest import tiny_config
from hierflow import training as tr
from hierflow.errors import ConfigError
from hierflow.hierarchy import daily_profile, kmeans, shape_profiles
from hierflow.synthetic import EMPLOYMENT, RESIDENTIAL, SyntheticConfig, generate


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("n_nodes,spd", [(4, 8), (12, 72), (30, 24)])
def test_noiseless_archetypes_are_recovered(seed, n_nodes, spd):
    series, truth = generate(SyntheticConfig(n_nodes=n_nodes, days=6, slots_per_day=spd, noise=0.0, seed=seed))
    labels = kmeans(shape_profiles(daily_profile(series.values, spd)), 2, seed=seed).labels
    assert adjusted_rand_score([truth[n] for n in series.node_ids], labels) == 1.0


def test_hierarchy_clusters_match_truth():
    series, truth = generate(SyntheticConfig(n_nodes=10, days=10, slots_per_day=8, noise=0.0))
    g = tr.build_graph(series, tiny_config(), 6 * 8)
    found = [g.parent_of[n] for n in series.node_ids]
    assert adjusted_rand_score([truth[n] for n in series.node_ids], found) == 1.0


def test_shape_profiles_ignore_scale(rng):
    p = rng.uniform(1, 5, size=8)
    out = shape_profiles(np.stack([p, 3 * p + 1, np.full(8, 2.0)]))
    assert np.allclose(out[0], out[1]) and not out[2].any()


def test_fixed_seed_gives_identical_csv():
    cfg = SyntheticConfig(n_nodes=5, days=3, slots_per_day=12, seed=7)
    assert generate(cfg)[0].to_csv() == generate(cfg)[0].to_csv()
    other = SyntheticConfig(n_nodes=5, days=3, slots_per_day=12, seed=8)
    assert generate(cfg)[0].to_csv() != generate(other)[0].to_csv()


def test_values_are_nonnegative_counts():
    series, truth = generate(SyntheticConfig(n_nodes=6, days=4, slots_per_day=24, noise=0.5))
    assert np.all(series.values >= 0) and np.array_equal(series.values, np.rint(series.values))
    assert sorted(set(truth.values())) == [0, 1]


def test_archetype_peaks_ordered():
    res, emp = RESIDENTIAL.shape(72), EMPLOYMENT.shape(72)
    assert res[52] > res[13] and emp[13] > emp[52]  # evening vs morning peak


@pytest.mark.parametrize("field,value", [("noise", -0.1), ("n_nodes", 0), ("level_phi", 1.0), ("days", 0)])
def test_invalid_config_names_field(field, value):
    with pytest.raises(ConfigError, match=field):
        generate(SyntheticConfig(**{field: value}))


def test_from_json_rejects_unknown_fields():
    with pytest.raises(ConfigError):
        SyntheticConfig.from_json({"colour": "red"})
    cfg = SyntheticConfig.from_json({"archetypes": [{"peaks": [{"position": 0.5, "height": 1.0}]}],
                                     "n_nodes": 3})
    assert len(cfg.archetypes) == 1
