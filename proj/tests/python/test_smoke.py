import numpy as np
import pytest

import hexfleet as hf


def test_grid_and_adjacency():
    g = hf.build_grid(3, 4, stations=2, seed=1)
    assert g.size == 12
    assert len(g.stations) == 2
    assert g.hop_distance(0, 0) == 0
    for n in g.neighbors(5):
        assert 5 in g.neighbors(n)
    a = hf.normalized_adjacency(g)
    assert a.shape == (12, 12)
    assert np.allclose(a, a.T)


def test_config_defaults_round_trip_and_errors():
    c = hf.RunConfig.from_toml("")
    assert c.gamma == pytest.approx(0.995)
    assert c.rho == pytest.approx(0.3)
    again = hf.RunConfig.from_toml(c.to_toml())
    assert again == c
    with pytest.raises(hf.ConfigError, match=r"gamma must lie in \(0,1\)"):
        hf.RunConfig.from_toml("[agent]\ngamma = 1.5\n")
    with pytest.raises(ValueError, match="unknown key"):
        hf.RunConfig.from_toml("[agent]\ngama = 0.9\n")


def test_synth_demand_is_nonnegative():
    g = hf.build_grid(3, 3)
    d = hf.synth_demand(g, 10, 1, 3.0, 4)
    assert len(d) == 10
    assert all((x >= 0).all() for x in d)


def test_checks():
    assert hf.check_projection_oracle(1, 10)
    assert hf.check_power_density()
    assert hf.check_gumbel_law(2, 20000)
    r = hf.check_contraction(3)
    assert r.passed and r.trials == 100


def test_short_training_and_evaluation():
    c = hf.RunConfig.from_toml(
        "[grid]\nrows = 3\ncols = 3\nstations = 1\n[scenario]\nhorizon = 80\n"
        "[env]\nn_vehicles = 3\nepisode_steps = 6\n[agent]\nbatch = 4\nbuffer = 100\n"
        "[neural]\nhidden = 8\nhead_hidden = 8\nscorer_hidden = 4\n[wdro]\ninner_k = 1\n"
        "[projection]\ntime_limit_s = 0.5\n"
    )
    t = hf.Trainer(c)
    rows = [t.run_episode() for _ in range(3)]
    assert rows[-1]["step"] == 18
    assert all(l >= 0 for l in t.lambda_trace)
    m = t.evaluate(2)
    assert m["violation_steps"] == 0
    assert m["net_profit"] == pytest.approx(m["revenue"] - m["driving_cost"] - m["charging_cost"])
    g = hf.evaluate_greedy(c, 2)
    assert g["episodes"] == 2
