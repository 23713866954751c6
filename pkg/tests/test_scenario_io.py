import json

import numpy as np
import pytest

from gridcoord.scenario_io import (
    ConfigError,
    TimeSeries,
    build_aggregators,
    bundled_scenario,
    check_accounting,
    load_scenario,
    save_scenario,
    simulate,
    synthesize_population,
    validate,
    weather_inputs,
)
from conftest import small
from gridcoord.scenario_io.results import FILES, AccountingError, read_csv, results_schema

@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    records = simulate(validate(small()), out)
    return out, records


class TestValidation:
    def test_defaults_filled(self):
        cfg = validate(small())
        assert cfg["period_min"] == 5.0
        assert cfg["tolerances"]["price"] == 1e-4
        assert cfg.n_periods == 12

    def test_bundled_table(self):
        dgs = validate(small(dgs={"table": "table1_dgs.json"})).dgs()
        assert [g.name for g in dgs] == ["DG1", "DG2", "DG3", "DG4", "DG5"]
        assert dgs[1].a == 0.00052 and dgs[1].p_max_kw == 100.0

    def test_missing_field_named(self):
        doc = small()
        del doc["population"]
        with pytest.raises(ConfigError, match="population"):
            validate(doc)

    def test_type_error_has_path(self):
        doc = small()
        doc["population"]["aggregators"][1]["participants"] = "four"
        with pytest.raises(ConfigError, match=r"population\.aggregators\[1\]\.participants"):
            validate(doc)

    def test_disconnected_graph(self):
        # 5 generators and 2 aggregators; agents 4..6 form a separate component
        doc = small(graph={"edges": [[0, 1], [1, 2], [2, 3], [4, 5], [5, 6]]})
        with pytest.raises(ConfigError, match=r"graph: .*\[4, 5, 6\]"):
            validate(doc)

    def test_inverted_range(self):
        doc = small()
        doc["population"]["house"] = {"ua": [400.0, 300.0]}
        with pytest.raises(ConfigError, match=r"population\.house\.ua"):
            validate(doc)

    def test_unknown_cap_target(self):
        with pytest.raises(ConfigError, match="line_caps.A9"):
            validate(small(line_caps={"A9": 10.0}))

    def test_duplicate_names(self):
        doc = small()
        doc["population"]["aggregators"][1]["name"] = "A1"
        with pytest.raises(ConfigError, match="unique"):
            validate(doc)

    def test_gain_degree_bound(self):
        with pytest.raises(ConfigError, match="gains"):
            validate(small(gains={"alpha0": 1e-3, "beta0": 0.9}))

    def test_short_reference_series(self):
        with pytest.raises(ConfigError, match="series_kw"):
            validate(small(reference={"kind": "explicit_series", "series_kw": [1.0, 2.0]}))

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{\"name\": ")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_scenario(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_scenario(tmp_path / "nope.json")

    def test_round_trip(self, tmp_path):
        cfg = validate(small())
        p = tmp_path / "s.json"
        save_scenario(cfg, p)
        assert load_scenario(p) == cfg

    @pytest.mark.parametrize("name", ["base_desk", "case2_desk", "case3_desk"])
    def test_bundled_scenarios_valid(self, name):
        cfg = load_scenario(bundled_scenario(name))
        assert cfg.n_periods == 288

    def test_unknown_bundled(self):
        with pytest.raises(ConfigError):
            bundled_scenario("case9")


class TestPopulation:
    def test_deterministic(self):
        a = synthesize_population(validate(small()))
        b = synthesize_population(validate(small()))
        assert a == b

    def test_counts(self):
        pops = synthesize_population(validate(small()))
        assert [(len(p), len(q)) for p, q in pops] == [(3, 1), (4, 0)]

    def test_other_aggregators_stable(self):
        doc = small()
        doc["population"]["aggregators"][1]["participants"] = 9
        a = synthesize_population(validate(small()))[0]
        b = synthesize_population(validate(doc))[0]
        assert a == b

    def test_degenerate_range_is_constant(self):
        doc = small()
        doc["population"]["house"] = {"ua": [300.0, 300.0]}
        for houses, passive in synthesize_population(validate(doc)):
            assert all(h.params.ua == 300.0 for h in houses + passive)

    def test_draws_within_ranges(self):
        for houses, _ in synthesize_population(validate(small())):
            for h in houses:
                assert 250.0 <= h.params.ua <= 450.0
                assert h.pref.t_min_f <= h.pref.t_desired_f <= h.pref.t_max_f

    def test_uncontrollable_positive(self):
        for agg in build_aggregators(validate(small())):
            assert len(agg.other_load_kw) == 12
            assert np.all(agg.other_load_kw > 0)

    def test_weather_held_per_period(self):
        w = weather_inputs(validate(small()))
        assert len(w.t_out_f) == 12
        assert 72.0 <= w.t_out_f.min() <= w.t_out_f.max() <= 96.0


class TestSeries:
    def test_average_exact(self):
        ts = TimeSeries(0.0, 1.0, [1.0, 3.0], "kW")
        assert ts.average(0.5, 1.5) == 2.0

    def test_gaps_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            TimeSeries(0.0, 1.0, [1.0, np.nan], "kW")

    def test_csv_uniform_grid(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("time_h,value\n0,1\n0.5,2\n1.5,3\n")
        with pytest.raises(ValueError, match="uniformly"):
            TimeSeries.from_csv(p, "kW")

    def test_csv_weather_must_cover_horizon(self, tmp_path):
        p = tmp_path / "w.csv"
        p.write_text("time_h,t_out_f\n0,90\n0.25,91\n")
        doc = small(weather={"kind": "csv", "path": str(p)})
        with pytest.raises(ConfigError, match="cover"):
            weather_inputs(validate(doc, tmp_path))

    def test_csv_reference_used(self, tmp_path):
        p = tmp_path / "ref.csv"
        p.write_text("time_h,kw\n" + "".join(f"{i / 12},{10 + i}\n" for i in range(12)))
        cfg = validate(small(reference={"kind": "explicit_series", "path": "ref.csv"}), tmp_path)
        records = simulate(cfg)
        assert [r.plan.ref_kw for r in records] == pytest.approx([10.0 + i for i in range(12)], abs=1e-9)


class TestResults:
    def test_files_written(self, small_run):
        out, records = small_run
        for name, cols in FILES.items():
            rows = read_csv(out / name)
            assert list(rows[0]) == cols
        assert len(read_csv(out / "feeder.csv")) == len(records)

    def test_read_back_exact(self, small_run):
        out, records = small_run
        rows = read_csv(out / "feeder.csv")
        assert [float(r["feeder_actual_kw"]) for r in rows] == [r.feeder_actual_kw for r in records]
        assert check_accounting(out) == len(records)

    def test_tampered_file_caught(self, small_run, tmp_path):
        out, _ = small_run
        for name in FILES:
            (tmp_path / name).write_text((out / name).read_text())
        rows = (tmp_path / "feeder.csv").read_text().splitlines()
        cells = rows[3].split(",")
        cells[4] = repr(float(cells[4]) + 1e-9)
        rows[3] = ",".join(cells)
        (tmp_path / "feeder.csv").write_text("\n".join(rows) + "\n")
        with pytest.raises(AccountingError, match="period 2"):
            check_accounting(tmp_path)

    def test_schema_documents_every_column(self):
        schema = results_schema()["files"]
        for name, cols in FILES.items():
            assert set(schema[name]) == set(cols)

    def test_base_mode(self, tmp_path):
        load = simulate(validate(small(mode="base")), tmp_path)
        rows = read_csv(tmp_path / "base_feeder.csv")
        assert [float(r["feeder_kw"]) for r in rows] == list(load)

    def test_files_deterministic(self, small_run, tmp_path):
        out, _ = small_run
        simulate(validate(small()), tmp_path)
        for name in FILES:
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_bundled_table_file_is_json():
    doc = json.loads(bundled_scenario("case3_desk").read_text())
    assert doc["line_caps"] == {"A3": 82.0}
