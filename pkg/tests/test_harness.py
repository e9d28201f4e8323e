"""Scenario schema, caching, the analysis engine, and report formats."""

import os

import numpy as np
import pytest
import yaml

from ionlock import harness
from ionlock.constants import DEFAULT_BIN_DT, DEFAULT_DT, SCENARIO_SCHEMA_VERSION
from ionlock.errors import AnalysisError, ConfigurationError
from ionlock.harness import (
    ExperimentReport,
    PRESET_NAMES,
    Scenario,
    clear_cache,
    execute_scenario,
    export_report,
    load_report,
    parse_scenario,
    scenario_hash,
    scenario_to_dict,
    serialize_scenario,
)


# ----------------------------------------------------------- schema ----

def test_empty_document_gives_defaults():
    s = parse_scenario("")
    assert s == parse_scenario("{}\n")
    assert s.duration == 1.0
    assert s.dt == DEFAULT_DT
    assert s.bin_dt == DEFAULT_BIN_DT
    assert s.seed == 0
    assert s.drive is None and s.loop is None
    assert len(s.analyses) == 1 and s.analyses[0]["kind"] == "welch"


def test_default_scenario_hash_is_stable():
    # pinned: any change to defaults or to the canonical dict layout is a
    # schema change and must be deliberate
    assert scenario_hash(parse_scenario("")) == "0b399a508d33"


def test_unknown_keys_are_named():
    with pytest.raises(ConfigurationError, match="ion.masse_kg"):
        parse_scenario("ion: {masse_kg: 1.0}\n")
    with pytest.raises(ConfigurationError, match="duratoin_s"):
        parse_scenario("duratoin_s: 2.0\n")


def test_type_errors_are_named():
    with pytest.raises(ConfigurationError, match="duration_s"):
        parse_scenario("duration_s: fast\n")
    with pytest.raises(ConfigurationError, match="seed"):
        parse_scenario("seed: yes\n")  # bools are not ints here


def test_yaml11_unsigned_exponent_is_rejected_with_key_name():
    # plain YAML 1.1 parses 1e11 (no dot, unsigned exponent) as a string;
    # the schema rejects it naming the key instead of failing downstream
    text = (
        "loop:\n"
        "  reference: {kind: sine, frequency_hz: 1.039e+6}\n"
        "  gain: 1e11\n"
    )
    with pytest.raises(ConfigurationError, match="loop.gain"):
        parse_scenario(text)


def test_schema_version_refusal():
    with pytest.raises(ConfigurationError, match="schema_version"):
        parse_scenario("schema_version: 2\n")


def test_malformed_yaml():
    with pytest.raises(ConfigurationError, match="malformed"):
        parse_scenario("ion: [unclosed\n")
    with pytest.raises(ConfigurationError, match="mapping"):
        parse_scenario("- just\n- a\n- list\n")


def test_drive_kind_validation():
    with pytest.raises(ConfigurationError, match="drive.kind"):
        parse_scenario("drive: {kind: samples, force_n: 1e-21}\n")


def test_analyses_validation():
    with pytest.raises(ConfigurationError, match="analyses"):
        parse_scenario("analyses: []\n")
    with pytest.raises(ConfigurationError, match="kind"):
        parse_scenario("analyses: [{kind: fourier}]\n")
    with pytest.raises(ConfigurationError, match="f_lo_hz"):
        parse_scenario("analyses: [{kind: lockin}]\n")


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_preset_round_trip_identity(name):
    s = harness._build_preset(name, fast=True, seed=None)
    again = parse_scenario(serialize_scenario(s))
    assert again == s
    assert scenario_hash(again) == scenario_hash(s)


def test_serialized_document_is_fully_explicit():
    doc = yaml.safe_load(serialize_scenario(parse_scenario("")))
    assert doc["schema_version"] == SCENARIO_SCHEMA_VERSION
    assert set(doc["ion"]) == {"mass_kg", "omega0_rad_s", "gamma_rad_s",
                               "temperature_k"}
    assert set(doc["detection"]) == {"i0_counts_s", "visibility", "theta_rad",
                                     "wavelength_m", "fringe_phase_rad",
                                     "transduction"}
    assert doc["drive"] is None and doc["loop"] is None


def test_apply_overrides_merges_and_reseeds():
    base = parse_scenario("")
    out = harness._apply_overrides(base, {"duration_s": 0.5,
                                          "ion": {"temperature_k": 1e-3}}, 7)
    assert out.duration == 0.5
    assert out.ion.temperature == 1e-3
    assert out.seed == 7
    assert out.ion.mass == base.ion.mass  # untouched siblings survive
    with pytest.raises(ConfigurationError):
        harness._apply_overrides(base, "duration_s=0.5", None)


# ------------------------------------------------------------ caching ----

def _tiny_scenario(seed=0, duration=0.01):
    d = scenario_to_dict(parse_scenario(""))
    d["duration_s"] = duration
    d["bin_dt_s"] = 1e-6
    d["seed"] = seed
    d["analyses"] = [{"kind": "welch", "segment_len": 4096}]
    return parse_scenario(yaml.safe_dump(d))


def test_sim_cache_identity_and_eviction():
    clear_cache()
    s = _tiny_scenario()
    r1 = harness._run_record(s)
    assert harness._run_record(s) is r1
    clear_cache()
    r2 = harness._run_record(s)
    assert r2 is not r1
    assert np.array_equal(r2.counts, r1.counts)
    for seed in (1, 2, 3):  # LRU keeps at most three distinct records
        harness._run_record(_tiny_scenario(seed=seed))
    assert len(harness._SIM_CACHE) == 3
    clear_cache()


# ---------------------------------------------------- analysis engine ----

def test_execute_scenario_writes_deterministic_files(tmp_path):
    d = scenario_to_dict(parse_scenario(""))
    d["duration_s"] = 0.2
    d["bin_dt_s"] = 1e-6
    d["detection"]["transduction"] = "linear"
    d["analyses"] = [
        {"kind": "welch", "segment_len": 32768},
        {"kind": "lockin", "f_lo_hz": 2.0e5},
        {"kind": "resolution", "bandwidth_hz": 596.9},
    ]
    s = parse_scenario(yaml.safe_dump(d))

    out = {}
    for sub in ("a", "b"):
        clear_cache()
        art = execute_scenario(s, str(tmp_path / sub), "run")
        out[sub] = art
    files_a = out["a"]["files"]
    files_b = out["b"]["files"]
    assert set(files_a) == {"counts", "welch", "lockin"}
    for stage, path_a in files_a.items():
        blob_a = open(path_a, "rb").read()
        blob_b = open(files_b[stage], "rb").read()
        assert blob_a == blob_b, f"{stage} output not reproducible"
        assert blob_a.startswith(
            f"# ionlock-schema: {SCENARIO_SCHEMA_VERSION}\n".encode())
    assert out["a"]["resolution"]["sql_ratio"] > 0
    assert out["a"]["welch"].units == "counts^2/s^2/Hz"
    assert out["a"]["lockin"].units == "m"


def test_stage_errors_name_their_stage(tmp_path):
    d = scenario_to_dict(parse_scenario(""))
    d["duration_s"] = 0.01
    d["bin_dt_s"] = 1e-6
    d["analyses"] = [{"kind": "fit"}]
    s = parse_scenario(yaml.safe_dump(d))
    clear_cache()
    with pytest.raises(AnalysisError, match=r"\[stage fit\]"):
        execute_scenario(s, str(tmp_path), "run")


def test_g2_skip_trims_the_record(tmp_path):
    d = scenario_to_dict(parse_scenario(""))
    d["duration_s"] = 0.05
    d["bin_dt_s"] = 1e-6
    d["analyses"] = [{"kind": "g2", "max_lag_s": 0.01, "skip_s": 0.04}]
    s = parse_scenario(yaml.safe_dump(d))
    clear_cache()
    art = execute_scenario(s, str(tmp_path), "run")
    # 0.04 s skipped from a 0.05 s record leaves one 0.01 s segment
    assert art["g2"].n_averages == 1
    d["analyses"] = [{"kind": "g2", "max_lag_s": 0.01, "skip_s": 0.06}]
    s_bad = parse_scenario(yaml.safe_dump(d))
    with pytest.raises(AnalysisError, match="skip_s"):
        execute_scenario(s_bad, str(tmp_path), "run2")


# ------------------------------------------------------------- reports ----

def test_report_text_format():
    rep = ExperimentReport(name="demo", scenario_hash="abc123def456")
    harness._metric(rep.metrics, "fwhm_hz", 380.0, "Hz", "demo_welch.csv")
    harness._expect(rep.expectations, "fwhm_hz", 380.0, 342.0, 418.0, "Hz")
    harness._expect(rep.expectations, "floor", 2.0, 0.0, 1.0, "m^2/Hz")
    text = export_report(rep, "text")
    assert "experiment: demo" in text
    assert "  fwhm_hz = 380 Hz   [demo_welch.csv]" in text
    assert "[PASS] fwhm_hz" in text
    assert "[FAIL] floor" in text
    assert text.rstrip().endswith("result: FAIL")
    assert rep.passed is False


def test_report_structured_round_trip():
    rep = ExperimentReport(name="demo", scenario_hash="abc123def456",
                           runtime_s=1.25, files={"counts": "x.csv"})
    harness._metric(rep.metrics, "m", 1.0, "", "x.csv")
    harness._expect(rep.expectations, "m", 1.0, 0.0, 2.0)
    blob = export_report(rep, "structured")
    back = load_report(blob)
    assert back.name == rep.name
    assert back.scenario_hash == rep.scenario_hash
    assert back.runtime_s == rep.runtime_s
    assert back.files == rep.files
    assert back.metrics == rep.metrics
    assert back.expectations == rep.expectations
    assert back.passed is True
    # re-export is byte-stable
    assert export_report(back, "structured") == blob


def test_report_edge_cases():
    empty = ExperimentReport(name="none", scenario_hash="0" * 12)
    assert empty.passed is True  # vacuous: no expectations registered
    assert "result: PASS" in export_report(empty, "text")
    with pytest.raises(ConfigurationError):
        export_report(empty, "pdf")
    with pytest.raises(ConfigurationError):
        load_report('{"schema_version": 99}')
    # non-finite values never pass an expectation
    exp = []
    assert harness._expect(exp, "bad", float("nan"), 0.0, 1.0) is False


def test_preset_names_and_seeds():
    assert PRESET_NAMES == ("fig2a", "fig2b", "fig2cd", "fig3a", "fig3b",
                            "fig3c", "fig3d")
    for name in PRESET_NAMES:
        s = harness._build_preset(name, fast=True, seed=None)
        assert isinstance(s, Scenario)
        assert s.seed == harness._PRESET_SEEDS[name]
    custom = harness._build_preset("fig2a", fast=True, seed=99)
    assert custom.seed == 99
    with pytest.raises(ConfigurationError):
        harness._build_preset("fig9z", fast=True, seed=None)


def test_default_out_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUT_DIR_ENV, str(tmp_path / "custom"))
    assert harness.default_out_dir() == str(tmp_path / "custom")
    monkeypatch.delenv(harness.OUT_DIR_ENV)
    assert os.path.basename(harness.default_out_dir()) == "ionlock_out"
