import json
import re
from pathlib import Path

import numpy as np
import pytest

from migosim.cli import main
from migosim.config import (
    ConfigFileError,
    config_hash,
    parse_config,
    parse_config_dict,
    with_overrides,
)
from migosim.data import Dataset
from migosim.errors import DataError
from migosim.metrics import MetricSeries, back_acc, ben_acc, longevity, summarize
from migosim.nn import ModelArch, ParamVec, init_model, zero_params


# ---------------------------------------------------------------- accuracy metrics


def constant_class_model(arch, class_id):
    m = zero_params(arch)
    blk = arch.layer_blocks()[-1]
    bias = np.zeros(arch.class_count)
    bias[class_id] = 10.0
    m.values[blk.biases[0] : blk.biases[1]] = bias
    return m


def test_back_acc_constant_predictor():
    arch = ModelArch((3, 4, 5))
    test = Dataset(np.random.default_rng(0).normal(size=(40, 3)), np.full(40, 2), 5, 3)
    assert back_acc(constant_class_model(arch, 2), arch, test) == 100.0
    assert back_acc(constant_class_model(arch, 1), arch, test) == 0.0


def test_back_acc_random_models_near_chance():
    # expectation over random inits is 1/classes by symmetry
    arch = ModelArch((4, 8, 10))
    rng = np.random.default_rng(1)
    test = Dataset(rng.normal(size=(400, 4)), np.full(400, 7), 10, 4)
    values = [back_acc(init_model(arch, seed), arch, test) for seed in range(60)]
    assert abs(np.mean(values) - 10.0) < 3.0


def test_accuracy_rejects_empty_test():
    arch = ModelArch((2, 2))
    empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 2, 2)
    with pytest.raises(DataError):
        ben_acc(zero_params(arch), arch, empty)


def test_ben_acc_constant_predictor_on_balanced_set():
    arch = ModelArch((3, 4, 10))
    feats = np.random.default_rng(2).normal(size=(100, 3))
    labels = np.repeat(np.arange(10), 10)
    test = Dataset(feats, labels, 10, 3)
    assert ben_acc(constant_class_model(arch, 0), arch, test) == pytest.approx(10.0)


# ---------------------------------------------------------------- series / summary


def series_of(back, ben=None, **kw):
    n = len(back)
    return MetricSeries(
        back_acc=list(back),
        ben_acc=list(ben) if ben is not None else [100.0] * n,
        global_update_norm=[0.1] * n,
        accepted_benign=[9] * n,
        accepted_malicious=[1] * n,
        region_estimate=[None] * n,
        **kw,
    )


def test_longevity_constant_and_window():
    s = series_of([5.0] * 20)
    assert longevity(s, 10) == 5.0
    s = series_of([0.0, 10.0, 20.0, 30.0, 40.0])
    assert longevity(s, 2) == 20.0
    # boundary truncation: last index averages the final 3 values
    assert longevity(s, 4) == pytest.approx(30.0)
    with pytest.raises(ValueError):
        longevity(s, 5)


def test_summarize_longevity_positions_and_absent():
    back = [0.0] * 1000
    back[250] = 90.0  # peak inside the window
    for r, v in ((400, 50.0), (600, 40.0), (900, 30.0)):
        back[r - 2 : r + 3] = [v] * 5
    s = series_of(back)
    rep = summarize(s, (0, 300))
    assert rep.max_acc == 90.0
    assert rep.l100 == 50.0
    assert rep.l300 == 40.0
    assert rep.l600 == 30.0
    short = series_of(back[:700])
    rep2 = summarize(short, (0, 300))
    assert rep2.l600 is None  # absent, not zero
    assert rep2.l300 == 40.0


def test_summarize_monotone_max_and_drop():
    back = list(np.linspace(0, 80, 120))
    ben = [95.0] * 40 + [88.0] * 80
    s = series_of(back, ben)
    rep = summarize(s, (40, 100))
    assert rep.max_acc == pytest.approx(80.0)
    assert rep.ben_acc_drop == pytest.approx(95.0 - 88.0)
    assert rep.final_ben_acc == 88.0


def test_metric_series_csv_round_trip(tmp_path):
    s = series_of([1.5, 2.25, 99.875], config_hash="abc123", seed=7)
    s.region_estimate[1] = 0.1 + 0.2  # a value with float dust
    s.global_update_norm[0] = 1 / 3
    path = tmp_path / "metrics.csv"
    s.to_csv(path)
    back = MetricSeries.from_csv(path)
    assert back == s
    # byte stability
    s.to_csv(tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()


def test_metric_series_validates():
    with pytest.raises(ValueError):
        series_of([150.0])
    with pytest.raises(ValueError):
        MetricSeries([1.0], [1.0], [0.1], [1], [0], [])


# ---------------------------------------------------------------- config


BASE = {
    "experiment": {"total_clients": 12, "clients_per_round": 4, "total_rounds": 16,
                   "attack_start": 2, "attack_end": 10, "seed": 3},
    "data": {"classes": 4, "feature_dim": 5, "samples_per_class": 40,
             "test_per_class": 10, "validation_per_class": 2},
    "attack": {"kind": "migo", "backdoor": "edge", "dataset_size": 60,
               "backdoor_test_size": 20},
    "defense": {"name": "norm_clip", "tau": 0.5},
}


def deep_copy(d):
    return json.loads(json.dumps(d))


def test_parse_config_roundtrip_defaults():
    spec = parse_config_dict(deep_copy(BASE))
    assert spec.experiment.total_clients == 12
    assert spec.attack.kind == "migo"
    assert spec.defense.tau == 0.5
    assert spec.data.classes == 4


def test_unknown_table_and_key_rejected():
    bad = deep_copy(BASE)
    bad["extra"] = {}
    with pytest.raises(ConfigFileError):
        parse_config_dict(bad)
    bad = deep_copy(BASE)
    bad["attack"]["boost"] = 2
    with pytest.raises(ConfigFileError) as err:
        parse_config_dict(bad)
    assert "boost" in str(err.value)


def test_bad_types_and_values_rejected():
    bad = deep_copy(BASE)
    bad["experiment"]["total_rounds"] = "many"
    with pytest.raises(ConfigFileError):
        parse_config_dict(bad)
    bad = deep_copy(BASE)
    bad["defense"]["name"] = "firewall"
    with pytest.raises(ConfigFileError):
        parse_config_dict(bad)
    bad = deep_copy(BASE)
    bad["attack"]["mpr"] = "sometimes"
    with pytest.raises(ConfigFileError):
        parse_config_dict(bad)


def test_config_hash_semantics():
    a = parse_config_dict(deep_copy(BASE))
    b = parse_config_dict(deep_copy(BASE))
    assert config_hash(a) == config_hash(b)
    # seed excluded, reported separately
    seeded = deep_copy(BASE)
    seeded["experiment"]["seed"] = 99
    assert config_hash(parse_config_dict(seeded)) == config_hash(a)
    # any semantic field changes the hash
    changed = deep_copy(BASE)
    changed["experiment"]["local_lr"] = 0.01
    assert config_hash(parse_config_dict(changed)) != config_hash(a)
    changed = deep_copy(BASE)
    changed["defense"]["tau"] = 0.25
    assert config_hash(parse_config_dict(changed)) != config_hash(a)


def test_with_overrides():
    spec = parse_config_dict(deep_copy(BASE))
    spec2 = with_overrides(spec, seed=11, rounds=8)
    assert spec2.experiment.seed == 11
    assert spec2.experiment.total_rounds == 8
    assert spec2.experiment.attack_end == 8


def test_parse_config_toml_file(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(
        '[experiment]\ntotal_clients = 12\nclients_per_round = 4\n'
        'total_rounds = 16\nattack_start = 2\nattack_end = 10\n\n'
        '[attack]\nkind = "migo"\nbackdoor = "edge"\ndataset_size = 60\n'
        'backdoor_test_size = 20\nmpr = 0.3\n'
    )
    spec = parse_config(path)
    assert spec.experiment.total_clients == 12
    assert spec.attack.mpr == 0.3
    broken = tmp_path / "broken.toml"
    broken.write_text("[experiment\n")
    with pytest.raises(ConfigFileError):
        parse_config(broken)


# ---------------------------------------------------------------- cli


def write_config(tmp_path, name="exp.toml", defense='name = "none"'):
    path = tmp_path / name
    path.write_text(
        "[experiment]\n"
        "total_clients = 12\nclients_per_round = 4\ntotal_rounds = 14\n"
        "attack_start = 2\nattack_end = 10\nseed = 5\n"
        "local_epochs = 1\nlocal_batch_size = 8\nhidden_layers = [8]\n\n"
        "[data]\n"
        "classes = 4\nfeature_dim = 5\nsamples_per_class = 40\n"
        "test_per_class = 10\nvalidation_per_class = 2\n\n"
        "[attack]\n"
        'kind = "migo"\nbackdoor = "edge"\ndataset_size = 60\n'
        "backdoor_test_size = 20\nmpr = 0.3\n\n"
        f"[defense]\n{defense}\n"
    )
    return path


def test_cli_run_writes_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--outdir", str(out), "--quiet"]) == 0
    assert (out / "metrics.csv").exists()
    assert (out / "rounds.jsonl").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"max_acc", "l100", "l300", "l600", "final_ben_acc",
                            "ben_acc_drop", "config_hash", "seed"}
    assert summary["seed"] == 5
    assert len((out / "rounds.jsonl").read_text().splitlines()) == 14
    for svg in ("accuracy.svg", "norms.svg", "accepted.svg"):
        assert (out / svg).exists()


def test_cli_run_deterministic_across_threads(tmp_path):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(cfg), "--outdir", str(a), "--quiet", "--threads", "1"]) == 0
    assert main(["run", str(cfg), "--outdir", str(b), "--quiet", "--threads", "4"]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_cli_rejects_malformed_config(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[attack]\nkind = 'très'\n")
    assert main(["run", str(bad), "--quiet"]) == 2
    err = capsys.readouterr().err
    assert "kind" in err
    missing = tmp_path / "nope.toml"
    assert main(["run", str(missing), "--quiet"]) == 2


def test_cli_sweep_aggregates(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "sweep"
    assert main(["sweep", str(cfg), "--seeds", "2", "--outdir", str(out),
                 "--quiet", "--rounds", "10"]) == 0
    agg = json.loads((out / "sweep.json").read_text())
    assert agg["seeds"] == [5, 6]
    assert set(agg["max_acc"]) == {"mean", "std", "n"}
    assert (out / "seed5" / "metrics.csv").exists()
    assert (out / "seed6" / "metrics.csv").exists()


def test_cli_compare_matrix(tmp_path):
    cfg_a = write_config(tmp_path, "a.toml", defense='name = "none"')
    cfg_b = write_config(tmp_path, "b.toml", defense='name = "norm_clip"\ntau = 0.4')
    out = tmp_path / "cmp"
    assert main(["compare", str(cfg_a), str(cfg_b), "--outdir", str(out),
                 "--quiet", "--rounds", "10"]) == 0
    lines = (out / "compare.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[:2] == ["attack", "backdoor"]
    for d in ("none", "norm_clip"):
        for c in ("max_acc", "l100", "l300", "l600"):
            assert f"{d}:{c}" in header
    assert len(lines) == 2  # one (attack, backdoor) row
    assert lines[1].startswith("migo,edge")


def test_cli_plot_points_per_curve(tmp_path):
    s = series_of(list(np.linspace(0, 90, 10)), config_hash="h", seed=0)
    path = tmp_path / "metrics.csv"
    s.to_csv(path)
    out = tmp_path / "plots"
    assert main(["plot", str(path), "--outdir", str(out), "--quiet"]) == 0
    svg = (out / "accuracy.svg").read_text()
    curves = re.findall(r'<polyline points="([^"]+)" fill="none" stroke="#', svg)
    assert len(curves) == 2  # backdoor + benign accuracy
    for pts in curves:
        assert len(pts.split()) == 10  # one coordinate pair per round
    assert (out / "accepted.svg").exists()
