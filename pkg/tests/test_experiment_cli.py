import csv
import re

import numpy as np
import pytest

from fedafa import config as cfgmod
from fedafa.cli import EXIT_CONFIG, EXIT_CORRUPT, EXIT_MISSING, build_parser, main
from fedafa.config import ConfigError, ExperimentConfig
from fedafa.data import Dataset, load_dataset
from fedafa.experiment import (build_benchmark, compute_metrics, run_experiment, sweep, validate_sweep,
                               write_per_class_csv)
from fedafa.federation import ClientState
from fedafa.model import init_model


# -- config -----------------------------------------------------------------------

def test_config_round_trip():
    c = ExperimentConfig(lam=0.7, hidden=(8, 4), step_size=0.3, every_round=True, method="fedavg_ros")
    assert cfgmod.loads(cfgmod.dumps(c)) == c
    assert cfgmod.loads(cfgmod.dumps(cfgmod.DESK_DEFAULTS)) == cfgmod.DESK_DEFAULTS


@pytest.mark.parametrize("text", [
    "[fedafa]\nlam = 1.5\n", "[fedafa]\np_d = 1.0\n", "[partition]\nalpha = 0\n",
    "[data]\nimbalance_factor = 0.5\n", "[run]\nbogus = 1\n", "[run]\nlam = 0.5\n", "not a config",
    "[train]\nrounds = many\n",
])
def test_bad_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        cfgmod.loads(text)


def test_readme_config_example_is_the_default():
    import pathlib
    readme = (pathlib.Path(__file__).parents[1] / "README.md").read_text()
    block = readme.split("[run]", 1)[1].split("```", 1)[0]
    assert cfgmod.loads("[run]" + block) == cfgmod.DESK_DEFAULTS


def test_seed_precedence(tmp_path, monkeypatch):
    path = tmp_path / "c.cfg"
    path.write_text("[run]\nseed = 3\n")
    monkeypatch.delenv("FEDAFA_SEED", raising=False)
    assert cfgmod.load(path).seed == 3
    monkeypatch.setenv("FEDAFA_SEED", "11")
    assert cfgmod.load(path).seed == 11
    assert cfgmod.load(path, seed=5).seed == 5


# -- metrics ----------------------------------------------------------------------

class _Fixed:
    """Stand-in model returning fixed predictions."""

    def __init__(self, fn):
        self.fn = fn

    def predict(self, x):
        return self.fn(x)


def _test_set(C=8, n=250, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(C), n)
    return Dataset(rng.normal(size=(len(labels), 2)), labels, C)


def test_perfect_classifier_scores_100():
    test = _test_set()
    lookup = {x.tobytes(): y for x, y in zip(test.features, test.labels)}
    perfect = _Fixed(lambda x: np.eye(8)[[lookup[r.tobytes()] for r in x.astype(np.float32)]])
    clients = [ClientState(k, test, test) for k in range(3)]
    m = compute_metrics({k: perfect for k in range(3)}, clients, test)
    assert m.local_acc == [100.0] * 3 and m.global_acc == [100.0] * 3
    assert m.per_class_acc == [100.0] * 8


def test_random_classifier_is_near_chance():
    test = _test_set(n=250)  # 2000 samples
    rng = np.random.default_rng(1)
    guess = _Fixed(lambda x: rng.random((len(x), 8)))
    m = compute_metrics({0: guess}, [ClientState(0, test, test)], test)
    np.testing.assert_allclose(m.per_class_acc, 100 / 8, atol=3 * 100 * np.sqrt(1 / 8 * 7 / 8 / 250))
    assert abs(m.mean_acc - 12.5) < 3


def test_metrics_match_brute_force_loop():
    test = _test_set(C=4, n=30, seed=2)
    model = init_model((2, 6, 5, 4), 0, seed=3)
    m = compute_metrics({0: model}, [ClientState(0, test, test)], test)
    probs = model.predict(test.features)
    hits = [0] * 4
    for row, y in zip(probs, test.labels):
        best = max(range(4), key=lambda c: row[c])
        hits[y] += best == y
    assert m.per_class_acc == pytest.approx([100 * h / 30 for h in hits])
    assert m.local_acc[0] == pytest.approx(100 * sum(hits) / 120)


def test_missing_model_is_an_error():
    test = _test_set(C=2, n=3)
    with pytest.raises(KeyError):
        compute_metrics({}, [ClientState(0, test, test)], test)


# -- experiment ---------------------------------------------------------------------

def test_benchmark_shape(tiny):
    bench = build_benchmark(tiny)
    assert len(bench.clients) == 4
    assert bench.global_counts.tolist() == [120, 56, 26, 12]
    assert bench.global_test.class_counts().tolist() == [40] * 4
    assert sum(c.n_k + len(c.test) for c in bench.clients) == int(bench.global_counts.sum())


@pytest.mark.parametrize("method", cfgmod.METHODS)
def test_every_method_runs(tiny, method):
    res = run_experiment(tiny.replace(method=method))
    assert len(res.metrics.client_acc) == 4 and len(res.metrics.per_class_acc) == 4
    assert len(res.rounds) == (0 if method == "local" else 2)
    assert 0 <= res.metrics.mean_acc <= 100


def test_local_eval_view(tiny):
    res = run_experiment(tiny.replace(eval_on="local", method="fedavg_ft"))
    assert res.metrics.client_acc == res.metrics.local_acc


def test_every_round_personalization_reports(tiny):
    res = run_experiment(tiny.replace(every_round=True, method="fedavg_ft"), use_cache=False)
    assert [len(r.client_acc) for r in res.rounds] == [2, 2]


def test_sweep_validation_and_single_value(tiny):
    with pytest.raises(ConfigError):
        validate_sweep("lambda", [0.2, 1.4], tiny)
    with pytest.raises(ConfigError):
        validate_sweep("boundary_index", [0, 5], tiny)
    with pytest.raises(ConfigError):
        validate_sweep("rounds", [1], tiny)
    (row,) = sweep(tiny, "lambda", [0.6], seeds=[0])
    assert row.mean_acc == pytest.approx(run_experiment(tiny.replace(lam=0.6)).metrics.mean_acc)


# -- CLI ------------------------------------------------------------------------------

GOLDEN_HEADERS = {
    "rounds.csv": "round,mean_acc,std_acc",
    "final.csv": "client_id,n_k,acc",
    "per_class.csv": "class_id,global_count,acc",
}
NUM = r"-?\d+(\.\d{4})?|nan"


def test_train_twice_gives_identical_metrics(tmp_path, tiny_args):
    assert main(["train", "--seed", "7", "--out-dir", str(tmp_path / "a"), *tiny_args]) == 0
    assert main(["train", "--seed", "7", "--out-dir", str(tmp_path / "b"), "--workers", "3", *tiny_args]) == 0
    for name, header in GOLDEN_HEADERS.items():
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        lines = a.decode().split("\n")
        assert lines[0] == header and lines[-1] == ""
        for line in lines[1:-1]:
            assert all(re.fullmatch(NUM, cell) for cell in line.split(",")), line
    assert (tmp_path / "a" / "models" / "global.fafa").exists()
    assert (tmp_path / "a" / "models" / "client_003.fafa").exists()


def test_gen_data_and_partition(tmp_path, tiny_args):
    out = str(tmp_path)
    assert main(["gen-data", "--out-dir", out, *tiny_args]) == 0
    assert main(["partition", "--out-dir", out, *tiny_args]) == 0
    import json
    manifest = json.loads((tmp_path / "partition.json").read_text())
    assert [m["client_id"] for m in manifest] == [0, 1, 2, 3]
    assert set(manifest[0]) == {"client_id", "n_k", "class_counts", "seed", "alpha", "imbalance_factor"}
    pool = load_dataset(tmp_path / "train_pool.fdst")
    assert sum(m["n_k"] for m in manifest) == len(pool)
    assert np.sum([m["class_counts"] for m in manifest], axis=0).tolist() == pool.class_counts().tolist()


def test_sweep_then_report(tmp_path, tiny_args):
    sw = tmp_path / "sw"
    assert main(["sweep", "--param", "lambda", "--values", "0,0.5,1.0", "--out-dir", str(sw), *tiny_args]) == 0
    rows = list(csv.reader(open(sw / "sweep.csv")))
    assert rows[0] == ["param", "value", "mean_acc", "std_acc"] and len(rows) == 4
    rep = tmp_path / "rep"
    assert main(["report", str(sw), "--out-dir", str(rep), *tiny_args]) == 0
    assert (rep / "report.csv").read_text().splitlines()[0] == "param,value,mean_acc,std_acc"


def test_personalize_and_per_class_report(tmp_path, tiny_args):
    run = tmp_path / "run"
    assert main(["train", "--out-dir", str(run), "--set", "method=fedavg_ft", *tiny_args]) == 0
    assert main(["personalize", "--out-dir", str(run), "--method", "fedafa", *tiny_args]) == 0
    assert main(["report", "--baseline", str(run), "--compare", str(run / "fedafa"),
                 "--out-dir", str(tmp_path / "rep"), *tiny_args]) == 0
    rows = list(csv.reader(open(tmp_path / "rep" / "per_class_delta.csv")))
    assert rows[0] == ["class_id", "global_count", "acc_baseline", "acc_method", "delta"]
    assert len(rows) == 5
    for r in rows[1:]:
        assert float(r[4]) == pytest.approx(float(r[3]) - float(r[2]), abs=1e-3)


def test_per_class_writer(tmp_path):
    write_per_class_csv(tmp_path / "p.csv", [10, 5], [50.0, 20.0], [55.0, 40.0])
    assert (tmp_path / "p.csv").read_text() == (
        "class_id,global_count,acc_baseline,acc_method,delta\n0,10,50.0000,55.0000,5.0000\n"
        "1,5,20.0000,40.0000,20.0000\n")


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--no-such-flag"])
    assert e.value.code == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == EXIT_MISSING
    (tmp_path / "bad.cfg").write_text("[fedafa]\nlam = 2\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg")]) == EXIT_CONFIG
    (tmp_path / "bad.fdst").write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNK")
    assert main(["partition", "--data", str(tmp_path / "bad.fdst"), "--out-dir", str(tmp_path)]) == EXIT_CORRUPT
    assert main(["sweep", "--param", "p_d", "--values", "0.5,1.0", "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("fedafa:") for line in err[-4:])


def test_help_documents_exit_codes():
    text = build_parser().format_help()
    for code in ("0", "2", "3", "4", "5"):
        assert re.search(rf"^\s+{code}\s+\S", text, re.M)
