"""Config parsing, the method x seed grid, budget sweeps and the CLI."""

import dataclasses
import json
import textwrap

import numpy as np
import pytest

from oclearn.cli import RESULTS_ENV, main
from oclearn.datasets import payload_matrix
from oclearn.experiment import (
    PRESETS,
    ExperimentConfig,
    MethodSpec,
    SweepResult,
    _cell_classifier,
    base_partition,
    config_hash,
    format_sweep_table,
    load_config,
    run_budget_sweep,
    run_cell,
    run_experiment,
    run_partition,
    write_sweep_files,
)

# Small geometry so a full grid run stays in the tens of milliseconds.
TINY = dataclasses.replace(
    ExperimentConfig(),
    n_classes=4,
    dim=4,
    min_count=10,
    max_count=14,
    initial_classes=2,
    step_size=1,
    batch_size=8,
    architecture="linear",
    memory_budget=4,
    methods=("finetune",),
    seeds=(0,),
)


def write_ini(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text))
    return path


def all_samples(part):
    return [s for stream in part.task_streams for s in stream]


# -- method cells -----------------------------------------------------------


def test_method_spec_rejects_unknown_method():
    with pytest.raises(ValueError, match="unknown method"):
        MethodSpec("gradient_descent_forever")


def test_method_spec_rejects_unknown_policy():
    with pytest.raises(ValueError, match="exemplar_policy"):
        MethodSpec("replay_distill", exemplar_policy="psychic")


def test_preset_table():
    assert set(PRESETS) == {
        "cluster_contrastive", "cluster_plain", "herding_contrastive",
        "herding_plain", "random_contrastive", "icarl_ncm", "er", "gdumb",
        "finetune", "upper_bound",
    }
    full = PRESETS["cluster_contrastive"]
    assert (full.method, full.exemplar_policy) == ("replay_distill", "cluster")
    assert full.balanced_batch and full.contrastive
    plain = PRESETS["herding_plain"]
    assert (plain.balanced_batch, plain.contrastive) == (False, False)
    assert PRESETS["er"].method == "er"


def test_resolve_cell_prefers_custom_over_nothing():
    spec = MethodSpec("er")
    cfg = dataclasses.replace(TINY, custom_cells=(("mine", spec),))
    assert cfg.resolve_cell("mine") is spec
    assert cfg.resolve_cell("finetune") is PRESETS["finetune"]
    with pytest.raises(ValueError, match="unknown method cell 'nope'"):
        cfg.resolve_cell("nope")


def test_augment_policy_maps_config_fields():
    cfg = dataclasses.replace(
        TINY, flip_probability=0.25, blur_sigma_min=0.3, blur_sigma_max=1.5,
        feature_noise_sigma=0.07,
    )
    policy = cfg.augment_policy()
    assert policy.flip_probability == 0.25
    assert policy.blur_sigma_range == (0.3, 1.5)
    assert policy.feature_noise_sigma == 0.07


def test_default_config_is_the_benchmark_grid():
    cfg = ExperimentConfig()
    assert (cfg.n_classes, cfg.dim, cfg.memory_budget) == (10, 16, 20)
    assert cfg.modes_per_class == 2
    assert cfg.mode_weights == (0.85, 0.15)
    assert cfg.seeds == (0, 1, 2, 3, 4)
    assert (cfg.temperature, cfg.beta) == (2.0, 0.5)


# -- INI parsing ------------------------------------------------------------


def test_load_config_full_file(tmp_path):
    path = write_ini(tmp_path, """\
        [data]
        kind = blobs
        classes = 4
        dim = 5
        min_count = 10
        max_count = 14
        spread = 0.8
        separation = 5.0
        modes_per_class = 2
        mode_weights = 0.7, 0.3
        test_fraction = 0.25
        seed = 3

        [schedule]
        initial_classes = 2
        step_size = 1

        [training]
        batch_size = 8
        architecture = linear
        learning_rate = 0.2
        temperature = 3.0
        beta = 0.25

        [memory]
        budget = 4

        [augment]
        flip_probability = 0.0
        feature_noise_sigma = 0.05

        [run]
        methods = finetune, er
        seeds = 0, 1
        output = from_config
        """)
    cfg = load_config(path)
    assert cfg.n_classes == 4 and cfg.dim == 5 and cfg.data_seed == 3
    assert cfg.mode_weights == (0.7, 0.3)
    assert cfg.architecture == "linear" and cfg.beta == 0.25
    assert cfg.memory_budget == 4
    assert cfg.flip_probability == 0.0 and cfg.feature_noise_sigma == 0.05
    assert cfg.methods == ("finetune", "er") and cfg.seeds == (0, 1)
    assert cfg.output == "from_config"
    # Untouched keys keep their defaults.
    assert cfg.hidden_dim == ExperimentConfig().hidden_dim


def test_load_config_custom_cell(tmp_path):
    path = write_ini(tmp_path, """\
        [method.herding_off]
        method = replay_distill
        exemplar_policy = herding
        balanced_batch = no
        contrastive = off

        [run]
        methods = herding_off
        seeds = 0
        """)
    cfg = load_config(path)
    spec = cfg.resolve_cell("herding_off")
    assert spec == MethodSpec("replay_distill", "herding", False, False)


@pytest.mark.parametrize(
    ("body", "message"),
    [
        ("[extra]\nx = 1\n", "unknown section"),
        ("[data]\nnope = 3\n", "has no key 'nope'"),
        ("[training]\nbatch_size = many\n", "cannot parse 'many' as int"),
        ("[run]\nseeds = a, b\n", "seeds must be integers"),
        ("[data]\nmode_weights = x\n", "weights must be numbers"),
        ("[method.finetune]\nmethod = finetune\n", "shadows the preset"),
        ("[method.x]\nmethod = er\ncolour = red\n", "unknown keys"),
        ("[method.x]\nexemplar_policy = herding\n", "needs a 'method' key"),
        ("[method.x]\nmethod = nosuch\n", "unknown method"),
        ("[method.x]\nmethod = er\ncontrastive = maybe\n", "expected a boolean"),
        ("[method.]\nmethod = er\n", "empty custom cell name"),
        ("[run]\nmethods = nosuch\n", "unknown method cell"),
    ],
)
def test_load_config_rejects(tmp_path, body, message):
    path = write_ini(tmp_path, body)
    with pytest.raises(ValueError, match=message):
        load_config(path)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ValueError, match="nowhere.ini"):
        load_config(tmp_path / "nowhere.ini")


def test_config_hash_is_stable_and_sensitive():
    assert config_hash(TINY) == config_hash(dataclasses.replace(TINY))
    assert len(config_hash(TINY)) == 12
    int(config_hash(TINY), 16)
    assert config_hash(TINY) != config_hash(dataclasses.replace(TINY, beta=0.51))
    with_cell = dataclasses.replace(TINY, custom_cells=(("x", MethodSpec("er")),))
    assert config_hash(with_cell) != config_hash(TINY)


# -- partitions -------------------------------------------------------------


def test_base_partition_is_cached_per_config():
    assert base_partition(TINY) is base_partition(dataclasses.replace(TINY))
    assert base_partition(TINY) is not base_partition(
        dataclasses.replace(TINY, data_seed=TINY.data_seed + 1)
    )


def test_base_partition_count_bounds():
    part = base_partition(TINY)
    train = all_samples(part)
    for class_id, tests in part.test_sets.items():
        n = sum(1 for s in train if s.label == class_id) + len(tests)
        assert TINY.min_count <= n <= TINY.max_count


def test_base_partition_rejects_inverted_count_range():
    bad = dataclasses.replace(TINY, min_count=30, max_count=20)
    with pytest.raises(ValueError, match="exceeds max_count"):
        base_partition(bad)


def test_run_partition_is_deterministic_per_seed():
    a, b = run_partition(TINY, 1), run_partition(TINY, 1)
    sa, sb = all_samples(a), all_samples(b)
    assert [s.label for s in sa] == [s.label for s in sb]
    assert [s.arrival_index for s in sa] == [s.arrival_index for s in sb]
    np.testing.assert_array_equal(payload_matrix(sa), payload_matrix(sb))
    assert a.schedule == b.schedule


def test_run_partition_varies_with_seed():
    a = run_partition(TINY, 0)
    b = run_partition(TINY, 1)
    assert [s.label for s in all_samples(a)] != [s.label for s in all_samples(b)]
    # Same underlying data either way.
    assert sorted(a.test_sets) == sorted(b.test_sets)


def test_budget_translation_for_fixed_capacity_methods():
    n_classes = len(base_partition(TINY).test_sets)
    for name in ("er", "gdumb"):
        clf = _cell_classifier(TINY, TINY.resolve_cell(name), 0)
        assert clf.memory_size == TINY.memory_budget * n_classes
    per_class = _cell_classifier(TINY, TINY.resolve_cell("cluster_contrastive"), 0)
    assert per_class.memory_size == TINY.memory_budget


# -- running cells ----------------------------------------------------------


def test_run_cell_returns_named_metrics(tmp_path):
    metrics = run_cell(TINY, "finetune", 0, checkpoint_dir=tmp_path)
    assert metrics.method == "finetune" and metrics.seed == 0
    n_phases = run_partition(TINY, 0).schedule.num_phases
    assert len(metrics.step_accuracy) == n_phases
    assert (tmp_path / "finetune.seed0.bin").exists()
    assert (tmp_path / "finetune.seed0.json").exists()


def test_run_experiment_writes_result_files(tmp_path):
    cfg = dataclasses.replace(TINY, methods=("finetune",), seeds=(0, 1))
    out = tmp_path / "results"
    result = run_experiment(cfg, out)
    assert result.ok
    assert result.config_fingerprint == config_hash(cfg)
    assert {(m.method, m.seed) for m in result.runs} == {("finetune", 0), ("finetune", 1)}
    assert (out / "metrics.csv").exists()
    assert (out / "metrics.json").exists()
    assert (out / "curves" / "curve_finetune.dat").exists()
    for seed in (0, 1):
        assert (out / "checkpoints" / f"finetune.seed{seed}.bin").exists()
    report = json.loads((out / "report.json").read_text())
    assert report["config_fingerprint"] == result.config_fingerprint
    assert report["config"]["n_classes"] == cfg.n_classes
    assert [c["status"] for c in report["cells"]] == ["ok", "ok"]
    assert all(c["error"] is None for c in report["cells"])


def test_run_experiment_without_out_dir_writes_nothing(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    result = run_experiment(TINY)
    assert result.ok and len(result.runs) == 1
    assert list(tmp_path.iterdir()) == []


def test_run_experiment_rejects_duplicate_cells():
    cfg = dataclasses.replace(TINY, seeds=(0, 0))
    with pytest.raises(ValueError, match="duplicate cells"):
        run_experiment(cfg)


def test_run_experiment_isolates_failing_cells(tmp_path):
    # er refuses an odd batch size at fit time; finetune accepts it.
    cfg = dataclasses.replace(TINY, batch_size=7, methods=("finetune", "er"),
                              seeds=(0,))
    out = tmp_path / "results"
    result = run_experiment(cfg, out)
    assert not result.ok
    assert [m.method for m in result.runs] == ["finetune"]
    (cell, seed, trace), = result.failures
    assert (cell, seed) == ("er", 0)
    assert "even batch_size" in trace
    report = json.loads((out / "report.json").read_text())
    status = {(c["cell"], c["seed"]): c["status"] for c in report["cells"]}
    assert status == {("finetune", 0): "ok", ("er", 0): "failed"}
    failed = next(c for c in report["cells"] if c["status"] == "failed")
    assert "even batch_size" in failed["error"]
    assert failed["average_accuracy"] is None


def test_run_experiment_report_written_even_when_all_cells_fail(tmp_path):
    cfg = dataclasses.replace(TINY, batch_size=7, methods=("er",), seeds=(0,))
    out = tmp_path / "results"
    result = run_experiment(cfg, out)
    assert not result.runs
    assert not (out / "metrics.csv").exists()
    report = json.loads((out / "report.json").read_text())
    assert report["cells"][0]["status"] == "failed"


def test_parallel_execution_matches_serial(tmp_path):
    cfg = dataclasses.replace(TINY, methods=("finetune", "er"), seeds=(0,))
    serial = run_experiment(cfg)
    parallel = run_experiment(cfg, jobs=2)
    key = lambda m: (m.method, m.seed)
    assert sorted(serial.runs, key=key) == sorted(parallel.runs, key=key)


# -- budget sweep -----------------------------------------------------------


def test_run_budget_sweep_table():
    cfg = dataclasses.replace(TINY, methods=("finetune", "gdumb"), seeds=(0,))
    result = run_budget_sweep(cfg, [2, 4])
    assert result.ok and result.budgets == (2, 4)
    assert set(result.table) == {"finetune", "gdumb"}
    for budget in (2, 4):
        cell = result.table["gdumb"][budget]
        assert set(cell) == {"average_mean", "average_std", "final_mean", "final_std"}
        assert 0.0 <= cell["final_mean"] <= 1.0


def test_run_budget_sweep_rejects_bad_budget_lists():
    for budgets in ([], [3, 3]):
        with pytest.raises(ValueError, match="distinct integers"):
            run_budget_sweep(TINY, budgets)


def test_format_sweep_table_layout():
    result = SweepResult(
        budgets=(2, 4),
        table={"finetune": {2: {"average_mean": 0.5, "average_std": 0.0,
                                "final_mean": 0.25, "final_std": 0.0}}},
        failures=(),
    )
    lines = format_sweep_table(result).splitlines()
    assert lines[0].startswith("method") and "q=2" in lines[0] and "q=4" in lines[0]
    assert "0.500/0.250" in lines[1]
    assert lines[1].rstrip().endswith("--")  # missing budget cell


def test_write_sweep_files(tmp_path):
    cfg = dataclasses.replace(TINY, methods=("gdumb",), seeds=(0,))
    result = run_budget_sweep(cfg, [3])
    write_sweep_files(result, tmp_path)
    doc = json.loads((tmp_path / "sweep.json").read_text())
    assert doc["budgets"] == [3]
    assert "3" in doc["table"]["gdumb"]
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "method,budget,average_mean,average_std,final_mean,final_std"
    assert lines[1].startswith("gdumb,3,")


# -- command line -----------------------------------------------------------

TINY_INI = """\
    [data]
    classes = 4
    dim = 4
    min_count = 10
    max_count = 14

    [schedule]
    step_size = 1

    [training]
    batch_size = 8
    architecture = linear

    [memory]
    budget = 4

    [run]
    methods = finetune
    seeds = 0
    """


def test_cli_run_writes_results(tmp_path, capsys):
    ini = write_ini(tmp_path, TINY_INI)
    out = tmp_path / "out"
    assert main(["run", "--config", str(ini), "--out", str(out)]) == 0
    captured = capsys.readouterr()
    assert f"results written to {out}" in captured.out
    assert "finetune" in captured.out
    assert (out / "metrics.csv").exists()
    assert (out / "report.json").exists()


def test_cli_run_seed_and_method_overrides(tmp_path):
    ini = write_ini(tmp_path, TINY_INI)
    out = tmp_path / "out"
    code = main(["run", "--config", str(ini), "--out", str(out),
                 "--methods", "gdumb", "--seeds", "0,1", "--budget", "2"])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert {(c["cell"], c["seed"]) for c in report["cells"]} == {("gdumb", 0), ("gdumb", 1)}
    assert report["config"]["memory_budget"] == 2


def test_cli_output_dir_precedence(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    env_dir = tmp_path / "from_env"
    monkeypatch.setenv(RESULTS_ENV, str(env_dir))
    ini = write_ini(tmp_path, TINY_INI)
    assert main(["run", "--config", str(ini)]) == 0
    assert (env_dir / "metrics.csv").exists()

    # A config output beats the environment; --out beats both.
    cfg_dir = tmp_path / "from_config"
    ini2 = write_ini(tmp_path, TINY_INI + f"output = {cfg_dir}\n", name="out.ini")
    assert main(["run", "--config", str(ini2)]) == 0
    assert (cfg_dir / "metrics.csv").exists()
    flag_dir = tmp_path / "from_flag"
    assert main(["run", "--config", str(ini2), "--out", str(flag_dir)]) == 0
    assert (flag_dir / "metrics.csv").exists()


def test_cli_default_results_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(RESULTS_ENV, raising=False)
    ini = write_ini(tmp_path, TINY_INI)
    assert main(["run", "--config", str(ini)]) == 0
    assert (tmp_path / "results" / "metrics.csv").exists()


def test_cli_bad_config_exits_2(tmp_path, capsys):
    ini = write_ini(tmp_path, "[nope]\nx = 1\n")
    assert main(["run", "--config", str(ini)]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_cli_unknown_method_exits_2(capsys):
    assert main(["run", "--methods", "nosuch", "--seeds", "0"]) == 2
    assert "unknown method cell" in capsys.readouterr().err


def test_cli_malformed_seed_list_is_an_argparse_error():
    with pytest.raises(SystemExit) as excinfo:
        main(["run", "--seeds", "a,b"])
    assert excinfo.value.code == 2


def test_cli_failing_cell_exits_1(tmp_path, capsys):
    ini = write_ini(tmp_path, TINY_INI.replace("batch_size = 8", "batch_size = 7")
                    .replace("methods = finetune", "methods = finetune, er"))
    out = tmp_path / "out"
    assert main(["run", "--config", str(ini), "--out", str(out)]) == 1
    assert "FAILED: er seed 0" in capsys.readouterr().err


def test_cli_sweep_writes_table_and_files(tmp_path, capsys):
    ini = write_ini(tmp_path, TINY_INI)
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(ini), "--out", str(out),
                 "--budgets", "2,4"]) == 0
    captured = capsys.readouterr()
    assert "q=2" in captured.out and "q=4" in captured.out
    assert f"sweep written to {out}" in captured.out
    assert (out / "sweep.json").exists()
    assert (out / "sweep.csv").exists()
