import json

import pytest

from stoprec.cli import main
from stoprec.config import ConfigError, load_config, parse_config, repro_config
from stoprec.sparse import read_matrix_market
from stoprec.tuner import load_dataset

TINY_TOML = """
seed = 3

[[matrices]]
id = "lap8"
family = "laplacian2d"
grid_param = 8

[[matrices]]
id = "adv8"
family = "advdiff2d"
grid_param = 8
peclet = 5.0
role = "heldout"

[grid]
alphas = [1.0, 4.0]
epsilons = [0.5, 0.25]
deltas = [0.5, 0.25]

[surrogate]
graph_hidden = 8
xa_hidden = 6
xm_hidden = 5
combined_hidden = 10
max_epochs = 10

[acquisition]
restarts = 2
raw_samples = 32

[tuner]
replicates = 2
budget = 3
batch_size = 2
xis = [0.05]
random_points = 2
"""


def err_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_gen_laplacian(tmp_path):
    out = tmp_path / "lap16.mtx"
    assert main(["gen", "--family", "laplacian2d", "--g", "16", "--out", str(out)]) == 0
    A = read_matrix_market(out)
    assert (A.nrows, A.ncols) == (225, 225)


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--family", "laplacian2d", "--g", "4", "--out", "x.mtx", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_missing_file_is_runtime_error(tmp_path, capsys):
    assert main(["solve", "--matrix", str(tmp_path / "nope.mtx")]) == 1
    assert err_json(capsys)["error"] == "FileNotFoundError"


def test_config_lists_every_problem(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text('seed = -1\nbogus = 1\n[[matrices]]\nid = "a"\nfamily = "laplacian2d"\ngrid_param = "x"\n'
                   '[tuner]\nreplicates = 1\nwhat = 2\n')
    assert main(["tune", "--config", str(cfg)]) == 3
    err = err_json(capsys)
    assert err["error"] == "config"
    text = "\n".join(err["details"])
    for needle in ("seed", "bogus", "grid_param", "replicates", "tuner.what"):
        assert needle in text


def test_parse_config_errors():
    with pytest.raises(ConfigError) as exc:
        parse_config({"matrices": [{"id": "a", "family": "laplacian2d", "grid_param": 8, "role": "heldout"},
                                   {"id": "a", "family": "laplacian2d", "grid_param": 8, "role": "heldout"}]})
    text = "\n".join(exc.value.problems)
    assert "duplicate" in text and "train" in text
    with pytest.raises(ConfigError):
        parse_config({})


def test_load_config(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(TINY_TOML)
    cfg = load_config(p)
    assert cfg.seed == 3 and cfg.mcmc.seed == 0
    assert [m.id for m in cfg.train_matrices] == ["lap8"] and [m.id for m in cfg.heldout_matrices] == ["adv8"]
    assert cfg.acquisition.acquisition_config(0.05, 1).raw_samples == 32
    assert cfg.with_seed(9).mcmc.seed == 9
    p.write_text("seed = [")
    with pytest.raises(ConfigError):
        load_config(p)


def test_repro_config_shape():
    cfg = repro_config(42)
    assert cfg.seed == cfg.mcmc.seed == cfg.surrogate.seed == 42
    assert len(cfg.train_matrices) == 3 and len(cfg.heldout_matrices) == 1
    assert len(cfg.grid.spec().points()) == 128


@pytest.fixture(scope="module")
def lap8(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    m = d / "lap8.mtx"
    assert main(["gen", "--family", "laplacian2d", "--g", "8", "--out", str(m)]) == 0
    return d, m


def test_precond_and_solve(lap8, capsys):
    d, m = lap8
    p = d / "P.mtx"
    assert main(["precond", "--matrix", str(m), "--alpha", "2", "--eps", "0.25", "--delta", "0.25",
                 "--out", str(p), "--report", str(d / "rep.json")]) == 0
    rep = json.loads((d / "rep.json").read_text())
    assert rep["chains_per_row"] == 8 and "build_wall_time" not in rep
    capsys.readouterr()
    assert main(["solve", "--matrix", str(m), "--precond", str(p)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["converged"]
    assert main(["solve", "--matrix", str(m), "--solver", "cg", "--out", str(d / "s.json")]) == 0
    assert json.loads((d / "s.json").read_text())["converged"]


def test_grid_train_propose_report(lap8, capsys):
    d, m = lap8
    data = d / "grid.jsonl"
    assert main(["grid", "--matrix", str(m), "--id", "lap8", "--replicates", "2", "--out", str(data)]) == 0
    assert len(load_dataset(data)) == 64
    model = d / "model.json"
    assert main(["train", "--data", str(data), "--matrix", f"lap8={m}", "--epochs", "5", "--out", str(model)]) == 0
    capsys.readouterr()
    assert main(["propose", "--model", str(model), "--matrix", f"lap8={m}", "--data", str(data), "--k", "3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and all("alpha" in json.loads(x) for x in lines)
    rep = d / "rep"
    assert main(["report", "coverage", "--data", str(data), "--model", str(model),
                 "--matrix", f"lap8={m}", "--out", str(rep)]) == 0
    assert len((rep / "coverage.csv").read_text().splitlines()) == 7
    assert main(["report", "inclusion", "--data", str(data), "--model", str(model),
                 "--matrix", f"lap8={m}", "--out", str(rep)]) == 0
    assert len(list(rep.glob("heatmap_alpha*.csv"))) == 4
    assert main(["report", "compare", "--data", str(data), "--out", str(rep)]) == 0
    assert json.loads((rep / "boxes.json").read_text())[0]["n"] == 64
    assert main(["report", "coverage", "--data", str(data), "--out", str(rep)]) == 1
    assert main(["train", "--data", str(data), "--matrix", f"other={m}", "--out", str(model)]) == 1


def test_tune_tiny_pipeline(tmp_path):
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(TINY_TOML)
    out = tmp_path / "out"
    assert main(["tune", "--config", str(cfg), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    for name in ("seed_dataset.jsonl", "adv8_grid.jsonl", "adv8_random.jsonl", "model_pre.json",
                 "bo_xi0.05_round0.jsonl", "bo_xi0.05_round1.jsonl", "compare_adv8.csv", "summary.json"):
        assert name in manifest and (out / name).exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed_dataset_size"] == 10
    assert summary["targets"]["adv8"]["evaluations"] == {"grid": 8, "random": 2, "bo_xi0.05": 3}
