import csv
import json

import numpy as np
import pytest

from llfmc import cli
from llfmc.core import ObservedMatrix, save_csv_coo
from llfmc.graph import PairGraph


@pytest.fixture
def ratings(tmp_path):
    """A small low-rank rating matrix in MovieLens tab format plus a held-out file."""
    rng = np.random.default_rng(0)
    n, m = 30, 24
    R = np.clip(np.rint(3 + rng.normal(size=(n, 2)) @ rng.normal(size=(2, m))), 1, 5)
    mask = rng.random((n, m)) < 0.5
    mask[:, 0] = mask[0, :] = True
    held = mask & (rng.random((n, m)) < 0.15)
    held[:, 0] = held[0, :] = False
    lines = {"train": [], "test": []}
    for i in range(n):
        for j in range(m):
            if mask[i, j]:
                lines["test" if held[i, j] else "train"].append(f"{i + 1}\t{j + 1}\t{R[i, j]:g}\t0")
    base, test = tmp_path / "r.base", tmp_path / "r.test"
    base.write_text("\n".join(lines["train"]) + "\n")
    test.write_text("\n".join(lines["test"]) + "\n")
    return base, test


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_auto_graph_writes_outputs(ratings, tmp_path):
    base, test = ratings
    out = tmp_path / "run"
    code = cli.main(["train", "--data", str(base), "--test", str(test), "--auto-graph", "d2",
                     "--k", "5", "--rank", "2", "--max-iter", "300", "--tol1", "1e-9",
                     "--tol2", "1e-12", "--out", str(out)])
    assert code == 0
    for name in ("X.csv", "Y.csv", "trace.jsonl", "metrics.json", "metrics.csv",
                 "manifest.json", "graph_x.csv", "graph_y.csv"):
        assert (out / name).exists(), name
    metrics = json.loads((out / "metrics.json").read_text())
    assert np.isfinite(metrics["test_rmse"]) and metrics["test_rmse"] < 2.0
    man = json.loads((out / "manifest.json").read_text())
    assert man["inputs"]["data"]["sha256"] and man["config"]["rank"] == 2
    assert man["command_line"][0] == "train"


def test_train_is_reproducible_from_manifest(ratings, tmp_path):
    base, test = ratings
    out = tmp_path / "a"
    cli.main(["train", "--data", str(base), "--test", str(test), "--auto-graph", "d2", "--k", "4",
              "--rank", "2", "--max-iter", "30", "--seed", "3", "--out", str(out)])
    argv = json.loads((out / "manifest.json").read_text())["command_line"]
    again = [a if a != str(out) else str(tmp_path / "b") for a in argv]
    assert cli.main(again) == 0
    for name in ("X.csv", "Y.csv", "trace.jsonl"):
        if name == "trace.jsonl":
            strip = [{k: v for k, v in json.loads(line).items() if k != "wall_time"}
                     for line in (out / name).read_text().splitlines()]
            other = [{k: v for k, v in json.loads(line).items() if k != "wall_time"}
                     for line in (tmp_path / "b" / name).read_text().splitlines()]
            assert strip == other
        else:
            assert (out / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_gamma_zero_baseline(ratings, tmp_path):
    base, test = ratings
    out = tmp_path / "base"
    assert cli.main(["train", "--data", str(base), "--test", str(test), "--gamma-x", "0",
                     "--gamma-y", "0", "--rank", "2", "--max-iter", "40", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["penalty_x.gamma"] == 0.0 and man["config"]["penalty_y.gamma"] == 0.0


def test_train_two_pass(ratings, tmp_path):
    base, test = ratings
    out = tmp_path / "two"
    code = cli.main(["train", "--data", str(base), "--test", str(test), "--auto-graph", "d2",
                     "--weighting", "adaptive", "--k", "3", "--two-pass", "--refine-k", "3",
                     "--t", "1e9", "--rank", "2", "--max-iter", "40", "--out", str(out)])
    assert code == 0
    assert json.loads((out / "metrics.json").read_text())["test_rmse"] > 0


def test_train_inadmissible_eta_exits_with_config_code(ratings, tmp_path, capsys):
    base, _ = ratings
    g = tmp_path / "g.csv"
    g.write_text("l1,l2,w\n0,1,100\n")
    code = cli.main(["train", "--data", str(base), "--graph-x", str(g), "--eta", "1",
                     "--penalty", "mcp", "--t", "2", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "eta" in capsys.readouterr().err


def test_data_errors_exit_3(tmp_path):
    missing = tmp_path / "none.data"
    assert cli.main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad.data"
    bad.write_text("1\tx\t3\t0\n")
    assert cli.main(["train", "--data", str(bad), "--out", str(tmp_path / "o")]) == 3


def test_bad_config_exits_2(ratings, tmp_path):
    base, _ = ratings
    cfg = tmp_path / "c.cfg"
    cfg.write_text("nonsense = 1\n")
    assert cli.main(["train", "--data", str(base), "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2


def test_divergence_exits_4(tmp_path):
    rng = np.random.default_rng(1)
    M = ObservedMatrix.from_dense(rng.normal(size=(6, 5)) * 1e15)
    path = tmp_path / "m.csv"
    save_csv_coo(M, path)
    assert cli.main(["train", "--data", str(path), "--format", "csv", "--rank", "2",
                     "--max-iter", "50", "--out", str(tmp_path / "o")]) == 4


def test_evaluate_roundtrip(ratings, tmp_path):
    base, test = ratings
    fit = tmp_path / "fit"
    cli.main(["train", "--data", str(base), "--test", str(test), "--rank", "2",
              "--max-iter", "30", "--out", str(fit)])
    want = json.loads((fit / "metrics.json").read_text())["test_rmse"]
    ev = tmp_path / "ev"
    assert cli.main(["evaluate", "--x", str(fit / "X.csv"), "--y", str(fit / "Y.csv"),
                     "--data", str(test), "--train", str(base), "--out", str(ev)]) == 0
    got = json.loads((ev / "metrics.json").read_text())["rmse"]
    assert got == pytest.approx(want, rel=1e-12)


def test_sweep_two_by_two_with_baseline(ratings, tmp_path):
    base, test = ratings
    out = tmp_path / "sw"
    code = cli.main(["sweep", "--data", str(base), "--test", str(test), "--gammas", "0,2",
                     "--rank", "2", "--max-iter", "20", "--auto-graph", "d2", "--k", "4",
                     "--out", str(out)])
    assert code == 0
    rows = read_rows(out / "sweep.csv")
    assert len(rows) == 4
    assert sum(r["baseline"] == "True" for r in rows) == 1
    summary = json.loads((out / "metrics.json").read_text())
    assert summary["cells"] == 4 and "test_rmse" in summary


def test_sweep_empty_grid_is_config_error(ratings, tmp_path):
    base, test = ratings
    assert cli.main(["sweep", "--data", str(base), "--test", str(test), "--gammas", "",
                     "--out", str(tmp_path / "o")]) == 2


def test_full_grid_cell_count():
    g = cli.parse_grid("2^-2..10")
    assert g[0] == 0.25 and g[-1] == 1024.0 and len(g) == 13
    assert len(cli.grid_cells(g, g, [0.5, 2, 20])) == 13 * 13 * 3
    assert len(cli.grid_cells(g, g, [0.5, 2, 20], tie=True)) == 13 * 3


def test_synth_row_and_outputs(tmp_path):
    out = tmp_path / "syn"
    code = cli.main(["synth", "--n", "40", "--d", "3", "--k", "4", "--rho", "0.4",
                     "--max-iter", "30", "--out", str(out)])
    assert code == 0
    row = read_rows(out / "relerr.csv")[0]
    assert row["label"] == "subgroups"
    assert float(row["relerr_llfmc"]) > 0 and float(row["relerr_baseline"]) > 0
    S = np.loadtxt(out / "S_truth.csv", delimiter=",")
    assert S.shape == (40, 40) and S.sum() == 4 * 10 * 10


def test_synth_no_subgroups_label(tmp_path):
    out = tmp_path / "syn"
    assert cli.main(["synth", "--n", "20", "--d", "2", "--k", "20", "--max-iter", "10",
                     "--out", str(out)]) == 0
    assert read_rows(out / "relerr.csv")[0]["label"] == "no subgroups"


def test_synth_seed_repeat_identical(tmp_path):
    args = ["synth", "--n", "30", "--d", "2", "--k", "3", "--max-iter", "15", "--seed", "4"]
    cli.main(args + ["--out", str(tmp_path / "a")])
    cli.main(args + ["--out", str(tmp_path / "b")])
    for name in ("relerr.csv", "X.csv", "S_llfmc.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_generator_error_exit_code(tmp_path):
    assert cli.main(["synth", "--n", "3", "--d", "1", "--k", "1", "--rho", "0.05",
                     "--out", str(tmp_path / "o")]) == 3


def test_graph_build(ratings, tmp_path):
    base, _ = ratings
    out = tmp_path / "g"
    assert cli.main(["graph-build", "--data", str(base), "--distance", "d2", "--k", "3",
                     "--side", "cols", "--cut", "--out", str(out)]) == 0
    g = PairGraph.from_csv(out / "graph_y.csv")
    assert g.n_nodes == 24 and g.n_edges == 23 and np.all(g.w > 0)


def test_threads_env_validation(monkeypatch):
    monkeypatch.setenv("LLFMC_THREADS", "1")
    assert cli.n_workers() == 1
    monkeypatch.setenv("LLFMC_THREADS", "many")
    with pytest.raises(cli.ConfigError):
        cli.n_workers()
