import csv
import json
import threading

import numpy as np
import pytest

from fedlop import cli
from fedlop import experiment as ex
from fedlop.data import EncodedSet
from fedlop.model import build_network
from fedlop.nn_core import seeded_rng

TINY = {
    "strategy": "fecmap",
    "federation": {"n_clients": 3, "participation_rate": 1.0, "rounds": 3},
    "data": {"synthetic": {"n_students": 60, "seed": 1}, "samples_per_client": 60},
    "seeds": {"federation": 2, "split": 3},
}


def write_cfg(tmp_path, d, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    out = tmp_path / "out"
    monkeypatch.setenv("FEDLOP_OUT", str(out))
    return out


class TestConfig:
    def test_defaults(self):
        cfg = ex.config_from_dict({})
        assert (cfg.n_clients, cfg.participation_rate, cfg.rounds) == (5, 0.1, 500)
        assert cfg.hyper.local_steps == 15 and cfg.mode == "simulate"

    @pytest.mark.parametrize("bad, field", [
        ({"federation": {"rounds": "many"}}, "federation.rounds"),
        ({"strategy": "fedsgd"}, "strategy"),
        ({"hyper": {"momentum": 1.5}}, "hyper"),
        ({"hyper": {"lr": 0.1}}, "hyper.lr"),
        ({"federation": {"participation_rate": 0}}, "federation"),
        ({"data": {"split_ratio": 1.0}}, "data.split_ratio"),
        ({"data": {"csv": "nowhere.csv", "schema": {}}}, "data.csv"),
        ({"data": {"synthetic": {}, "csv": "x.csv"}}, "data"),
        ({"mode": "batch"}, "mode"),
        ({"colour": 1}, "colour"),
    ])
    def test_errors_name_field(self, bad, field):
        with pytest.raises(ex.ConfigError, match=field.replace(".", r"\.")):
            ex.config_from_dict(bad)

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{oops")
        with pytest.raises(ex.ConfigError):
            ex.load_config(p)

    def test_echo_round_trip(self):
        cfg = ex.config_from_dict(TINY)
        assert ex.config_from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()

    def test_case_study_parameters(self):
        cfg = ex.config_from_dict({"federation": {"n_clients": 5, "rounds": 20, "participation_rate": 0.1},
                                   "hyper": {"local_steps": 10, "learning_rate": 0.01}})
        fed = cfg.federation()
        assert (fed.n_clients, fed.rounds, fed.hyper.local_steps, fed.participation_rate) == (5, 20, 10, 0.1)


class TestRun:
    def test_outputs(self, tmp_path, out_dir):
        assert ex.run_experiment(write_cfg(tmp_path, TINY)) == 0
        hist = rows(out_dir / "history.csv")
        assert len(hist) == 3
        assert all(0.0 <= float(r["mean_accuracy"]) <= 1.0 for r in hist)
        metrics = json.loads((out_dir / "metrics.json").read_text())
        for m in metrics["clients"].values():
            c = np.array(m["confusion"])
            assert m["accuracy"] == pytest.approx(np.trace(c) / c.sum())
        echo = json.loads((out_dir / "config_echo.json").read_text())
        assert echo["seeds"] == {"federation": 2, "split": 3}

    def test_rerun_identical(self, tmp_path, out_dir):
        p = write_cfg(tmp_path, TINY)
        ex.run_experiment(p)
        first = (out_dir / "history.csv").read_bytes()
        ex.run_experiment(p)
        assert (out_dir / "history.csv").read_bytes() == first

    def test_missing_file_exit_2(self, tmp_path):
        assert ex.run_experiment(tmp_path / "absent.json") == 2

    def test_runtime_failure_exit_1(self, tmp_path, monkeypatch):
        def boom(cfg):
            raise RuntimeError("no memory")
        monkeypatch.setattr(ex, "simulate", boom)
        assert ex.run_experiment(write_cfg(tmp_path, TINY)) == 1

    def test_csv_source(self, tmp_path, out_dir):
        cfg = ex.config_from_dict(TINY)
        ex.gen_data(cfg, tmp_path / "data")
        from fedlop.data import SyntheticConfig
        d = dict(TINY, data={"csv": "data/client_0.csv",
                             "schema": SyntheticConfig().schema().to_dict(), "samples_per_client": 1})
        code = ex.run_experiment(write_cfg(tmp_path, d))
        assert code == 0 and len(rows(out_dir / "history.csv")) == 3


class TestSweep:
    def test_counting(self, tmp_path):
        cfg = ex.config_from_dict(TINY)
        got = ex.run_sweep(cfg, "n_clients", [2, 3, 4], ["fecmap", "fedavg"], out=tmp_path)
        assert len(got) == 6 and len(rows(tmp_path / "sweep.csv")) == 6

    def test_single_value_equals_run(self, tmp_path):
        cfg = ex.config_from_dict(TINY)
        (row,) = ex.run_sweep(cfg, "samples_per_client", [60], out=tmp_path / "s")
        hist = ex.run(cfg, tmp_path / "r")
        assert row["mean_accuracy"] == hist.mean_accuracy

    def test_failed_cell_recorded(self, tmp_path):
        cfg = ex.config_from_dict(TINY)
        got = ex.run_sweep(cfg, "n_clients", [0, 2], out=tmp_path)
        assert got[0]["status"].startswith("failed") and got[1]["status"] == "ok"

    def test_strategy_axis(self, tmp_path):
        cfg = ex.config_from_dict(TINY)
        got = ex.run_sweep(cfg, "strategy", ["fedper", "lgfed"], out=tmp_path)
        assert [r["strategy"] for r in got] == ["fedper", "lgfed"]

    def test_empty_values(self):
        with pytest.raises(ex.ConfigError):
            ex.run_sweep(ex.config_from_dict(TINY), "n_clients", [])


class TestRepresentations:
    def dataset(self, n=7):
        rng = seeded_rng(0)
        return EncodedSet(rng.uniform(size=(n, 12)), rng.uniform(size=(n, 15)), rng.integers(0, 5, n))

    def test_widths_and_rows(self, tmp_path):
        net = build_network(12, 15, seeded_rng(1))
        p = tmp_path / "rep.csv"
        ex.export_representations(net, self.dataset(), p)
        data = rows(p)
        assert len(data) == 7
        header = list(data[0])
        assert sum(h.startswith("global_") for h in header) == 6
        assert sum(h.startswith("combined_") for h in header) == 12
        assert sum(h.startswith("discriminative_") for h in header) == 5

    def test_zero_network(self, tmp_path):
        net = build_network(12, 15, seeded_rng(1))
        for g in net.groups:
            net.part(g).params = net.part(g).params.zeros_like()
        p = tmp_path / "rep.csv"
        ex.export_representations(net, self.dataset(), p)
        for r in rows(p):
            assert all(float(v) == 0.0 for k, v in r.items() if k != "label")

    def test_io_error_names_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            ex.export_representations(build_network(12, 15, seeded_rng(1)), self.dataset(),
                                      blocker / "sub" / "rep.csv")


class TestCli:
    def test_run_and_gen_data(self, tmp_path, out_dir, capsys):
        p = write_cfg(tmp_path, TINY)
        assert cli.main(["run", str(p)]) == 0
        assert (out_dir / "metrics.json").exists()
        assert cli.main(["gen-data", str(p)]) == 0
        assert (out_dir / "client_2.csv").exists() and (out_dir / "schema.json").exists()

    def test_sweep(self, tmp_path, out_dir, capsys):
        p = write_cfg(tmp_path, TINY)
        assert cli.main(["sweep", str(p), "--axis", "strategy", "--values", "fedavg,fedper"]) == 0
        assert len(rows(out_dir / "sweep.csv")) == 2

    def test_bad_config(self, tmp_path, capsys):
        assert cli.main(["run", str(tmp_path / "nope.json")]) == 2
        p = write_cfg(tmp_path, TINY)
        assert cli.main(["sweep", str(p), "--axis", "n_clients", "--values", "a,b"]) == 2
        assert "values" in capsys.readouterr().err

    def test_coordinator_and_agents(self, tmp_path, out_dir):
        import socket
        s = socket.create_server(("127.0.0.1", 0))
        port = s.getsockname()[1]
        s.close()
        d = dict(TINY, transport={"host": "127.0.0.1", "port": port, "round_timeout": 30})
        p = write_cfg(tmp_path, d)
        box = {}
        t = threading.Thread(target=lambda: box.setdefault("rc", cli.main(["coordinator", str(p)])))
        t.start()
        agents = [threading.Thread(target=lambda i=i: box.setdefault(
            i, cli.main(["agent", str(p), "--client-id", str(i), "--connect", f"127.0.0.1:{port}"])))
            for i in range(3)]
        for a in agents:
            a.start()
        t.join(60)
        for a in agents:
            a.join(10)
        assert box == {"rc": 0, 0: 0, 1: 0, 2: 0}
        assert len(rows(out_dir / "history.csv")) == 3

    def test_agent_bad_id(self, tmp_path):
        p = write_cfg(tmp_path, TINY)
        assert cli.main(["agent", str(p), "--client-id", "7", "--connect", "127.0.0.1:1"]) == 2
