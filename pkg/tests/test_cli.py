import json

import pytest

from genrec import pipeline
from genrec.cli import main
from genrec.corpus import save_interactions
from genrec.synthetic import planted_blocks

FAST = ["--d", "16", "--w", "4", "--layers", "1", "--epochs", "1"]


@pytest.fixture
def data(tmp_path):
    log, _, _ = planted_blocks(num_users=30, num_items=20, blocks=2, per_user=6, seed=0)
    p = tmp_path / "log.tsv"
    save_interactions(log, p)
    return p


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.delenv(pipeline.WORKDIR_ENV, raising=False)
    return tmp_path / "work"


def run(*argv):
    return main([str(a) for a in argv])


def test_ingest_writes_layout(data, workdir, capsys):
    assert run("ingest", "--data", data, "--workdir", workdir) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["num_users"] == 30
    for sub in pipeline.SUBDIRS:
        assert (workdir / sub).is_dir()
    assert (workdir / "data" / "test.tsv").exists()


def test_missing_data_file(workdir, capsys):
    assert run("ingest", "--data", workdir / "nope.tsv", "--workdir", workdir) == 5
    assert "error[missing]" in capsys.readouterr().err


def test_bad_data_line(tmp_path, workdir, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("u1 i1\nonlyone\n")
    assert run("ingest", "--data", bad, "--workdir", workdir) == 4
    err = capsys.readouterr().err
    assert "error[data]" in err and ":2:" in err


def test_index_requires_ingest(workdir, capsys):
    assert run("index", "--workdir", workdir) == 5
    assert "ingest" in capsys.readouterr().err


def test_train_requires_index(data, workdir, capsys):
    run("ingest", "--data", data, "--workdir", workdir)
    assert run("train", "--workdir", workdir) == 5
    assert "index" in capsys.readouterr().err


def test_index_deterministic_and_flags(data, workdir):
    run("ingest", "--data", data, "--workdir", workdir)
    assert run("index", "--workdir", workdir, "--method", "sci", "--target", "coui", "--n", 50) == 0
    first = (workdir / "index" / "items.tsv").read_bytes()
    assert b"# N=50" in first and b"# target=coui" in first
    assert run("index", "--workdir", workdir, "--method", "sci", "--target", "coui", "--n", 50) == 0
    assert (workdir / "index" / "items.tsv").read_bytes() == first


def test_gci_ui_index(data, workdir):
    run("ingest", "--data", data, "--workdir", workdir)
    assert run("index", "--workdir", workdir, "--method", "gci", "--target", "ui", "--n", 20, "--e", 64) == 0
    text = (workdir / "index" / "users.tsv").read_text()
    assert "# scheme=collaborative" in text and "# E=64" in text


def test_hash_mismatch_rejected(data, workdir, capsys):
    run("ingest", "--data", data, "--workdir", workdir)
    run("index", "--workdir", workdir, "--n", 3)
    assert run("train", "--workdir", workdir, "--n", 4, *FAST) == 6
    assert "error[mismatch]" in capsys.readouterr().err


def test_full_chain(data, workdir, capsys):
    run("ingest", "--data", data, "--workdir", workdir)
    assert run("graphs", "--workdir", workdir) == 0
    assert (workdir / "graphs" / "user_item.tsv").read_text().startswith("# node_a")
    assert run("index", "--workdir", workdir, "--target", "coui", "--n", 5) == 0
    assert run("train", "--workdir", workdir, "--target", "coui", "--n", 5, *FAST) == 0
    loss = (workdir / "model" / "loss.csv").read_text().splitlines()
    assert loss[0] == "epoch,loss" and len(loss) == 2
    capsys.readouterr()

    args = ["--workdir", workdir, "--target", "coui", "--n", 5, *FAST]
    assert run("recommend", *args, "--user", "u3", "--topk", 10) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 10
    catalog = {line.split("\t")[0] for line in (workdir / "index" / "items.tsv").read_text().splitlines()
               if not line.startswith("#")}
    assert {line.split("\t")[2] for line in lines} <= catalog
    assert [line.split("\t")[1] for line in lines] == [str(k) for k in range(1, 11)]

    assert run("recommend", *args, "--user", "nobody") == 4

    assert run("evaluate", *args) == 0
    first = (workdir / "reports" / "metrics.json").read_bytes()
    assert run("evaluate", *args) == 0
    assert (workdir / "reports" / "metrics.json").read_bytes() == first
    csv = (workdir / "reports" / "metrics.csv").read_text().splitlines()
    assert csv[0].startswith("method,target,N,M,E,w,HR@5")
    assert csv[1].startswith("sci,coui,5,20,64,4,")


def test_config_file_and_flag_precedence(data, workdir, tmp_path, monkeypatch):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"data": str(data), "workdir": str(tmp_path / "from_file"), "index": {"N": 7}}))
    c = pipeline.load_config(str(cfg), {"index.N": 9})
    assert c.index.N == 9 and c.workdir.endswith("from_file")
    monkeypatch.setenv(pipeline.WORKDIR_ENV, str(tmp_path / "from_env"))
    assert pipeline.load_config(str(cfg), {}).workdir.endswith("from_env")
    assert pipeline.load_config(str(cfg), {"workdir": str(workdir)}).workdir == str(workdir)


def test_config_errors(tmp_path, workdir, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"index": {"bogus": 1}}))
    assert run("index", "--config", cfg) == 3
    assert "bogus" in capsys.readouterr().err
    assert run("index", "--workdir", workdir, "--n", 1) == 3
    with pytest.raises(SystemExit) as exc:
        run("index", "--method", "kmeans")
    assert exc.value.code == 2


def test_seed_propagates():
    c = pipeline.load_config(None, {"seed": 11})
    assert c.index.seed == 11


def test_sweep_rows_and_na(data, workdir, capsys):
    code = run("sweep", "--data", data, "--workdir", workdir, "--axis", "w", "--values", "4,8,0",
               "--d", 16, "--layers", 1, "--epochs", 1, "--n", 5)
    assert code == 0
    rows = (workdir / "reports" / "sweep_w.csv").read_text().strip().splitlines()
    assert len(rows) == 4
    by_w = {r.split(",")[5]: r.split(",") for r in rows[1:]}
    assert by_w["0"][6:] == ["NA"] * 7
    assert int(by_w["8"][10]) - int(by_w["4"][10]) == 2 * 16 * 2 * 4  # 2dw per layer, 2 layers


def test_single_value_sweep_matches_run(data, workdir):
    common = ["--data", data, "--d", 16, "--w", 4, "--layers", 1, "--epochs", 1, "--n", 5]
    assert run("run", "--workdir", workdir / "single", *common) == 0
    assert run("sweep", "--workdir", workdir / "sw", "--axis", "N", "--values", "5", *common) == 0
    single = (workdir / "single" / "reports" / "metrics.csv").read_text().splitlines()[1].split(",")
    swept = (workdir / "sw" / "reports" / "sweep_N.csv").read_text().splitlines()[1].split(",")
    assert single[:12] == swept[:12]  # identical except the timing column


def test_synthetic_ingest(workdir, capsys):
    assert run("ingest", "--synthetic", "--workdir", workdir) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["num_users"] == 200 and stats["num_items"] == 100
