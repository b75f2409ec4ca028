import json

import pytest

from caseforge.cli import main
from caseforge.config import ExperimentConfig, load_config
from caseforge.errors import ConfigError
from caseforge.experiment import RunSummary, comparison_table, load_summary, run_baseline, run_experiment

from conftest import TINY_DATA, TINY_MODEL

MODEL_OVERRIDES = {k: list(v) if isinstance(v, tuple) else v for k, v in TINY_MODEL.items()
                   if k not in ("height", "width", "num_classes")}


def _config_dict(out_dir, **kw):
    d = {
        "version": "1",
        "name": "tiny",
        "seed": 0,
        "data": dict(TINY_DATA),
        "model": MODEL_OVERRIDES,
        "train": {"total_iters": 2, "batch_size": 8, "num_instances": 2},
        "protocols": ["rr", "gr", "rr:changed"],
        "out_dir": str(out_dir),
    }
    d.update(kw)
    return d


def _write(tmp_path, d, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


# configuration

def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(_config_dict(tmp_path, ablation={"disable_l_rec": True}))
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.to_dict() == cfg.to_dict()
    assert cfg.disabled_losses() == ("l_rec",)


def test_unknown_key_suggests_the_right_one(tmp_path):
    d = _config_dict(tmp_path)
    d["train"]["hyper"] = {"lamda_I": 0.2}
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict(d)
    assert "lamda_I" in str(exc.value) and "lambda_I" in str(exc.value)
    for bad in ({"sede": 1}, {"ablation": {"disable_l_foo": True}}, {"version": "2"},
                {"ablation": {f"disable_{n}": True for n in ("l_id", "l_tri", "l_adv_DF", "l_rec", "l_adv_DI")}}):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({**_config_dict(tmp_path), **bad})


def test_cli_config_error_is_json(tmp_path, capsys):
    d = _config_dict(tmp_path)
    d["train"]["hyper"] = {"lamda_I": 0.2}
    code = main(["run", "--config", str(_write(tmp_path, d))])
    err = _err(capsys)
    assert code != 0 and err["error"] == "invalid_config" and "lambda_I" in err["message"]


def test_cli_usage_error_is_json(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--protocol", "xx"])
    assert exc.value.code != 0
    assert _err(capsys)["error"] == "usage"


def test_cli_missing_dataset(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("CASEFORGE_DATA_DIR", raising=False)
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) != 0
    assert _err(capsys)["error"] == "missing_file"
    assert main(["train", "--out", str(tmp_path / "o")]) != 0
    assert _err(capsys)["error"] == "invalid_config"


# experiments

@pytest.fixture(scope="module")
def runs(tmp_path_factory, tiny_manifest):
    base = tmp_path_factory.mktemp("runs")
    full = ExperimentConfig.from_dict(_config_dict(base / "full"))
    ablated = ExperimentConfig.from_dict(_config_dict(base / "norec", ablation={"disable_l_rec": True}))
    return {
        "full": run_experiment(full, manifest=tiny_manifest),
        "again": run_experiment(ExperimentConfig.from_dict(_config_dict(base / "again")), manifest=tiny_manifest),
        "norec": run_experiment(ablated, manifest=tiny_manifest),
        "base": run_baseline(ExperimentConfig.from_dict(_config_dict(base / "base")), manifest=tiny_manifest),
        "dir": base,
    }


def test_run_outputs(runs):
    out = runs["dir"] / "full"
    index = json.loads((out / "manifest.json").read_text())
    for rel in index.values():
        assert (out / rel).exists()
    s = load_summary(out)
    assert set(s.reports) == {"rr", "gr", "rr:changed"}
    assert s.config_hash and s.wall_time_s > 0
    assert (out / "table.md").read_text().count("\n") == 3


def test_runs_are_reproducible(runs):
    assert runs["full"].metrics() == runs["again"].metrics()
    assert runs["full"].final_losses["last"] == runs["again"].final_losses["last"]


def test_ablation_is_recorded(runs):
    s = runs["norec"]
    assert s.disabled == ["l_rec"]
    assert "w/o l_rec" in comparison_table([s])
    assert set(s.reports) == {"rr", "gr", "rr:changed"}


def test_baseline_summary(runs):
    s = runs["base"]
    assert s.mode == "baseline" and s.disabled == []
    assert s.final_losses["last"]["l_adv_DF"] is None


def test_report_sorting_and_rows(runs, tmp_path):
    summaries = [runs["full"], runs["norec"], runs["base"]]
    md = comparison_table(summaries)
    rows = md.strip().splitlines()[2:]
    maps = [float(r.split("|")[5]) for r in rows]   # rr mAP column
    assert maps == sorted(maps, reverse=True)
    assert len(comparison_table([runs["full"]]).strip().splitlines()) == 3
    twin = comparison_table([runs["full"], runs["again"]]).strip().splitlines()[2:]
    assert twin[0] == twin[1]
    csv = comparison_table(summaries, "csv")
    assert csv.splitlines()[0].startswith("Method,rr R1")


def test_report_sort_matches_oracle():
    def fake(name, m):
        r = {"rank1": m, "rank5": m, "rank10": m, "map": m}
        return RunSummary(name, "casenet", "h", 0, [], {"rr": r}, {})
    vals = [0.3, 0.9, 0.1, 0.5]
    rows = comparison_table([fake(f"r{i}", v) for i, v in enumerate(vals)]).strip().splitlines()[2:]
    assert [r.split("|")[1].strip() for r in rows] == [f"r{i}" for i in sorted(range(4), key=lambda i: -vals[i])]


def test_report_missing_summary(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) != 0
    assert _err(capsys)["error"] == "missing_file"


def test_stage_failure_names_the_stage(tmp_path, tiny_manifest):
    from caseforge.errors import StageError
    d = _config_dict(tmp_path / "bad", train={"total_iters": 1, "batch_size": 64, "num_instances": 2})
    with pytest.raises(StageError) as exc:
        run_experiment(ExperimentConfig.from_dict(d), manifest=tiny_manifest)
    assert exc.value.stage == "train"


# command line end to end

def test_cli_end_to_end(tmp_path, capsys, monkeypatch):
    cfg = _write(tmp_path, _config_dict(tmp_path / "run"))
    data = tmp_path / "data"
    assert main(["generate-data", "--config", str(cfg), "--seed", "1", "--out", str(data)]) == 0
    capsys.readouterr()
    monkeypatch.setenv("CASEFORGE_DATA_DIR", str(data))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "tr")]) == 0
    ckpt = tmp_path / "tr" / "checkpoint"
    assert (ckpt / "checkpoint.json").is_file()
    assert json.loads((tmp_path / "tr" / "manifest.json").read_text())["checkpoint"] == "checkpoint"
    capsys.readouterr()

    assert main(["evaluate", "--ckpt", str(ckpt), "--protocol", "gr", "--out", str(tmp_path / "rep.json")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert {"protocol", "cmc", "map", "n_query", "n_gallery", "dropped_queries"} <= set(rep)
    assert rep["protocol"] == "gr"
    assert main(["evaluate", "--ckpt", str(ckpt), "--clothing", "changed"]) == 0
    capsys.readouterr()

    emb = tmp_path / "emb.bin"
    assert main(["embed", "--ckpt", str(ckpt), "--split", "gallery", "--out", str(emb)]) == 0
    capsys.readouterr()
    assert main(["retrieve", "--embeddings", str(emb), "--query-id", "0", "--k", "3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and lines[0].startswith("1\t")
    assert main(["retrieve", "--embeddings", str(emb), "--query-id", "9999"]) != 0
    assert _err(capsys)["error"] == "invalid_config"

    run_cfg = _write(tmp_path, _config_dict(tmp_path / "run", data_dir=str(data)), "run.json")
    assert main(["run", "--config", str(run_cfg)]) == 0
    assert main(["run-baseline", "--config", str(run_cfg), "--out", str(tmp_path / "base")]) == 0
    capsys.readouterr()
    assert main(["report", str(tmp_path / "run"), str(tmp_path / "base"), "--format", "csv"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 3


def test_train_resume_via_cli(tmp_path, tiny_manifest, capsys):
    d = _config_dict(tmp_path / "r")
    cfg = _write(tmp_path, d)
    assert main(["train", "--config", str(cfg), "--data", str(tiny_manifest.root), "--out", str(tmp_path / "a")]) == 0
    d["train"]["total_iters"] = 3
    cfg3 = _write(tmp_path, d, "cfg3.json")
    assert main(["train", "--config", str(cfg3), "--data", str(tiny_manifest.root), "--out", str(tmp_path / "a"),
                 "--resume", str(tmp_path / "a" / "checkpoint")]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["step"] == 3
    log = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in log] == [1, 2, 3]


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
