import csv
import json

import pytest

from lgfa import io as lio
from lgfa.cli import main
from lgfa.map_model import ObjectBox


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    p = {k: d / n for k, n in (("frames", "frames.json"), ("gt", "gt.json"), ("map", "map.json"),
                               ("poses", "poses.csv"), ("completed", "completed.json"),
                               ("objects", "objects.json"), ("aug", "aug.json"))}
    assert main(["simulate", "--out-frames", str(p["frames"]), "--out-gt", str(p["gt"]),
                 "--log-level", "ERROR"]) == 0
    assert main(["build-map", "--frames", str(p["frames"]), "--out", str(p["map"]), "--log-level", "ERROR"]) == 0
    assert main(["localize", "--frames", str(p["frames"]), "--map", str(p["map"]),
                 "--init", "0.3,-0.2,0.5", "--out", str(p["poses"]), "--log-level", "ERROR"]) == 0
    assert main(["complete", "--frames", str(p["frames"]), "--map", str(p["map"]),
                 "--poses", str(p["poses"]), "--out", str(p["completed"]), "--log-level", "ERROR"]) == 0
    lio.write_objects(p["objects"], {3: [ObjectBox(5.0, 1.0, 0.1, 4.5, 1.8, "car")]})
    assert main(["augment", "--frames", str(p["frames"]), "--objects", str(p["objects"]),
                 "--map", str(p["completed"]), "--poses", str(p["poses"]), "--out", str(p["aug"]),
                 "--log-level", "ERROR"]) == 0
    return p


def test_pipeline_outputs(pipeline):
    frames = lio.read_frames(pipeline["frames"])
    assert len(frames) == 21
    gmap = lio.read_map(pipeline["map"])
    assert sum(1 for _ in gmap.all()) > 0
    rows = _rows(pipeline["poses"])
    assert list(rows[0]) == list(lio.POSE_COLUMNS)
    assert len(rows) == 21
    # the end frames see no crossing, so along-track is unobservable there
    for r in rows[1:-1]:
        assert float(r["trans_err_m"]) <= 0.05
        assert float(r["head_err_deg"]) <= 0.1
    completed = lio.read_completed(pipeline["completed"])
    assert sorted(completed) == list(range(21))
    aug = json.loads(pipeline["aug"].read_text())
    assert aug


def test_augment_from_plain_map(pipeline, tmp_path):
    out = tmp_path / "aug.json"
    assert main(["augment", "--frames", str(pipeline["frames"]), "--map", str(pipeline["map"]),
                 "--poses", str(pipeline["poses"]), "--out", str(out), "--log-level", "ERROR"]) == 0
    assert out.stat().st_size > 0


def test_pipeline_deterministic(pipeline, tmp_path):
    m2, p2 = tmp_path / "map.json", tmp_path / "poses.csv"
    assert main(["build-map", "--frames", str(pipeline["frames"]), "--out", str(m2), "--log-level", "ERROR"]) == 0
    assert m2.read_bytes() == pipeline["map"].read_bytes()
    assert main(["localize", "--frames", str(pipeline["frames"]), "--map", str(m2),
                 "--init", "0.3,-0.2,0.5", "--out", str(p2), "--log-level", "ERROR"]) == 0
    assert p2.read_bytes() == pipeline["poses"].read_bytes()


def test_gnss_protocol_init(pipeline, tmp_path):
    out = tmp_path / "poses.csv"
    assert main(["localize", "--frames", str(pipeline["frames"]), "--map", str(pipeline["map"]),
                 "--init", "gnss-protocol", "--alpha", "1", "--k", "4", "--no-truth",
                 "--out", str(out), "--log-level", "ERROR"]) == 0
    rows = _rows(out)
    assert all(r["trans_err_m"] == "" for r in rows)


def test_schema_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"frames": [{"t": "x"}]}')
    assert main(["build-map", "--frames", str(bad), "--out", str(tmp_path / "m.json")]) == 2
    report = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert report["exit_code"] == 2 and report["error"]


def test_invalid_json_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["build-map", "--frames", str(bad), "--out", str(tmp_path / "m.json")]) == 2


def test_unknown_cfg_exit_2(pipeline, tmp_path):
    args = ["build-map", "--frames", str(pipeline["frames"]), "--out", str(tmp_path / "m.json")]
    assert main(args + ["--cfg", "fusion.no_such_option=1"]) == 2
    assert main(args + ["--cfg", "nosection.x=1"]) == 2
    assert main(args + ["--cfg", "missing_equals"]) == 2


def test_bad_init_exit_2(pipeline, tmp_path):
    assert main(["localize", "--frames", str(pipeline["frames"]), "--map", str(pipeline["map"]),
                 "--init", "1,2", "--out", str(tmp_path / "p.csv")]) == 2


def test_unknown_flag_exits_2(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["build-map", "--frames", "x", "--out", "y", "--bogus"])
    assert e.value.code == 2


def test_strict_non_convergence_exit_3(pipeline, tmp_path):
    out = tmp_path / "p.csv"
    args = ["localize", "--frames", str(pipeline["frames"]), "--map", str(pipeline["map"]),
            "--init", "1.0,1.0,2.0", "--out", str(out), "--log-level", "ERROR",
            "--cfg", "localization.fine_iters=1", "--cfg", "localization.coarse_iters=1"]
    assert main(args) == 0
    assert main(args + ["--strict"]) == 3
    assert out.exists()  # outputs are written before the strict failure


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as e:
        main(["localize", "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--frames", "--map", "--init", "--alpha", "--out", "--config", "--cfg", "--strict"):
        assert flag in text


def test_bench_and_report(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--seeds", "1", "--alpha", "1", "--methods", "gnss,ours", "--frames", "10",
                 "--out", str(out), "--log-level", "ERROR"]) == 0
    rows = _rows(out / "loc_errors.csv")
    by_method = {r["method"]: r for r in rows}
    assert set(by_method) == {"gnss", "ours"}
    assert float(by_method["gnss"]["trans_err_mean_m"]) == pytest.approx(1.0, abs=1e-6)
    assert float(by_method["ours"]["trans_err_mean_m"]) <= 0.05
    for name in ("loc_cases.csv", "map_scenes.csv", "completion_cases.csv", "map_quality.csv",
                 "completion.csv", "loc_translation.svg", "completion.svg"):
        assert (out / name).exists(), name
    rep = tmp_path / "rep"
    assert main(["report", "--in", str(out), "--out", str(rep), "--log-level", "ERROR"]) == 0
    for name in ("loc_errors.csv", "map_quality.csv", "completion.csv"):
        assert (rep / name).read_bytes() == (out / name).read_bytes()


def test_report_empty_input_exit_3(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", "--in", str(empty), "--out", str(tmp_path / "o")]) == 3
