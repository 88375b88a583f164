import json
import subprocess
import sys

import pytest

from geoprompt.checkpoint import load_checkpoint
from geoprompt.cli import main
from geoprompt.config import load_config
from geoprompt.retrieval import read_dump

TINY_INI = """
[experiment]
profile = desk
seed = 1
[city]
image_size = 16
renders_per_class = 4
database_per_class = 1
queries_per_class = 4
[image_encoder]
depth = 2
width = 8
output_dim = 16
input_size = 16
[text_encoder]
depth = 1
width = 16
heads = 2
output_dim = 16
[stage1]
epochs = 2
batch_size = 32
[stage2]
epochs = 2
batch_size = 8
iterations_per_group = 2
groups_in_cycle = 2
images_per_class = 2
"""


@pytest.fixture(scope="module")
def tiny_ini(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    p.write_text(TINY_INI)
    return p


@pytest.fixture(scope="module")
def pipeline(tiny_ini, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--config", str(tiny_ini), "--out", str(out)]) == 0
    return out


def error_of(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def test_run_writes_every_artifact(pipeline):
    for rel in ["resolved_config.ini", "data/manifest.csv", "stage1/stage1.ckpt",
                "stage1/stage1_log.csv", "stage2/stage2.ckpt", "stage2/stage2_log.csv",
                "stage2/stage2_val.csv", "embeddings/val.pgeo", "embeddings/database.pgeo",
                "report/metrics.csv"]:
        assert (pipeline / rel).is_file(), rel
    assert list((pipeline / "report" / "strips").glob("*.png"))


def test_resolved_config_reruns_exactly(pipeline, tiny_ini):
    assert load_config(pipeline / "resolved_config.ini") == load_config(tiny_ini)


def test_rerun_gives_identical_metrics(pipeline, tiny_ini, tmp_path):
    assert main(["run", "--config", str(tiny_ini), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "report/metrics.csv").read_bytes() == \
        (pipeline / "report/metrics.csv").read_bytes()


def test_stage2_checkpoint_echoes_config(pipeline):
    ck = load_checkpoint(pipeline / "stage2/stage2.ckpt")
    assert ck["kind"] == "stage2" and ck["seed"] == 1
    assert ck["config"]["stage2"]["epochs"] == 2
    assert ck["extra"]["cursor"]["next_epoch"] == 2
    assert not any(name.startswith("text.") for name in ck["tensors"])


def test_evaluate_identical_dumps_is_perfect(pipeline, tiny_ini, tmp_path):
    dump = pipeline / "embeddings/database.pgeo"
    assert main(["evaluate", "--config", str(tiny_ini), "--query", str(dump), "--database",
                 str(dump), "--manifest", str(pipeline / "data/manifest.csv"),
                 "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[1].endswith(",1,25,1.000000")


def test_extract_test_split(pipeline, tiny_ini, tmp_path):
    main(["extract", "--config", str(tiny_ini), "--checkpoint",
          str(pipeline / "stage2/stage2.ckpt"), "--manifest", str(pipeline / "data/manifest.csv"),
          "--split", "test", "--out", str(tmp_path)])
    val = read_dump(pipeline / "embeddings/val.pgeo")
    test = read_dump(tmp_path / "test.pgeo")
    assert test.count > 0 and set(val.ids).isdisjoint(test.ids)


def test_stage2_without_stage1_fails(pipeline, tiny_ini, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train-stage2", "--config", str(tiny_ini), "--manifest",
              str(pipeline / "data/manifest.csv"), "--out", str(tmp_path)])
    assert exc.value.code != 0
    err = error_of(capsys)
    assert err["error"] == "missing_stage1" and "stage-1 checkpoint" in err["message"]


def test_stage2_resume_continues(pipeline, tiny_ini, tmp_path):
    ini = tmp_path / "more.ini"
    ini.write_text(TINY_INI.replace("[stage2]\nepochs = 2", "[stage2]\nepochs = 3"))
    assert main(["train-stage2", "--config", str(ini), "--manifest",
                 str(pipeline / "data/manifest.csv"), "--stage1", str(pipeline / "stage1/stage1.ckpt"),
                 "--resume", str(pipeline / "stage2/stage2.ckpt"), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "stage2_val.csv").read_text().splitlines()
    assert lines[1].startswith("2,") and lines[-1].startswith("3,")


def test_unknown_flag_is_single_line_json(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--out", "x", "--bogus"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert len(err.strip().splitlines()) == 1 and json.loads(err)["error"] == "usage"


def test_unreadable_config(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate-data", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)])
    assert exc.value.code == 1 and error_of(capsys)["error"] == "config"


@pytest.mark.parametrize("offset,byte,needle", [(0, b"Z", "magic"), (4, b"\x07", "version 7")])
def test_corrupt_checkpoint_rejected(pipeline, tiny_ini, tmp_path, capsys, offset, byte, needle):
    raw = bytearray((pipeline / "stage2/stage2.ckpt").read_bytes())
    raw[offset:offset + 1] = byte
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(SystemExit) as exc:
        main(["extract", "--config", str(tiny_ini), "--checkpoint", str(bad), "--manifest",
              str(pipeline / "data/manifest.csv"), "--split", "val", "--out", str(tmp_path)])
    err = error_of(capsys)
    assert exc.value.code == 1 and err["error"] == "format" and needle in err["message"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "geoprompt", "evaluate", "--out", str(tmp_path),
                           "--query", str(tmp_path / "q.pgeo"), "--database",
                           str(tmp_path / "d.pgeo"), "--manifest", str(tmp_path / "m.csv")],
                          capture_output=True, text=True)
    assert proc.returncode != 0
    assert json.loads(proc.stderr.strip().splitlines()[-1])["error"] in ("missing_manifest", "input")
