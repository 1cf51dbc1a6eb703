import json
import re
import subprocess
import sys

import pytest

from keytree.cli import build_parser, main
from keytree.config import DEMO_DIR, available_presets, build_config

from conftest import GOLDEN

SPEC_FLAGS = ["--config", "--seed", "--k-init", "--max-breadth", "--threshold", "--branch-width", "--max-depth",
              "--llm", "--captioner", "--parallel", "--tree-out", "--format"]


@pytest.fixture(autouse=True)
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("VIDEOTREE_API_KEY", raising=False)
    return tmp_path


def test_demo_smoke_subprocess(tmp_path):
    out = subprocess.run([sys.executable, "-m", "keytree.cli", "run", "--demo", "--uid", "syn-0"],
                         capture_output=True, text=True, cwd=tmp_path)
    assert out.returncode == 0, out.stderr
    assert re.fullmatch(r"prediction: [A-E]\n", out.stdout)
    assert (tmp_path / "syn-0.record.json").exists()


def test_run_matches_goldens(tmp_path, capsys):
    assert main(["run", "--demo", "--uid", "syn-1", "--tree-out", "t", "--mask-timings"]) == 0
    assert capsys.readouterr().out == "prediction: D\n"
    assert (tmp_path / "syn-1.record.json").read_bytes() == (GOLDEN / "demo_record.json").read_bytes()
    assert (tmp_path / "t.json").read_bytes() == (GOLDEN / "demo_tree.json").read_bytes()
    assert (tmp_path / "t.dot").read_bytes() == (GOLDEN / "demo_tree.dot").read_bytes()


def test_tree_out_single_format(tmp_path):
    assert main(["run", "--demo", "--uid", "syn-2", "--tree-out", "g", "--format", "graph"]) == 0
    assert (tmp_path / "g.dot").exists() and not (tmp_path / "g.json").exists()


def test_run_twice_same_record(tmp_path):
    for name in ("a.json", "b.json"):
        assert main(["run", "--demo", "--uid", "syn-3", "--seed", "7", "--out", name, "--mask-timings"]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert json.loads((tmp_path / "a.json").read_text())["config"]["pipeline"]["seed"] == 7


def test_inline_question(tmp_path, capsys):
    argv = ["run", "--llm", "mock:keyword", "--assets", str(DEMO_DIR), "--video-id", "synvid0",
            "--question", "Which object does C handle while in the kitchen?",
            "--options", "zebra mug", "copper kettle", "rubber hose", "leather wallet", "paper lantern",
            "--k-init", "4", "--max-breadth", "4", "--threshold", "1", "--branch-width", "2"]
    assert main(argv) == 0
    assert capsys.readouterr().out.startswith("prediction: ")
    assert (tmp_path / "inline.record.json").exists()


def test_missing_features_exit_3(capsys):
    assert main(["run", "--demo", "--uid", "syn-0", "--features", "nowhere.vtrf"]) == 3
    assert "nowhere.vtrf" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["run", "--demo", "--uid", "nope"]) == 2
    assert main(["run", "--demo", "--uid", "syn-0", "--k-init", "64"]) == 2
    assert main(["run", "--config", "no-such-preset"]) == 2
    (tmp_path / "bad.toml").write_text("[pipeline]\nbogus = 1\n")
    assert main(["run", "--config", "bad.toml"]) == 2


def test_backend_failure_exit_4(tmp_path):
    (tmp_path / "short.jsonl").write_text('{"response": "prediction: A, frame relevance: [1,1,1,1]"}\n')
    assert main(["run", "--demo", "--uid", "syn-0", "--llm", "mock:short.jsonl"]) == 4


def test_eval_outputs(tmp_path, capsys):
    assert main(["eval", "--demo", "--parallel", "4", "--out-dir", "out", "--mask-timings"]) == 0
    assert "accuracy 1.0000 (4/4)" in capsys.readouterr().out
    out = tmp_path / "out"
    assert (out / "predictions.json").read_bytes() == (GOLDEN / "demo_predictions.json").read_bytes()
    assert (out / "report.json").read_bytes() == (GOLDEN / "demo_report.json").read_bytes()
    assert sorted(p.name for p in (out / "records").iterdir()) == [f"syn-{i}.json" for i in range(4)]
    assert "captioning" in (out / "report.txt").read_text()


def test_eval_empty_dataset_exit_2(tmp_path):
    (tmp_path / "empty.json").write_text("[]")
    assert main(["eval", "--demo", "--dataset", "empty.json"]) == 2


def test_eval_preset_echoes_paper_defaults(tmp_path):
    argv = ["eval", "--config", "egoschema.defaults", "--llm", "mock:keyword", "--assets", str(DEMO_DIR),
            "--dataset", str(DEMO_DIR / "dataset.json"), "--out-dir", "ego"]
    assert main(argv) == 0
    pipe = json.loads((tmp_path / "ego" / "report.json").read_text())["config"]["pipeline"]
    assert (pipe["max_breadth"], pipe["max_depth"], pipe["branch_width"], pipe["rele_num_thresh"]) == (32, 3, 4, 4)
    assert pipe["k_init"] == 8 and pipe["fps"] == 1.0


@pytest.mark.parametrize(
    "preset, expected",
    [
        ("egoschema.defaults", (8, 32, 4, 4, 3, 1.0)),
        ("nextqa.defaults", (4, 8, 3, 2, 3, 1.0)),
        ("videomme.defaults", (8, 32, 4, 4, 3, 0.125)),
    ],
)
def test_presets(preset, expected):
    p = build_config(preset).pipeline
    assert (p.k_init, p.max_breadth, p.rele_num_thresh, p.branch_width, p.max_depth, p.fps) == expected
    assert preset in available_presets()


def test_flags_override_file(tmp_path):
    (tmp_path / "c.toml").write_text("[pipeline]\nk_init = 2\nmax_breadth = 16\n[backends]\nllm = \"mock:x.jsonl\"\n")
    cfg = build_config("c.toml", {"k_init": 4, "seed": None})
    assert cfg.pipeline.k_init == 4 and cfg.pipeline.max_breadth == 16
    assert cfg.resolved_backends.llm_endpoint == f"mock:{tmp_path / 'x.jsonl'}"
    assert cfg.backends.llm_endpoint == "mock:x.jsonl"


def test_inspect_golden(capsys):
    assert main(["inspect", str(GOLDEN / "demo_record.json")]) == 0
    assert capsys.readouterr().out == (GOLDEN / "demo_inspect.txt").read_text()


def test_inspect_dot_and_json(capsys):
    assert main(["inspect", str(GOLDEN / "demo_record.json"), "--format", "dot"]) == 0
    assert capsys.readouterr().out == (GOLDEN / "demo_tree.dot").read_text()
    assert main(["inspect", str(GOLDEN / "demo_record.json"), "--format", "json"]) == 0
    assert capsys.readouterr().out == (GOLDEN / "demo_record.json").read_text()


@pytest.mark.parametrize("content", ["{", "[]", '{"uid": "x"}'], ids=["truncated", "array", "missing-fields"])
def test_inspect_corrupt_exit_5(tmp_path, content):
    (tmp_path / "r.json").write_text(content)
    assert main(["inspect", "r.json"]) == 5


def subcommand_help(name):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    return sub.choices[name].format_help()


@pytest.mark.parametrize("name", ["run", "eval", "inspect"])
def test_help_lists_each_flag_once(name):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command").choices[name]
    text = re.split(r"\n(?:options|optional arguments):\n", sub.format_help())[1]
    flags = [o for a in sub._actions for o in a.option_strings if o.startswith("--")]
    for flag in flags:
        assert len(re.findall(rf"(?<![\w-]){re.escape(flag)}(?![\w-])", text)) == 1, flag


def test_help_covers_documented_flags():
    text = "".join(subcommand_help(n) for n in ("run", "eval", "inspect"))
    for flag in SPEC_FLAGS:
        assert flag in text
