"""Tests for the command-line surface: outputs, exit codes, reproducibility."""

import json
import os

import pytest

from sonagent.bench import read_items_jsonl, score_run
from sonagent.cli import main
from sonagent.fixtures import build_demo_bundle, load_manifest


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("bundle"))
    build_demo_bundle(root, seed=7)
    return root


@pytest.fixture(scope="module")
def items(bundle):
    return read_items_jsonl(os.path.join(bundle, "bench", "items.jsonl"))


def cfg_path(bundle):
    return os.path.join(bundle, "config.json")


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_ask_item_by_id(bundle, items, capsys, tmp_path):
    snapshot = str(tmp_path / "bank.json")
    code, out, err = run_cli(
        capsys, "ask", "--config", cfg_path(bundle),
        "--item-id", items[0].item_id,
        "--items", os.path.join(bundle, "bench", "items.jsonl"),
        "--dump-bank", snapshot)
    assert code == 0 and err == ""
    assert f"decision: {items[0].answer}" in out
    assert f"expected: {items[0].answer}" in out
    assert "Findings:" in out
    assert os.path.isfile(snapshot)


def test_ask_item_file_json_output(bundle, items, capsys, tmp_path):
    item_file = tmp_path / "one-item.json"
    item_file.write_text(json.dumps(items[0].to_dict()))
    code, out, _ = run_cli(capsys, "ask", "--config", cfg_path(bundle),
                           "--item", str(item_file), "--json")
    assert code == 0
    payload = json.loads(out)
    assert payload["decision"]["key"] == items[0].answer
    assert payload["expected"] == items[0].answer
    assert payload["report"]["citations"]
    assert payload["bank_entries"] > 0


def test_ask_stdout_is_reproducible(bundle, items, capsys):
    args = ("ask", "--config", cfg_path(bundle),
            "--item-id", items[3].item_id,
            "--items", os.path.join(bundle, "bench", "items.jsonl"))
    _, first, _ = run_cli(capsys, *args)
    _, second, _ = run_cli(capsys, *args)
    assert first == second


def test_ask_inline_question_with_voters_disabled(bundle, capsys):
    code, out, _ = run_cli(
        capsys, "ask", "--config", cfg_path(bundle),
        "--question", "Which standard plane best describes this image?",
        "--option", "A=head", "--option", "B=femur",
        "--image", "plane-0001", "--disable-voters", "--json")
    assert code == 0
    assert json.loads(out)["decision"]["key"] == "A"


def test_ask_requires_exactly_one_input_mode(bundle, capsys):
    with pytest.raises(SystemExit) as err:
        main(["ask", "--config", cfg_path(bundle)])
    assert err.value.code == 2


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as err:
        main(["definitely-not-a-command"])
    assert err.value.code == 2


def test_unknown_item_id_exits_1(bundle, capsys):
    code, out, err = run_cli(
        capsys, "ask", "--config", cfg_path(bundle),
        "--item-id", "q-9999",
        "--items", os.path.join(bundle, "bench", "items.jsonl"))
    assert code == 1
    assert err.startswith("error:")


def test_caption_keyframe(bundle, capsys):
    manifest = load_manifest(bundle)
    frame_id = manifest["video"]["caption_frames"][0]
    code, out, _ = run_cli(capsys, "caption", "--config", cfg_path(bundle),
                           "--image", frame_id)
    assert code == 0
    assert "head" in out
    assert "head circumference" in out


def test_summarize_video(bundle, capsys):
    code, out, _ = run_cli(capsys, "summarize-video",
                           "--config", cfg_path(bundle))
    assert code == 0
    assert "keyframe 2: head" in out
    assert "keyframe 10: abdomen" in out
    assert "Findings:" in out


def test_bench_generate_matches_bundle_items(bundle, capsys, tmp_path):
    out_path = str(tmp_path / "regen.jsonl")
    code, _, _ = run_cli(capsys, "bench", "generate",
                         "--config", cfg_path(bundle),
                         "--out", out_path, "--seed", "7")
    assert code == 0
    with open(out_path) as fh, \
            open(os.path.join(bundle, "bench", "items.jsonl")) as orig:
        assert fh.read() == orig.read()


def test_bench_score_matches_scorer(bundle, items, capsys, tmp_path):
    predictions = {item.item_id: item.answer for item in items}
    predictions[items[0].item_id] = "A" if items[0].answer != "A" else "B"
    preds_path = tmp_path / "preds.json"
    preds_path.write_text(json.dumps(predictions))
    code, out, _ = run_cli(capsys, "bench", "score",
                           "--items", os.path.join(bundle, "bench", "items.jsonl"),
                           "--preds", str(preds_path), "--json")
    assert code == 0
    got = json.loads(out)
    want = score_run(items, predictions)
    assert got["overall_accuracy"] == pytest.approx(want["overall_accuracy"])
    assert got["per_task"][str(items[0].task_id)]["accuracy"] == pytest.approx(
        want["per_task"][items[0].task_id]["accuracy"])


def test_tools_list_and_probe(bundle, capsys):
    code, out, _ = run_cli(capsys, "tools", "list",
                           "--config", cfg_path(bundle), "--json")
    assert code == 0
    rows = json.loads(out)["tools"]
    assert len(rows) == 22
    assert all(row["transport"] == "in_process" for row in rows)

    code, out, _ = run_cli(capsys, "tools", "probe",
                           "--config", cfg_path(bundle), "--json")
    assert code == 0
    assert all(row["healthy"] for row in json.loads(out)["tools"])


def test_bank_dump_round_trip(bundle, items, capsys, tmp_path):
    snapshot = str(tmp_path / "bank.json")
    run_cli(capsys, "ask", "--config", cfg_path(bundle),
            "--item-id", items[0].item_id,
            "--items", os.path.join(bundle, "bench", "items.jsonl"),
            "--dump-bank", snapshot)
    code, out, _ = run_cli(capsys, "bank", "dump",
                           "--snapshot", snapshot, "--tag", "vote", "--json")
    assert code == 0
    payload = json.loads(out)
    assert payload["entries"]
    assert all(e["tag"] == "vote" for e in payload["entries"])

    code, out, _ = run_cli(capsys, "bank", "dump", "--snapshot", snapshot)
    assert code == 0
    assert "run:" in out
