"""Command-line interface: subcommands, exit codes, file outputs."""

import json

import pytest

from flatshot.cli import cli_main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data + train + two fine-tunes, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    bank = root / "bank"
    assert cli_main([
        "gen-data", "--out", str(data), "--domains", "4", "--classes", "5",
        "--samples-per-class", "30", "--dim", "12", "--delta", "2.0",
        "--sigma", "0.6", "--layout", "independent", "--seed", "5",
    ]) == 0
    assert cli_main([
        "train", "--data", str(data / "domain0.npz"), "--out", str(bank),
        "--name", "base", "--objective", "sam", "--rho", "0.05",
        "--iterations", "500", "--restart", "250", "--hidden", "16,8",
        "--seed", "3",
    ]) == 0
    for i in (1, 2):
        assert cli_main([
            "finetune", "--bank", str(bank), "--base", "base",
            "--data", str(data / f"domain{i}.npz"), "--name", f"ft{i}",
            "--mode", "vanilla", "--iterations", "300", "--restart", "150",
            "--lr", "0.03", "--seed", str(10 + i),
        ]) == 0
    assert cli_main([
        "finetune", "--bank", str(bank), "--base", "base",
        "--data", str(data / "domain3.npz"), "--name", "ft3_lora",
        "--mode", "lora", "--rank", "3", "--iterations", "300",
        "--restart", "150", "--lr", "0.05", "--seed", "13",
    ]) == 0
    return root


def test_bank_list_and_inspect(workspace, capsys):
    bank = workspace / "bank"
    assert cli_main(["bank", "list", "--bank", str(bank)]) == 0
    out = capsys.readouterr().out
    for name in ("base", "ft1", "ft2", "ft3_lora"):
        assert name in out
    assert cli_main(["bank", "inspect", "--bank", str(bank), "--name", "ft3_lora"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["provenance"]["finetune_mode"] == "lora"
    assert info["provenance"]["rank"] == 3
    assert info["gates_on"] is True


def test_select_emits_counts(workspace, capsys, tmp_path):
    out = tmp_path / "sel.json"
    assert cli_main([
        "select", "--bank", str(workspace / "bank"), "--data",
        str(workspace / "data" / "domain1.npz"), "--tasks", "10",
        "--min-way", "3", "--max-way", "5", "--min-shot", "2", "--max-shot", "4",
        "--seed", "21", "--out", str(out),
    ]) == 0
    capsys.readouterr()
    report = json.loads(out.read_text())
    assert sum(report["chosen_counts"].values()) == 10
    assert len(report["selections"]) == 10


def test_eval_writes_reports_deterministically(workspace, tmp_path, capsys):
    args = [
        "eval", "--bank", str(workspace / "bank"),
        "--data", str(workspace / "data" / "domain1.npz"),
        str(workspace / "data" / "domain3.npz"),
        "--mode", "unseen", "--tasks", "6", "--seed", "9",
        "--min-way", "3", "--min-shot", "2",
    ]
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert cli_main(args + ["--out", str(a), "--csv", str(tmp_path / "a.csv")]) == 0
    assert cli_main(args + ["--out", str(b)]) == 0
    capsys.readouterr()
    assert a.read_bytes() == b.read_bytes()
    csv_lines = (tmp_path / "a.csv").read_text().strip().splitlines()
    assert csv_lines[0] == "domain,n_tasks,mean,ci95"
    assert len(csv_lines) == 3


def test_compare_identical_reports_degenerate(workspace, tmp_path, capsys):
    report = tmp_path / "r.json"
    assert cli_main([
        "eval", "--bank", str(workspace / "bank"),
        "--data", str(workspace / "data" / "domain2.npz"),
        "--tasks", "5", "--seed", "2", "--min-way", "3", "--min-shot", "2",
        "--out", str(report),
    ]) == 0
    capsys.readouterr()
    assert cli_main(["compare", str(report), str(report)]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["degenerate"] is True


def test_flatness_and_landscape_outputs(workspace, tmp_path, capsys):
    flat = tmp_path / "flat.json"
    assert cli_main([
        "flatness", "--bank", str(workspace / "bank"), "--name", "base",
        "--data", str(workspace / "data" / "domain0.npz"),
        "--mode", "exact", "--top-k", "2", "--seed", "4", "--out", str(flat),
    ]) == 0
    capsys.readouterr()
    report = json.loads(flat.read_text())
    assert report["trace_mode"] == "exact"
    assert len(report["eigenvalues"]) == 2

    grid = tmp_path / "grid.csv"
    assert cli_main([
        "landscape", "--bank", str(workspace / "bank"), "--name", "base",
        "--data", str(workspace / "data" / "domain0.npz"),
        "--dims", "2", "--steps", "5", "--half-range", "0.5",
        "--rho", "0.05", "--seed", "4", "--out", str(grid),
    ]) == 0
    capsys.readouterr()
    lines = grid.read_text().strip().splitlines()
    assert lines[0] == "c1,c2,erm_loss,sam_loss"
    assert len(lines) == 1 + 25


def test_bound_report_output(workspace, tmp_path, capsys):
    out = tmp_path / "bound.json"
    assert cli_main([
        "bound", "--bank", str(workspace / "bank"), "--name", "base",
        "--source", str(workspace / "data" / "domain0.npz"),
        "--targets", str(workspace / "data" / "domain1.npz"),
        "--iterations", "200", "--restart", "100", "--tasks", "5",
        "--objective", "sam", "--rho", "0.05", "--seed", "6", "--out", str(out),
    ]) == 0
    capsys.readouterr()
    report = json.loads(out.read_text())
    assert 0.0 <= report["expected_divergence"] <= 2.0
    assert report["sam_erm_gap"] == report["sam_loss"] - report["erm_min"]


def test_help_exits_zero(capsys):
    assert cli_main(["eval", "--help"]) == 0
    assert "usage" in capsys.readouterr().out.lower()


def test_unknown_subcommand_exits_one(capsys):
    assert cli_main(["frobnicate"]) == 1
    assert capsys.readouterr().err != ""


def test_unknown_flag_exits_one(capsys):
    assert cli_main(["gen-data", "--out", "x", "--bogus", "1"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_missing_file_exits_one(tmp_path, capsys):
    assert cli_main([
        "train", "--data", str(tmp_path / "nope.npz"), "--out", str(tmp_path / "b"),
        "--name", "x", "--iterations", "10", "--restart", "5",
    ]) == 1
    capsys.readouterr()


def test_eval_requires_exactly_one_subject(workspace, capsys):
    assert cli_main([
        "eval", "--data", str(workspace / "data" / "domain1.npz"), "--tasks", "2",
    ]) == 1
    capsys.readouterr()


def test_no_command_prints_usage(capsys):
    assert cli_main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()
