import json

import pytest

from toponets.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, build_parser, main
from toponets.semmap import load_map, save_map, swap_classes


def test_parser_defaults():
    """Subcommands parse with their documented defaults"""
    parser = build_parser()
    args = parser.parse_args(["eval", "--split", "567-4"])
    assert (args.task, args.engine, args.split) == ("all", None, "567-4")
    args = parser.parse_args(["bench"])
    assert (args.sizes, args.repeats) == ([105, 155], 10)
    with pytest.raises(SystemExit):
        parser.parse_args(["eval", "--engine", "crf"])
    with pytest.raises(SystemExit):
        parser.parse_args([])


def test_swap_exit_code(small_maps, tmp_path, capsys):
    """A successful swap exits with zero and writes the map"""
    source = save_map(small_maps[0], tmp_path / "floor.json")
    present = sorted({small_maps[0].labels[p] for p in small_maps[0].places})
    code = main(["swap", str(source), str(present[0]), str(present[-1]), "-o", str(tmp_path / "out.json")])
    assert code == EXIT_OK
    assert load_map(tmp_path / "out.json") == swap_classes(small_maps[0], present[0], present[-1])
    assert "swapped" in capsys.readouterr().out


def test_bad_config_is_a_usage_error(tmp_path, capsys):
    """Config validation failures exit with two"""
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"split": "45-4"}))
    assert main(["gen", "--config", str(path), "--output-dir", str(tmp_path)]) == EXIT_USAGE
    assert "bad config" in capsys.readouterr().out


def test_command_errors_exit_with_one(tmp_path, capsys):
    """Package errors print a message and exit with one"""
    (tmp_path / "corpus").mkdir()
    (tmp_path / "corpus" / "stale.json").write_text("{}")
    assert main(["gen", "--output-dir", str(tmp_path)]) == EXIT_FAILURE
    assert "not empty" in capsys.readouterr().out
    assert main(["train", "--output-dir", str(tmp_path / "nothing")]) == EXIT_FAILURE
