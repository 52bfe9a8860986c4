import os

import pytest

from graphroute.cli import CONFIG_KEYS, FLAGS, build_parser, main, parse_config_file, UsageError

PIPELINE = ["synth", "ground-truth", "build-graph", "precompute-cache", "train", "search", "eval"]


def _write_config(path, workdir):
    path.write_text(
        f"workdir = {workdir}\n"
        "synth_n = 1000   # small\n"
        "synth_d = 16\n"
        "synth_clusters = 8\n"
        "max_m = 8\n"
        "ef_construction = 40\n"
        "dcs = 48\n"
        "dcs_grid = 32, 48\n"
        "k = 4\n"
        "dim = 8\n"
        "steps = 6\n"
        "batch = 8\n"
        "eval_every = 3\n"
        "conv_blocks = 1\n"
        "conv_filters = 16\n"
        "ffn_hidden = 32\n"
        "print_r = 3\n"
    )


def _snapshot(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    _write_config(cfg, root / "run")
    outputs = {}
    for cmd in PIPELINE:
        argv = [cmd, "--config", str(cfg)]
        if cmd == "search":
            argv += ["--mode", "learned"]
        outputs[cmd] = main(argv)
    return root, cfg, outputs


def test_pipeline_exit_codes(pipeline):
    _, _, outputs = pipeline
    assert outputs == {cmd: 0 for cmd in PIPELINE}


def test_pipeline_artifacts(pipeline):
    root, _, _ = pipeline
    run = root / "run"
    for name in ("data/base.fvecs", "data/learn.fvecs", "data/query.fvecs", "data/gt_learn.ivecs",
                 "data/gt_query.ivecs", "graph.nsw", "cache.hop", "model.bin", "metrics.csv", "report.csv"):
        assert (run / name).is_file(), name
    header, *rows = (run / "report.csv").read_text().splitlines()
    scorers = [r.split(",")[2] for r in rows]
    assert scorers == ["original", "learned-d8", "truncated-d8"] * 2


def test_commands_idempotent(pipeline):
    root, cfg, _ = pipeline
    before = _snapshot(root / "run")
    for cmd in PIPELINE:
        assert main([cmd, "--config", str(cfg)]) == 0
    assert _snapshot(root / "run") == before


def test_search_output_format(pipeline, capsys):
    _, cfg, _ = pipeline
    assert main(["search", "--config", str(cfg), "--dcs", "64"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 100
    idx, rest = lines[0].split("\t")
    assert idx == "0"
    pairs = [p.split(":") for p in rest.split()]
    assert len(pairs) == 3
    dists = [float(d) for _, d in pairs]
    assert dists == sorted(dists)


def test_missing_graph_is_data_error(tmp_path, capsys):
    assert main(["search", "--workdir", str(tmp_path / "nothing")]) == 2
    assert "data error" in capsys.readouterr().err


def test_corrupted_graph_is_data_error(pipeline, tmp_path):
    _, cfg, _ = pipeline
    bad = tmp_path / "bad.nsw"
    bad.write_bytes(b"NOPE" + b"\x00" * 20)
    c2 = tmp_path / "c2.cfg"
    c2.write_text(cfg.read_text() + f"graph = {bad}\n")
    assert main(["search", "--config", str(c2)]) == 2


def test_usage_errors(tmp_path):
    assert main([]) == 1
    assert main(["fly"]) == 1
    assert main(["search", "--dcs", "many"]) == 1
    assert main(["search", "--mode", "psychic", "--workdir", str(tmp_path)]) == 1
    assert main(["search", "--k", "9", "--dcs", "8", "--workdir", str(tmp_path)]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert main(["synth", "--config", str(bad)]) == 1
    with pytest.raises(UsageError):
        parse_config_file(bad)


def test_missing_config_file_is_data_error(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "absent.cfg")]) == 2


def test_help_lists_every_flag_with_default(capsys):
    with pytest.raises(SystemExit) as e:
        build_parser().parse_args(["train", "--help"])
    assert e.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    for flag, key in FLAGS.items():
        assert flag in text
        assert f"(default: {CONFIG_KEYS[key][1]})" in text
    assert "--config" in text
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    top = capsys.readouterr().out
    for key in CONFIG_KEYS:
        assert key in top
