"""End-to-end command tests: tiny configs, real files, stable exit codes."""

import json
import time

import numpy as np
import pytest

from algomimic.cli import (
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_DIVERGENCE,
    EXIT_FAIRNESS,
    EXIT_MISSING,
    EXIT_OK,
    main,
)
from algomimic.reasoner import (
    ReasonerConfig,
    init_reasoner_params,
    load_checkpoint,
    params_digest,
    save_checkpoint,
)
from algomimic.rng import substream

TINY_REASONER = {"hidden": 8, "msg_hidden": 8}


def write_config(path, payload) -> str:
    path.write_text(json.dumps(payload, indent=2))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset and one 2-epoch checkpoint shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    gen = write_config(root / "gen.json", {
        "seed": 3,
        "out": "data",
        "teacher": {"name": "bellman_ford"},
        "graphs": {"count": 10, "val_count": 6, "n_lo": 5, "n_hi": 8},
    })
    assert main(["generate", "--config", gen]) == EXIT_OK
    train_cfg = {
        "seed": 3,
        "out": "run",
        "data": "data",
        "teacher": {"name": "bellman_ford"},
        "graphs": {"n_lo": 5, "n_hi": 8},
        "reasoner": TINY_REASONER,
        "training": {"epochs": 2, "batch_size": 4},
    }
    train = write_config(root / "train.json", train_cfg)
    assert main(["train", "--config", train]) == EXIT_OK
    return root


# -- config schema ----------------------------------------------------------------


def test_unknown_top_level_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"seed": 1, "bogus": 2})
    assert main(["generate", "--config", cfg]) == EXIT_CONFIG
    assert "config.bogus" in capsys.readouterr().err


def test_unknown_nested_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json",
                       {"teacher": {"name": "bfs"}, "graphs": {"degree": 3}})
    assert main(["generate", "--config", cfg]) == EXIT_CONFIG
    assert "config.graphs.degree" in capsys.readouterr().err


def test_json_syntax_error_reports_line(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{\n  "seed": 1,\n}\n')
    assert main(["generate", "--config", str(path)]) == EXIT_CONFIG
    assert ":3:" in capsys.readouterr().err  # the offending line


def test_wrong_type_rejected(tmp_path):
    cfg = write_config(tmp_path / "c.json",
                       {"seed": "zero", "teacher": {"name": "bfs"}})
    assert main(["generate", "--config", cfg]) == EXIT_CONFIG


def test_bad_teacher_name_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"teacher": {"name": "dijkstra"}})
    assert main(["generate", "--config", cfg]) == EXIT_CONFIG
    assert "dijkstra" in capsys.readouterr().err


def test_bad_config_value_rejected(tmp_path):
    cfg = write_config(tmp_path / "c.json", {
        "out": "x",
        "teacher": {"name": "bfs"},
        "graphs": {"n_lo": 9, "n_hi": 3},
    })
    assert main(["generate", "--config", cfg]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "absent.json")]) == EXIT_MISSING


def test_unknown_flag_exits_two(workspace):
    with pytest.raises(SystemExit) as err:
        main(["train", "--config", "x", "--frobnicate"])
    assert err.value.code == 2


# -- generate ---------------------------------------------------------------------


def test_generate_manifest_counts(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["command"] == "generate"
    assert manifest["seed"] == 3
    by_path = {o["path"]: o for o in manifest["outputs"]}
    assert by_path["bellman_ford-train.ndjson"]["records"] == 10
    assert by_path["bellman_ford-val.ndjson"]["records"] == 6
    for entry in manifest["outputs"]:
        assert len(entry["sha256"]) == 64


def test_generate_rerun_identical_and_seed_changes_hash(workspace, tmp_path):
    gen = write_config(tmp_path / "g.json", {
        "seed": 3,
        "teacher": {"name": "bellman_ford"},
        "graphs": {"count": 10, "val_count": 6, "n_lo": 5, "n_hi": 8},
    })
    assert main(["generate", "--config", gen, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["generate", "--config", gen, "--out", str(tmp_path / "b")]) == EXIT_OK
    base = json.loads((workspace / "data" / "manifest.json").read_text())
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    hashes = lambda m: [o["sha256"] for o in m["outputs"]]
    assert hashes(a) == hashes(b) == hashes(base)

    assert main(["generate", "--config", gen, "--seed", "4",
                 "--out", str(tmp_path / "c")]) == EXIT_OK
    c = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert hashes(c) != hashes(a)
    assert c["config_hash"] != a["config_hash"]


def test_generate_natural_dataset(tmp_path):
    cfg = write_config(tmp_path / "g.json", {
        "seed": 5,
        "out": "nat",
        "transfer": {
            "val_size": 4,
            "natural": {"count": 6, "n_lo": 4, "n_hi": 6, "d_nat": 5, "k": 2},
        },
    })
    assert main(["generate", "--config", cfg]) == EXIT_OK
    manifest = json.loads((tmp_path / "nat" / "manifest.json").read_text())
    by_path = {o["path"]: o for o in manifest["outputs"]}
    assert by_path["natural-train.ndjson"]["records"] == 6
    assert by_path["natural-val.ndjson"]["records"] == 4


def test_generate_without_any_dataset_section(tmp_path):
    cfg = write_config(tmp_path / "g.json", {"out": "x", "seed": 1})
    assert main(["generate", "--config", cfg]) == EXIT_CONFIG


# -- train ------------------------------------------------------------------------


def test_train_outputs_and_summary(workspace):
    run = workspace / "run"
    names = {p.name for p in run.iterdir()}
    assert {"checkpoint-bellman_ford.bin", "metrics-bellman_ford.csv",
            "curves-bellman_ford.png", "summary.json", "manifest.json"} <= names
    summary = json.loads((run / "summary.json").read_text())
    entry = summary["teachers"]["bellman_ford"]
    assert 0.0 <= entry["val_accuracy"] <= 1.0
    assert len(entry["train_loss_curve"]) == 2


def test_train_rerun_byte_identical(workspace, tmp_path):
    cfg = {
        "seed": 3,
        "data": str(workspace / "data"),
        "teacher": {"name": "bellman_ford"},
        "graphs": {"n_lo": 5, "n_hi": 8},
        "reasoner": TINY_REASONER,
        "training": {"epochs": 2, "batch_size": 4},
    }
    path = write_config(tmp_path / "t.json", cfg)
    assert main(["train", "--config", path, "--out", str(tmp_path / "r1")]) == EXIT_OK
    assert main(["train", "--config", path, "--out", str(tmp_path / "r2")]) == EXIT_OK
    for name in ("summary.json", "checkpoint-bellman_ford.bin",
                 "metrics-bellman_ford.csv", "curves-bellman_ford.png"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    # the reference run wrote into its own out dir, same bytes again
    assert (tmp_path / "r1" / "checkpoint-bellman_ford.bin").read_bytes() == \
        (workspace / "run" / "checkpoint-bellman_ford.bin").read_bytes()


def test_train_zero_epochs_writes_initialization(workspace, tmp_path):
    cfg = write_config(tmp_path / "t.json", {
        "seed": 3,
        "data": str(workspace / "data"),
        "out": str(tmp_path / "r"),
        "teacher": {"name": "bellman_ford"},
        "graphs": {"n_lo": 5, "n_hi": 8},
        "reasoner": TINY_REASONER,
        "training": {"epochs": 0},
    })
    assert main(["train", "--config", cfg]) == EXIT_OK
    params = load_checkpoint(tmp_path / "r" / "checkpoint-bellman_ford.bin")
    fresh = init_reasoner_params(ReasonerConfig(hidden=8, msg_hidden=8),
                                 substream(3, "init", "bellman_ford"))
    assert params_digest(params.tensors) == params_digest(fresh.tensors)


def test_train_missing_dataset(workspace, tmp_path):
    cfg = write_config(tmp_path / "t.json", {
        "seed": 3,
        "data": str(tmp_path / "nothing"),
        "out": str(tmp_path / "r"),
        "teacher": {"name": "bellman_ford"},
    })
    assert main(["train", "--config", cfg]) == EXIT_MISSING


def test_train_divergence_writes_last_good(workspace, tmp_path, capsys):
    cfg = write_config(tmp_path / "t.json", {
        "seed": 2,
        "data": str(workspace / "data"),
        "out": str(tmp_path / "r"),
        "teacher": {"name": "bellman_ford"},
        "graphs": {"n_lo": 5, "n_hi": 8},
        "reasoner": TINY_REASONER,
        "training": {"epochs": 4, "batch_size": 4, "lr": 1e12},
    })
    assert main(["train", "--config", cfg]) == EXIT_DIVERGENCE
    assert "divergence" in capsys.readouterr().err
    params = load_checkpoint(tmp_path / "r" / "checkpoint-bellman_ford.bin")
    for t in params.tensors.values():  # last good epoch: still finite
        assert np.isfinite(t.data).all()
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["diverged"]


def test_train_both_teachers_shares_processor(workspace, tmp_path):
    gen = write_config(tmp_path / "g.json", {
        "seed": 7,
        "out": str(tmp_path / "data"),
        "teacher": {"name": "both"},
        "graphs": {"count": 8, "val_count": 4, "n_lo": 5, "n_hi": 7},
    })
    assert main(["generate", "--config", gen]) == EXIT_OK
    cfg = write_config(tmp_path / "t.json", {
        "seed": 7,
        "data": str(tmp_path / "data"),
        "out": str(tmp_path / "r"),
        "teacher": {"name": "both"},
        "graphs": {"n_lo": 5, "n_hi": 7},
        "reasoner": TINY_REASONER,
        "training": {"epochs": 1, "batch_size": 4},
    })
    assert main(["train", "--config", cfg]) == EXIT_OK
    bf = load_checkpoint(tmp_path / "r" / "checkpoint-bellman_ford.bin")
    bfs = load_checkpoint(tmp_path / "r" / "checkpoint-bfs.bin")
    assert params_digest(bf.tensors, "processor.") == params_digest(bfs.tensors, "processor.")
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert set(summary["teachers"]) == {"bellman_ford", "bfs"}


# -- eval -------------------------------------------------------------------------


def eval_config(workspace, tmp_path, **overrides):
    payload = {
        "seed": 3,
        "data": str(workspace / "data"),
        "checkpoint": str(workspace / "run" / "checkpoint-bellman_ford.bin"),
        "out": str(tmp_path / "eval"),
        "teacher": {"name": "bellman_ford"},
        **overrides,
    }
    return write_config(tmp_path / "e.json", payload)


def test_eval_single_row_at_dataset_size(workspace, tmp_path):
    cfg = eval_config(workspace, tmp_path)
    assert main(["eval", "--config", cfg]) == EXIT_OK
    lines = (tmp_path / "eval" / "eval-report.csv").read_text().strip().split("\n")
    assert lines[0].startswith("n,teacher,count,chance_pred_accuracy,pred_accuracy")
    assert len(lines) == 2
    assert lines[1].startswith("5-8,bellman_ford,6,")


def test_eval_oracle_row_is_perfect(workspace, tmp_path):
    cfg = eval_config(workspace, tmp_path)
    assert main(["eval", "--config", cfg, "--oracle"]) == EXIT_OK
    summary = json.loads((tmp_path / "eval" / "eval-summary.json").read_text())
    row = summary["rows"][0]
    assert summary["oracle"] is True
    assert row["pred_accuracy"] == 1.0
    assert row["exact_match_rate"] == 1.0
    assert row["dist_mae"] == 0.0


def test_eval_sizes_table_and_plot(workspace, tmp_path):
    cfg = eval_config(workspace, tmp_path)
    assert main(["eval", "--config", cfg, "--sizes", "5,7"]) == EXIT_OK
    lines = (tmp_path / "eval" / "eval-report.csv").read_text().strip().split("\n")
    assert len(lines) == 3
    assert lines[1].split(",")[0] == "5"
    assert lines[2].split(",")[0] == "7"
    assert (tmp_path / "eval" / "sizegen.png").exists()


def test_eval_corrupt_checkpoint(workspace, tmp_path):
    bad = tmp_path / "junk.bin"
    bad.write_bytes(b"not a checkpoint")
    cfg = eval_config(workspace, tmp_path, checkpoint=str(bad))
    assert main(["eval", "--config", cfg]) == EXIT_CHECKPOINT


def test_eval_reasoner_mismatch_names_fields(workspace, tmp_path, capsys):
    cfg = eval_config(workspace, tmp_path, reasoner={"hidden": 16, "msg_hidden": 8})
    assert main(["eval", "--config", cfg]) == EXIT_CHECKPOINT
    err = capsys.readouterr().err
    assert "hidden" in err and "16" in err


def test_eval_missing_checkpoint(workspace, tmp_path):
    cfg = eval_config(workspace, tmp_path, checkpoint=str(tmp_path / "absent.bin"))
    assert main(["eval", "--config", cfg]) == EXIT_MISSING


# -- transfer ---------------------------------------------------------------------


def transfer_config(workspace, tmp_path, **overrides):
    payload = {
        "seed": 0,
        "checkpoint": str(workspace / "run" / "checkpoint-bellman_ford.bin"),
        "out": str(tmp_path / "xfer"),
        "reasoner": TINY_REASONER,
        "transfer": {
            "sizes": [4, 6],
            "seeds": [0],
            "val_size": 5,
            "natural": {"n_lo": 4, "n_hi": 6, "d_nat": 5, "k": 2, "sigma": 0.1},
            "fit": {"epochs": 1, "rollout_steps": 3, "baseline_steps": 40},
        },
        **overrides,
    }
    return write_config(tmp_path / "x.json", payload)


def test_transfer_grid_and_digests(workspace, tmp_path):
    cfg = transfer_config(workspace, tmp_path)
    assert main(["transfer", "--config", cfg]) == EXIT_OK
    out = tmp_path / "xfer"
    lines = (out / "compare.csv").read_text().strip().split("\n")
    assert len(lines) == 1 + 3 * 2 * 1  # methods x sizes x seeds
    rows = json.loads((out / "runs.json").read_text())["rows"]
    for row in rows:
        assert "wall_time_s" not in row
        if row["method"] in ("transfer", "ablation"):
            assert row["processor_digest_before"] == row["processor_digest_after"]
    summary = json.loads((out / "compare-summary.json").read_text())
    assert summary["sizes"] == [4, 6]
    assert set(summary["methods"]) == {"transfer", "ablation", "baseline"}
    assert (out / "transfer.png").exists()


def test_transfer_rerun_manifest_identical(workspace, tmp_path):
    cfg = transfer_config(workspace, tmp_path)
    assert main(["transfer", "--config", cfg]) == EXIT_OK
    first = (tmp_path / "xfer" / "manifest.json").read_bytes()
    first_runs = (tmp_path / "xfer" / "runs.json").read_bytes()
    assert main(["transfer", "--config", cfg]) == EXIT_OK
    assert (tmp_path / "xfer" / "manifest.json").read_bytes() == first
    assert (tmp_path / "xfer" / "runs.json").read_bytes() == first_runs


def test_transfer_sizes_flag_overrides(workspace, tmp_path):
    cfg = transfer_config(workspace, tmp_path)
    assert main(["transfer", "--config", cfg, "--sizes", "4"]) == EXIT_OK
    lines = (tmp_path / "xfer" / "compare.csv").read_text().strip().split("\n")
    assert len(lines) == 1 + 3


def test_transfer_random_processor_is_ablation_only(workspace, tmp_path):
    cfg = transfer_config(workspace, tmp_path, checkpoint=str(tmp_path / "absent.bin"))
    assert main(["transfer", "--config", cfg, "--random-processor"]) == EXIT_OK
    lines = (tmp_path / "xfer" / "compare.csv").read_text().strip().split("\n")
    methods = {line.split(",")[0] for line in lines[1:]}
    assert methods == {"ablation"}


def test_transfer_missing_checkpoint(workspace, tmp_path):
    cfg = transfer_config(workspace, tmp_path, checkpoint=str(tmp_path / "absent.bin"))
    assert main(["transfer", "--config", cfg]) == EXIT_MISSING


def test_transfer_smoke_grid_under_five_minutes(tmp_path):
    # full-width model and feature dims, grid cut to 1 seed x 1 size x 2 epochs
    ckpt = tmp_path / "full.bin"
    save_checkpoint(ckpt, init_reasoner_params(ReasonerConfig(), substream(0, "smoke")))
    cfg = write_config(tmp_path / "x.json", {
        "seed": 0,
        "checkpoint": str(ckpt),
        "out": str(tmp_path / "xfer"),
        "transfer": {
            "sizes": [32],
            "seeds": [0],
            "val_size": 100,
            "natural": {"count": 32, "n_lo": 8, "n_hi": 16, "d_nat": 16, "k": 4,
                        "sigma": 0.25},
            "fit": {"epochs": 2},
        },
    })
    t0 = time.monotonic()
    assert main(["transfer", "--config", cfg]) == EXIT_OK
    assert time.monotonic() - t0 < 300.0
    lines = (tmp_path / "xfer" / "compare.csv").read_text().strip().split("\n")
    assert len(lines) == 1 + 3


def test_transfer_needs_section(workspace, tmp_path):
    cfg = write_config(tmp_path / "x.json", {
        "out": str(tmp_path / "xfer"),
        "checkpoint": str(workspace / "run" / "checkpoint-bellman_ford.bin"),
    })
    assert main(["transfer", "--config", cfg]) == EXIT_CONFIG


def test_fairness_guard_exit_code():
    # compare_report raising FairnessError must surface as the fairness code
    from algomimic.transfer import FairnessError, compare_report

    rows = [
        {"method": m, "train_size": 4, "seed": 0, "val_accuracy": 0.5,
         "dataset_hash": h, "wall_time_s": 0.1}
        for m, h in (("transfer", "aaa"), ("ablation", "bbb"), ("baseline", "aaa"))
    ]
    with pytest.raises(FairnessError):
        compare_report(rows)
    assert EXIT_FAIRNESS == 7
