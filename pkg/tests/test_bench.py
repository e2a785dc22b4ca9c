import csv
import json
import struct

import numpy as np
import pytest

from metal.bench import (
    PRESETS,
    TRACE_HEADER,
    compare_report,
    export_affine_trace,
    load_checkpoint,
    save_checkpoint,
)
from metal.bench.checkpoint import MAGIC, checkpoint_bytes
from metal.bench.cli import cli
from metal.bench.presets import build_config, config_to_json
from metal.errors import ContractError, FormatError
from metal.metatrain import (
    TrainConfig,
    held_out_tasks,
    init_model,
    meta_train,
    new_train_state,
    summarize,
)
from metal.taskgen import save_task

TINY = dict(shots=3, query_train=4, query_eval=6, hidden_widths=(4,), epochs=2, iterations_per_epoch=3,
            meta_batch_size=2, val_tasks=3)
TINY_SET = [f"--set={k}={json.dumps(list(v) if isinstance(v, tuple) else v)}" for k, v in TINY.items()]


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


def arrays_equal(a, b):
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        state = meta_train(new_train_state(tiny()), stop_at=5)
        save_checkpoint(state, tmp_path / "c.bin")
        back = load_checkpoint(tmp_path / "c.bin")
        assert back.cfg == state.cfg and back.step == 5 and back.history == state.history
        assert back.rng_state == state.rng_state and back.best_metric == state.best_metric
        assert arrays_equal(back.model.arrays(), state.model.arrays())
        assert arrays_equal(back.best_params, state.best_params)
        assert arrays_equal(back.model.optimizer.m, state.model.optimizer.m)
        assert arrays_equal(back.model.optimizer.v, state.model.optimizer.v)
        assert back.model.optimizer.step == state.model.optimizer.step
        assert checkpoint_bytes(back) == checkpoint_bytes(state)

    def test_identical_runs_give_identical_bytes(self):
        a = checkpoint_bytes(meta_train(new_train_state(tiny())))
        b = checkpoint_bytes(meta_train(new_train_state(tiny())))
        assert a == b

    @pytest.mark.parametrize("variant", ["M1", "M6"])
    def test_resume_matches_uninterrupted(self, tmp_path, variant):
        full = meta_train(new_train_state(tiny(variant=variant)))
        part = meta_train(new_train_state(tiny(variant=variant)), stop_at=4)
        save_checkpoint(part, tmp_path / "c.bin")
        resumed = meta_train(load_checkpoint(tmp_path / "c.bin"))
        assert checkpoint_bytes(resumed) == checkpoint_bytes(full)

    def test_truncation_detected_everywhere(self, tmp_path):
        blob = checkpoint_bytes(new_train_state(tiny()))
        for cut in (0, 5, 19, len(blob) // 3, len(blob) - 1):
            (tmp_path / "t.bin").write_bytes(blob[:cut])
            with pytest.raises(FormatError):
                load_checkpoint(tmp_path / "t.bin")

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(checkpoint_bytes(new_train_state(tiny())) + b"\0" * 8)
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "t.bin")

    def test_bad_magic_and_version(self, tmp_path):
        blob = checkpoint_bytes(new_train_state(tiny()))
        (tmp_path / "m.bin").write_bytes(b"NOTACKPT" + blob[8:])
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(tmp_path / "m.bin")
        (tmp_path / "v.bin").write_bytes(MAGIC + struct.pack("<I", 99) + blob[12:])
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(tmp_path / "v.bin")

    def test_shape_mismatch_names_the_array(self, tmp_path):
        blob = checkpoint_bytes(new_train_state(tiny()))
        hlen = struct.unpack_from("<Q", blob, 12)[0]
        header = json.loads(blob[20:20 + hlen])
        other = tiny(hidden_widths=(5,))
        header["config"] = other.to_dict()
        header["model_spec"] = other.model_spec.to_dict()
        head = json.dumps(header, sort_keys=True).encode()
        (tmp_path / "s.bin").write_bytes(blob[:12] + struct.pack("<Q", len(head)) + head + blob[20 + hlen:])
        with pytest.raises(FormatError, match="param/theta.W1"):
            load_checkpoint(tmp_path / "s.bin")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "nope.bin")

    def test_no_temporary_left_behind(self, tmp_path):
        save_checkpoint(new_train_state(tiny()), tmp_path / "c.bin")
        assert [p.name for p in tmp_path.iterdir()] == ["c.bin"]


class TestTrace:
    def read(self, path):
        with open(path, newline="") as fh:
            return list(csv.reader(fh))

    def test_supervised_row_count_and_identity_values(self, tmp_path):
        cfg = TrainConfig(variant="M4", task_kind="cluster", ways=5, shots=2, query_train=3, hidden_widths=(8,),
                          inner_steps=5)
        n = export_affine_trace(init_model(cfg), held_out_tasks(cfg, 10), cfg, tmp_path / "t.csv")
        rows = self.read(tmp_path / "t.csv")
        assert n == 200 == len(rows) - 1
        assert tuple(rows[0]) == TRACE_HEADER
        assert all(float(r[4]) == 1.0 and float(r[5]) == 0.0 for r in rows[1:])
        assert {r[2] for r in rows[1:]} == {"support"} and {r[3] for r in rows[1:]} == {"W1", "b1", "W2", "b2"}

    def test_semi_supervised_has_both_sets(self, tmp_path):
        cfg = tiny(variant="M6", inner_steps=2, adapter_zero_init=False)
        n = export_affine_trace(init_model(cfg), held_out_tasks(cfg, 3), cfg, tmp_path / "t.csv")
        rows = self.read(tmp_path / "t.csv")[1:]
        assert n == 3 * 2 * 2 * 4 == len(rows)
        assert [r[:4] for r in rows[:5]] == [["0", "0", "support", "W1"], ["0", "0", "support", "b1"],
                                            ["0", "0", "support", "W2"], ["0", "0", "support", "b2"],
                                            ["0", "0", "query", "W1"]]

    @pytest.mark.parametrize("variant", ["M1", "M2", "M5"])
    def test_variant_without_adapter(self, tmp_path, variant):
        cfg = tiny(variant=variant)
        with pytest.raises(ContractError):
            export_affine_trace(init_model(cfg), held_out_tasks(cfg, 2), cfg, tmp_path / "t.csv")


class TestCompareReport:
    def test_single_row(self):
        table = compare_report([summarize([0.5, 0.7], "mse", label="M1")])
        assert len(table.rows) == 1 and table.rows[0]["variant"] == "M1"
        assert len(table.text().splitlines()) == 3

    def test_identical_reports_identical_rows(self):
        rep = summarize([0.5, 0.7, 0.9], "accuracy", label="M6")
        table = compare_report([rep, rep])
        assert table.rows[0] == table.rows[1]
        lines = table.text().splitlines()
        assert lines[2] == lines[3]

    def test_metric_mismatch(self):
        with pytest.raises(ContractError):
            compare_report([summarize([1.0, 2.0], "mse"), summarize([0.5, 0.6], "accuracy")])

    def test_empty(self):
        with pytest.raises(ContractError):
            compare_report([])

    def test_machine_readable(self):
        table = compare_report([summarize([1.0, 3.0], "mse", label="M1")], {"M1": "task loss"})
        doc = json.loads(json.dumps(table.to_dict()))
        assert doc["metric"] == "mse" and doc["rows"][0]["mean"] == 2.0 and doc["rows"][0]["description"] == "task loss"


class TestPresets:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_exportable_and_round_trips(self, name):
        cfg = PRESETS[name].config
        assert build_config(TrainConfig(), json.loads(config_to_json(cfg))) == cfg

    def test_ablation_tables(self):
        assert PRESETS["table4"].variants == ("M1", "M2", "M3")
        assert PRESETS["table5"].variants == ("M2", "M4", "M5", "M6")
        assert PRESETS["table6"].variants == ("M7", "M8", "M9", "M6")

    def test_regression_presets_follow_the_reference_setup(self):
        cfg = PRESETS["sinusoid-metal"].config
        assert (cfg.hidden_widths, cfg.inner_lr, cfg.inner_steps, cfg.meta_batch_size) == ((80, 80), 0.1, 1, 4)
        assert (cfg.epochs, cfg.iterations_per_epoch) == (20, 200)
        assert PRESETS["sinusoid-maml"].config.variant == "M1"


class TestCli:
    def run(self, tmp_path, *argv):
        return cli([*argv])

    @pytest.mark.parametrize("argv", [["train", "--bogus"], ["train", "--preset", "nope"], [], ["frobnicate"],
                                      ["train", "--set", "bogus=1"], ["train", "--set", "novalue"],
                                      ["eval", "--checkpoint", "x", "--split", "1,2"], ["ablate", "--variants", "M0"]])
    def test_usage_errors_exit_2(self, argv, capsys):
        assert cli(argv) == 2

    def test_runtime_error_exit_1(self, tmp_path, capsys):
        (tmp_path / "bad.bin").write_bytes(b"garbage")
        assert cli(["eval", "--checkpoint", str(tmp_path / "bad.bin")]) == 1
        assert "FormatError" in capsys.readouterr().err

    def test_train_writes_artifacts_deterministically(self, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            argv = ["train", "--preset", "sinusoid-metal", "--seed", "7", "--out", str(tmp_path / name),
                    "--eval-tasks", "4", "--quiet", *TINY_SET]
            assert cli(argv) == 0
            outs.append(tmp_path / name)
        for f in ("checkpoint.bin", "progress.jsonl", "report.json", "config.json"):
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
        report = json.loads((outs[0] / "report.json").read_text())
        assert report["n_tasks"] == 4 and report["metric"] == "mse"
        assert load_checkpoint(outs[0] / "checkpoint.bin").cfg.seed == 7

    def test_global_flags_before_subcommand(self, tmp_path, capsys):
        assert cli(["--seed", "3", "--out", str(tmp_path), "train", "--quiet", "--eval-tasks", "2", *TINY_SET]) == 0
        assert load_checkpoint(tmp_path / "checkpoint.bin").cfg.seed == 3

    def test_resume_completes_identically(self, tmp_path, capsys):
        base = ["train", "--quiet", "--eval-tasks", "2", *TINY_SET]
        assert cli([*base, "--out", str(tmp_path / "full")]) == 0
        short = [a for a in base if not a.startswith("--set=epochs")] + ["--set=epochs=1"]
        assert cli([*short, "--out", str(tmp_path / "part")]) == 0
        part = load_checkpoint(tmp_path / "part" / "checkpoint.bin")
        # extend the budget of the stopped run, then continue it
        full_cfg = load_checkpoint(tmp_path / "full" / "checkpoint.bin").cfg
        part.cfg = full_cfg
        save_checkpoint(part, tmp_path / "part" / "checkpoint.bin")
        assert cli([*base, "--out", str(tmp_path / "part"), "--resume"]) == 0
        assert (tmp_path / "part" / "checkpoint.bin").read_bytes() == (tmp_path / "full" / "checkpoint.bin").read_bytes()

    def test_resume_needs_checkpoint(self, tmp_path, capsys):
        assert cli(["train", "--resume", "--out", str(tmp_path)]) == 2

    def test_eval_trace_and_episode(self, tmp_path, capsys):
        run = tmp_path / "run"
        assert cli(["train", "--quiet", "--eval-tasks", "2", "--out", str(run), *TINY_SET]) == 0
        capsys.readouterr()
        assert cli(["eval", "--out", str(run), "--tasks", "3"]) == 0
        assert json.loads(capsys.readouterr().out)["n_tasks"] == 3
        cfg = load_checkpoint(run / "checkpoint.bin").cfg
        save_task(held_out_tasks(cfg, 1, seed=11)[0], tmp_path / "ep.json")
        assert cli(["eval", "--out", str(run), "--episode", str(tmp_path / "ep.json")]) == 0
        assert json.loads(capsys.readouterr().out)["n_tasks"] == 1
        assert cli(["trace", "--out", str(run), "--tasks", "4"]) == 0
        assert json.loads(capsys.readouterr().out)["rows"] == 4 * 1 * 2 * 4

    def test_ablate_table4_three_rows(self, tmp_path, capsys):
        argv = ["ablate", "--preset", "table4", "--seed", "7", "--out", str(tmp_path), "--eval-tasks", "3",
                *TINY_SET, "--set=query_eval=3", "--set=inner_steps=2"]
        assert cli(argv) == 0
        doc = json.loads((tmp_path / "ablation.json").read_text())
        assert [r["variant"] for r in doc["rows"]] == ["M1", "M2", "M3"] and doc["metric"] == "accuracy"
        assert (tmp_path / "ablation.txt").read_text() == capsys.readouterr().out

    def test_config_export_round_trip(self, tmp_path, capsys):
        assert cli(["config", "--preset", "table5", "--out", str(tmp_path)]) == 0
        text = (tmp_path / "table5.json").read_text()
        assert text == capsys.readouterr().out
        assert cli(["config", "--config", str(tmp_path / "table5.json"), "--preset", "sinusoid"]) == 0
        assert capsys.readouterr().out == text

    def test_selftest_passes(self, capsys):
        assert cli(["selftest", "--cases", "2"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") == 34 + 3


def test_cluster_preset_sizes():
    cfg = PRESETS["cluster"].config
    assert (cfg.ways, cfg.shots, cfg.inner_steps, cfg.meta_batch_size) == (5, 5, 5, 2)
    assert np.isclose(cfg.cluster_sigma, 0.3704)
