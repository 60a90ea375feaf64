import json
import subprocess
import sys

import pytest

from poplab.checkpoint import load_checkpoint
from poplab.cli import main
from poplab.importance import ImportanceProfile
from poplab.pop import PruningPlan


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def tiny_ckpt(tmp_path, tiny_config, capsys):
    cfg = tmp_path / "tiny.json"
    # calibration prompts are 65 tokens, so leave room for responses
    cfg.write_text(json.dumps(dict(tiny_config.to_dict(), max_seq=256)))
    ck = tmp_path / "tiny.ckpt"
    assert main(["init", "--config", str(cfg), "--out", str(ck), "--seed", "3"]) == 0
    capsys.readouterr()
    return ck


def test_no_arguments_is_usage_error(capsys):
    code, out, err = run(capsys)
    assert code == 1 and "usage" in err and out == ""


def test_unknown_subcommand(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 1 and "usage" in err and "pop-generate" in err


def test_bad_flag_is_usage_error(capsys):
    code, _, _ = run(capsys, "plan", "--layers", "12", "--ratio", "abc")
    assert code == 1


def test_ratio_out_of_range_is_usage_error(capsys):
    code, _, err = run(capsys, "plan", "--layers", "12", "--ratio", "1.0")
    assert code == 1 and "ratio" in err


def test_help_lists_stable_flags(capsys):
    for cmd, flags in {
        "pop-generate": ["--checkpoint", "--ratio", "--strategy", "--seed", "--max-new", "--temperature",
                         "--no-indep-kv", "--no-boundary"],
        "bench": ["--seq-len", "--batch", "--reps", "--config"],
        "importance": ["--samples", "--stage-aware", "--out"],
        "figures": ["--svg", "--out"],
    }.items():
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for f in flags:
            assert f in out, (cmd, f)


def test_plan_deep_third_of_36(capsys):
    code, out, _ = run(capsys, "plan", "--layers", "36", "--ratio", "0.3333", "--strategy", "deep")
    d = json.loads(out)
    assert code == 0 and d["layers_1based"] == list(range(25, 37))
    assert PruningPlan.from_dict(d).skip_set == tuple(range(24, 36))


def test_plan_writes_json(tmp_path, capsys):
    p = tmp_path / "plan.json"
    run(capsys, "plan", "--layers", "12", "--ratio", "1/3", "--strategy", "interleaved", "--no-boundary", "--out", str(p))
    plan = PruningPlan.from_dict(json.loads(p.read_text()))
    assert plan.skip_set == (2, 5, 8, 11) and not plan.boundary_handling


def test_flops_smoke(capsys):
    code, out, _ = run(capsys, "flops", "--config", "llama3-8b.json", "--ratio", "0.3333")
    d = json.loads(out)
    assert code == 0 and abs(d["kv_fraction"] - 0.0385) < 5e-4
    assert 1.3 <= d["theoretical_speedup"] <= 1.6


def test_missing_checkpoint_is_data_error(tmp_path, capsys):
    code, _, err = run(capsys, "generate", "--checkpoint", str(tmp_path / "nope.ckpt"), "--prompt", "a")
    assert code == 2 and "not found" in err


def test_corrupt_checkpoint_is_data_error(tmp_path, capsys, tiny_ckpt):
    raw = bytearray(tiny_ckpt.read_bytes())
    raw[:8] = b"NOTACKPT"
    tiny_ckpt.write_bytes(bytes(raw))
    code, _, err = run(capsys, "generate", "--checkpoint", str(tiny_ckpt), "--prompt", "a")
    assert code == 2 and "magic" in err


def test_init_then_generate_matches_pop_at_ratio_zero(capsys, tiny_ckpt):
    w, cfg = load_checkpoint(tiny_ckpt)
    assert cfg.num_layers == 3
    _, a, _ = run(capsys, "generate", "--checkpoint", str(tiny_ckpt), "--prompt", "whale", "--max-new", "6")
    _, b, _ = run(capsys, "pop-generate", "--checkpoint", str(tiny_ckpt), "--prompt", "whale", "--max-new", "6",
                  "--ratio", "0")
    assert json.loads(a)["tokens"] == json.loads(b)["tokens"]


def test_importance_writes_profile(tmp_path, capsys, tiny_ckpt):
    out = tmp_path / "prof.json"
    code, stdout, _ = run(capsys, "importance", "--checkpoint", str(tiny_ckpt), "--samples", "3", "--max-len", "4",
                          "--stage-aware", "--out", str(out))
    assert code == 0
    prof = ImportanceProfile.load(out)
    assert prof.stage_aware and prof.num_samples == 3 and prof.num_layers == 3
    assert json.loads(stdout)["num_samples"] == 3


def test_calibration_file_errors(tmp_path, capsys, tiny_ckpt):
    bad = tmp_path / "c.jsonl"
    bad.write_text("not json\n")
    code, _, _ = run(capsys, "importance", "--checkpoint", str(tiny_ckpt), "--calib", str(bad))
    assert code == 2


def test_ablate_csv(tmp_path, capsys, tiny_ckpt):
    out = tmp_path / "v.csv"
    code, stdout, _ = run(capsys, "ablate", "--checkpoint", str(tiny_ckpt), "--samples", "3", "--ratio", "0.34",
                          "--out", str(out))
    lines = stdout.strip().splitlines()
    assert code == 0 and lines[0] == "variant,ratio,resp_loss,first_token_agree"
    assert [l.split(",")[0] for l in lines[1:]] == ["pop", "shallow", "interleaved", "no_indep_kv", "no_boundary", "full"]
    assert out.read_text().strip().splitlines() == lines


def test_diagnose_ratio_zero(tmp_path, capsys, tiny_ckpt):
    code, stdout, _ = run(capsys, "diagnose", "--checkpoint", str(tiny_ckpt), "--ratio", "0", "--samples", "2",
                          "--out", str(tmp_path / "d"), "--svg")
    rows = [l.split(",") for l in stdout.strip().splitlines()[1:]]
    assert code == 0 and len(rows) == 3
    assert all(abs(float(v) - 1.0) <= 1e-9 for r in rows for v in r[2:])
    assert (tmp_path / "d" / "drift.svg").exists() and (tmp_path / "d" / "drift.png").exists()


def test_bench_small(capsys, tiny_ckpt):
    code, out, _ = run(capsys, "bench", "--checkpoint", str(tiny_ckpt), "--seq-len", "8", "--batch", "1", "--ratio", "0.34")
    d = json.loads(out)
    assert code == 0 and d["repetitions"] == 5 and d["warmup"] == 2


def test_bench_too_few_reps(capsys, tiny_ckpt):
    code, _, _ = run(capsys, "bench", "--checkpoint", str(tiny_ckpt), "--seq-len", "8", "--reps", "3")
    assert code == 1


def test_figures_missing_checkpoint(tmp_path, capsys):
    code, _, _ = run(capsys, "figures", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path))
    assert code == 2


def test_figures_small(tmp_path, capsys, tiny_config):
    # five layers so every sweep ratio prunes at least one
    cfg = tmp_path / "five.json"
    cfg.write_text(json.dumps(dict(tiny_config.to_dict(), num_layers=5, max_seq=256)))
    ck = tmp_path / "five.ckpt"
    run(capsys, "init", "--config", str(cfg), "--out", str(ck))
    code, out, _ = run(capsys, "figures", "--checkpoint", str(ck), "--out", str(tmp_path / "f"),
                       "--samples", "2", "--eval-prompts", "3", "--max-len", "4", "--svg")
    assert code == 0
    names = {p.split("/")[-1] for p in json.loads(out)["written"]}
    assert {"importance.csv", "importance.svg", "importance.png", "drift.csv", "ratio_sweep.csv"} <= names


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "poplab.cli", "plan", "--layers", "12", "--ratio", "0.25"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["skip_set"] == [9, 10, 11]
