import json
import subprocess
import sys

import pytest

from hplb.cli import main
from hplb.files import load_allocation, load_assignment, read_csv
from hplb.profiler import HeadProfile, RecoveryCurve, budget_grid, load_profiles, save_profiles
from hplb.simulator import SWEEP_COLUMNS

SMALL = {"n_heads": 8, "context_length": 1024, "n_queries": 4, "head_dim": 4}


def write_config(tmp_path, **values):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(values))
    return str(path)


def line_profiles(tmp_path, saturations, n_k=4096):
    grid = budget_grid(n_k, 64)
    profiles = [HeadProfile(RecoveryCurve(0, h, grid, [min(1.0, k / s) for k in grid], n_k))
                for h, s in enumerate(saturations)]
    return str(save_profiles(tmp_path / "in.json", profiles))


def table_rows(out):
    rows = []
    for line in out.splitlines():
        parts = line.split()
        if len(parts) == 4 and parts[0].isdigit():
            rows.append(parts)
    return rows


def test_profile_uniform_exponents(tmp_path, capsys):
    config = write_config(tmp_path, exponents=[1.0] * 8, seed=4, **SMALL)
    assert main(["profile", "--config", config, "--out", str(tmp_path)]) == 0
    rows = table_rows(capsys.readouterr().out)
    assert len(rows) == 8 and {r[3] for r in rows} == {"1.0000"}


def test_profile_heterogeneous_spread(tmp_path, capsys):
    assert main(["profile", "--seed", "1", "--out", str(tmp_path)]) == 0
    budgets = [int(r[2]) for r in table_rows(capsys.readouterr().out)]
    assert len(budgets) == 32 and max(budgets) / min(budgets) > 2
    assert len(load_profiles(tmp_path / "profiles.json")) == 32


def test_missing_output_dir(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["profile", "--seed", "1", "--out", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["profile", "--out", "{tmp}"],
        ["allocate", "--seed", "1", "--out", "{tmp}", "--allocator", "random"],
        ["allocate", "--seed", "1", "--out", "{tmp}", "--allocator", "oracle_topp:1.5"],
        ["allocate", "--seed", "1", "--out", "{tmp}", "--total-budget", "100"],
        ["partition", "--budgets", "1,2", "--devices", "0", "--out", "{tmp}"],
        ["partition", "--budgets", "1,x", "--out", "{tmp}"],
        ["allocate", "--config", "{tmp}/absent.json", "--out", "{tmp}"],
    ],
)
def test_config_errors_exit_2(tmp_path, argv):
    argv = [a.replace("{tmp}", str(tmp_path)) for a in argv]
    try:
        status = main(argv)
    except SystemExit as exc:
        status = exc.code
    assert status == 2


def test_unknown_config_key(tmp_path, capsys):
    config = write_config(tmp_path, seed=1, budjet=3)
    assert main(["profile", "--config", config, "--out", str(tmp_path)]) == 2
    assert "budjet" in capsys.readouterr().err


def test_malformed_profile_input_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 1}')
    assert main(["allocate", "--profiles", str(bad), "--out", str(tmp_path), "--total-budget", "256"]) == 2
    assert "field" in capsys.readouterr().err


def test_runtime_error_exit_3(tmp_path, capsys):
    status = main(["partition", "--seed", "1", "--assigner", "optimal", "--devices", "4", "--out", str(tmp_path)])
    assert status == 3
    assert "exact partitioning" in capsys.readouterr().err


def test_allocate_identical_heads(tmp_path, capsys):
    profiles = line_profiles(tmp_path, [1000] * 4)
    assert main(["allocate", "--profiles", profiles, "--total-budget", "4096", "--out", str(tmp_path)]) == 0
    assert "transfers: 0" in capsys.readouterr().out
    assert load_allocation(tmp_path / "allocation.json").budgets == (1024,) * 4


def test_allocate_two_head_example(tmp_path, capsys):
    profiles = line_profiles(tmp_path, [256, 4096])
    assert main(["allocate", "--profiles", profiles, "--total-budget", "2048", "--floor", "128",
                 "--delta", "64", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "allocation.json").read_text())
    assert [e["budget"] for e in doc["budgets"]] == [128, 1920]
    assert "min recovery: 0.468750" in capsys.readouterr().out


def test_allocate_topp_full(tmp_path):
    config = write_config(tmp_path, seed=2, **SMALL)
    assert main(["allocate", "--config", config, "--allocator", "oracle_topp:1.0", "--out", str(tmp_path)]) == 0
    alloc = load_allocation(tmp_path / "allocation.json")
    assert alloc.budgets == (1024,) * 8 and alloc.total == 8 * 1024


def test_partition_naive_report(tmp_path, capsys):
    assert main(["partition", "--budgets", "8,8,1,1", "--devices", "2", "--assigner", "naive",
                 "--out", str(tmp_path)]) == 0
    assert "imbalance=1.777778" in capsys.readouterr().out
    a, heads, report = load_assignment(tmp_path / "assignment_naive_d2.json")
    assert a.groups == [[0, 1], [2, 3]] and report.loads == (16, 2)


def test_partition_equal_budgets(tmp_path, capsys):
    assert main(["partition", "--budgets", "64,64,64,64", "--devices", "2,4", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("imbalance=1.000000") == 2


def test_partition_flags_lpt_gap(tmp_path, capsys):
    assert main(["partition", "--budgets", "3,3,2,2,2", "--devices", "2", "--with-optimal",
                 "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "greedy is suboptimal" in out and "loads=[6, 6]" in out


def test_partition_from_allocation_file(tmp_path):
    config = write_config(tmp_path, seed=3, **SMALL)
    assert main(["allocate", "--config", config, "--out", str(tmp_path)]) == 0
    assert main(["partition", "--allocation", str(tmp_path / "allocation.json"), "--devices", "2",
                 "--with-optimal", "--out", str(tmp_path)]) == 0
    _, heads, report = load_assignment(tmp_path / "assignment_greedy_d2.json")
    assert sum(report.loads) == sum(load_allocation(tmp_path / "allocation.json").budgets)


def test_flags_override_config(tmp_path):
    config = write_config(tmp_path, seed=3, floor=64, delta=32, total_budget=2048, **SMALL)
    assert main(["allocate", "--config", config, "--floor", "200", "--out", str(tmp_path)]) == 0
    alloc = load_allocation(tmp_path / "allocation.json")
    assert alloc.floor == 200 and alloc.total == 2048


def test_skyline_csv(tmp_path):
    config = write_config(tmp_path, seed=7, skyline_budgets=[1024, 2048, 4096, 8192], **SMALL)
    assert main(["skyline", "--config", config, "--devices", "2", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "skyline.csv")
    assert [(r["total_budget"], r["allocator"]) for r in rows[:2]] == [("1024", "uniform"), ("1024", "maxmin")]
    full = [r for r in rows if r["total_budget"] == "8192"]
    assert all(float(r["mean_output_error"]) == 0.0 for r in full)


def test_sweep_csv(tmp_path):
    config = write_config(tmp_path, seed=7, sweep_degrees=[1, 4], sweep_lengths=[1024, 2048], **SMALL)
    assert main(["sweep", "--config", config, "--out", str(tmp_path)]) == 0
    text = (tmp_path / "sweep.csv").read_text()
    assert text.splitlines()[0] == ",".join(SWEEP_COLUMNS)
    rows = read_csv(tmp_path / "sweep.csv")
    assert len(rows) == 2 * 2 * 2
    assert all(float(r["speedup_vs_naive"]) == 1.0 for r in rows if r["degree"] == "1")


@pytest.mark.parametrize("command", ["profile", "allocate", "sweep"])
def test_outputs_are_reproducible(tmp_path, command):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        out.mkdir()
        config = write_config(out, seed=11, noise=0.05, sweep_lengths=[1024], **SMALL)
        assert main([command, "--config", config, "--out", str(out)]) == 0
        outputs.append({p.name: p.read_bytes() for p in out.iterdir() if p.name != "config.json"})
    assert outputs[0] == outputs[1] and outputs[0]


def test_different_seeds_differ(tmp_path):
    texts = []
    for seed in ("1", "2"):
        assert main(["profile", "--seed", seed, "--out", str(tmp_path)]) == 0
        texts.append((tmp_path / "profiles.json").read_text())
    assert texts[0] != texts[1]


def test_module_entry_point(tmp_path):
    result = subprocess.run([sys.executable, "-m", "hplb", "partition", "--budgets", "5,3,2", "--devices", "2",
                             "--out", str(tmp_path)], capture_output=True, text=True)
    assert result.returncode == 0 and "loads=[5, 5]" in result.stdout
