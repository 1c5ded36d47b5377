"""Command-line driver tests, run in-process through main(argv)."""

import json

from migratesim.cli import main


def run(argv):
    return main([str(a) for a in argv])


# --- balance ------------------------------------------------------------------

def test_balance_run_and_artifacts(tmp_path, capsys):
    out = tmp_path / "bal"
    code = run(["balance", "--m", 2, "--n", 2, "--reps", 30, "--seed", 1,
                "--jobs", 1, "--out", out])
    assert code == 0
    text = capsys.readouterr().out
    assert "balance time" in text and "analytic bound" in text
    csv_path = out / "balance_times.csv"
    lines = csv_path.read_text().splitlines()
    header = [ln for ln in lines if not ln.startswith("#")][0]
    assert header == "rep,seed,balance_time"
    data_rows = [ln for ln in lines if not ln.startswith("#")][1:]
    assert len(data_rows) == 30
    assert data_rows[0].split(",")[1] == "1"

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "balance"
    assert manifest["seeds"] == {"first": 1, "last": 30, "count": 30}
    assert manifest["finished"] is not None
    assert manifest["version"]


def test_balance_refuses_overwrite_without_force(tmp_path, capsys):
    out = tmp_path / "bal"
    assert run(["balance", "--m", 2, "--n", 2, "--reps", 2, "--out", out]) == 0
    assert run(["balance", "--m", 2, "--n", 2, "--reps", 2, "--out", out]) == 1
    assert "--force" in capsys.readouterr().err


def test_balance_reruns_byte_identical(tmp_path):
    out = tmp_path / "bal"
    argv = ["balance", "--m", 4, "--n", 8, "--reps", 25, "--seed", 9, "--out", out]
    assert run(argv) == 0
    first = (out / "balance_times.csv").read_bytes()
    assert run(argv + ["--force"]) == 0
    assert (out / "balance_times.csv").read_bytes() == first
    # fan-out must not change the seed plan or the artifact
    assert run(argv + ["--force", "--jobs", 2]) == 0
    assert (out / "balance_times.csv").read_bytes() == first


def test_balance_missing_flag_exits_one(tmp_path, capsys):
    assert run(["balance", "--m", 2, "--out", tmp_path / "x"]) == 1
    assert "--n" in capsys.readouterr().err


def test_balance_eps_stop_and_initial_file(tmp_path):
    counts = tmp_path / "start.txt"
    counts.write_text("6 2 0 0\n")
    out = tmp_path / "bal"
    code = run(["balance", "--m", 4, "--n", 8, "--initial", "file",
                "--initial-file", counts, "--stop", "eps=0.5", "--reps", 3,
                "--out", out])
    assert code == 0
    body = (out / "balance_times.csv").read_text()
    assert "stop=eps" in body


def test_balance_bad_initial_file_sum(tmp_path, capsys):
    counts = tmp_path / "start.txt"
    counts.write_text("1 1 0 0\n")
    code = run(["balance", "--m", 4, "--n", 8, "--initial", "file",
                "--initial-file", counts, "--reps", 2,
                "--out", tmp_path / "bal"])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_seed_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv("MIGRATE_SIM_SEED", "42")
    out = tmp_path / "bal"
    assert run(["balance", "--m", 2, "--n", 2, "--reps", 2, "--out", out]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"]["first"] == 42


def test_seed_env_malformed(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("MIGRATE_SIM_SEED", "forty-two")
    assert run(["balance", "--m", 2, "--n", 2, "--reps", 2,
                "--out", tmp_path / "bal"]) == 1
    assert "MIGRATE_SIM_SEED" in capsys.readouterr().err


# --- open ---------------------------------------------------------------------

def test_open_sojourn_run(tmp_path, capsys):
    out = tmp_path / "open"
    code = run(["open", "--m", 2, "--policy", "rls", "--lambda", "0.5",
                "--beta", "0.5", "--horizon", 150, "--reps", 3, "--out", out])
    assert code == 0
    text = capsys.readouterr().out
    assert "throughput" in text
    lines = (out / "sojourns.csv").read_text().splitlines()
    header = [ln for ln in lines if not ln.startswith("#")][0]
    assert header == "rep,seed,clients,censored,mean_sojourn,throughput"
    assert len([ln for ln in lines if not ln.startswith("#")]) == 4


def test_open_heterogeneous_rates_infer_m(tmp_path):
    out = tmp_path / "open"
    code = run(["open", "--policy", "rlo", "--lambda", "0.9,0,0",
                "--beta", "1.0", "--horizon", 120, "--reps", 2, "--out", out])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["config"]["m"] == 3


def test_open_rate_length_mismatch(tmp_path, capsys):
    code = run(["open", "--m", 2, "--policy", "rls", "--lambda", "0.5,0.5,0.5",
                "--horizon", 50, "--reps", 2, "--out", tmp_path / "o"])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_open_overloaded_warns_and_exits_two(tmp_path, capsys):
    code = run(["open", "--m", 2, "--policy", "rlo", "--lambda", "1.2",
                "--beta", "0.2", "--horizon", 40, "--reps", 2,
                "--out", tmp_path / "o"])
    assert code == 2
    assert "--probe" in capsys.readouterr().out


def test_open_probe_small_sample_inconclusive(tmp_path, capsys):
    out = tmp_path / "probe"
    code = run(["open", "--m", 2, "--policy", "rls", "--lambda", "0.5",
                "--horizon", 80, "--reps", 5, "--probe", "--out", out])
    assert code == 2  # inconclusive is a warning, not a failure
    assert "inconclusive" in capsys.readouterr().out
    lines = (out / "probe.csv").read_text().splitlines()
    header = [ln for ln in lines if not ln.startswith("#")][0]
    assert header == "seed,slope"


# --- meanfield ------------------------------------------------------------------

def test_meanfield_fixed_point_rlo(tmp_path, capsys):
    out = tmp_path / "mf"
    code = run(["meanfield", "--policy", "rlo", "--lambda", "0.8",
                "--beta", "0.5", "--bcap", 100, "--out", out])
    assert code == 0
    text = capsys.readouterr().out
    assert "2.022376456163667" in text
    assert (out / "fixed_point.csv").exists()


def test_meanfield_empty_system(tmp_path, capsys):
    code = run(["meanfield", "--policy", "rlo", "--lambda", "0",
                "--beta", "0.5", "--bcap", 20, "--out", tmp_path / "mf"])
    assert code == 0
    assert "undefined for an empty system" in capsys.readouterr().out


def test_meanfield_rls_flagged_equilibrium_warns(tmp_path, capsys):
    out = tmp_path / "mf"
    code = run(["meanfield", "--policy", "rls", "--lambda", "0.8",
                "--beta", "0.5", "--bcap", 60, "--out", out])
    assert code == 2
    text = capsys.readouterr().out
    assert "two relaxations disagree" in text
    assert (out / "equilibrium.csv").exists()


def test_meanfield_integrate_mode(tmp_path, capsys):
    out = tmp_path / "mf"
    code = run(["meanfield", "--policy", "rlo", "--lambda", "0.6",
                "--beta", "0.3", "--bcap", 30, "--mode", "integrate",
                "--t-end", "5", "--out", out])
    assert code == 0
    lines = (out / "trajectory.csv").read_text().splitlines()
    header = [ln for ln in lines if not ln.startswith("#")][0]
    assert header.startswith("t,x_0,x_1,")


def test_meanfield_overload_rejected(tmp_path, capsys):
    code = run(["meanfield", "--policy", "rlo", "--lambda", "1.2",
                "--beta", "0.5", "--out", tmp_path / "mf"])
    assert code == 1
    assert "error:" in capsys.readouterr().err


# --- verify ------------------------------------------------------------------------

def test_verify_lyapunov_suite(tmp_path, capsys):
    out = tmp_path / "ver"
    code = run(["verify", "lyapunov", "--m", 2, "--max-n", 4, "--out", out])
    assert code == 0
    text = capsys.readouterr().out
    assert "lyapunov: PASS" in text
    assert (out / "verify.csv").exists()


def test_verify_rejects_unknown_suite(capsys):
    assert run(["verify", "everything"]) == 1


# --- top level ------------------------------------------------------------------------

def test_unknown_subcommand_exits_one(capsys):
    assert run(["frobnicate"]) == 1
    assert run([]) == 1


def test_version_flag(capsys):
    assert run(["--version"]) == 0
    assert capsys.readouterr().out.strip()
