import csv

import pytest

from doacal.cli import main


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(
        "n_trials = 2\n"
        "n_snapshots = 48\n"
        "snr_grid_db = 10, 20\n"
        "master_seed = 7\n"
    )
    return str(path)


def test_sweep_writes_csv(tiny_config, tmp_path, capsys):
    out = tmp_path / "results.csv"
    rc = main(["sweep", "--config", tiny_config, "--out", str(out),
               "--variants", "miml,uncal"])
    assert rc == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4  # 2 SNRs x 2 variants
    assert {r["variant"] for r in rows} == {"miml", "uncal"}
    assert "wrote 4 rows" in capsys.readouterr().out


def test_sweep_cli_overrides(tiny_config, tmp_path):
    out = tmp_path / "r.csv"
    rc = main(["sweep", "--config", tiny_config, "--out", str(out),
               "--variants", "miml", "--trials", "1", "--seed", "123"])
    assert rc == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert all(r["n_trials"] == "1" for r in rows)


def test_trial_verbose_prints_loglik(tiny_config, capsys):
    rc = main(["trial", "--config", tiny_config, "--snr-db", "20",
               "--variant", "miml", "--seed", "3", "--verbose"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "iteration 1: log-likelihood" in out
    assert "theta_unknown_deg" in out
    assert "gain amplitudes" in out


def test_crb_prints_grid(tiny_config, capsys):
    rc = main(["crb", "--config", tiny_config])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "snr_db,crb_deg2"
    assert len(lines) == 3
    assert float(lines[1].split(",")[1]) > float(lines[2].split(",")[1])


def test_unknown_variant_rejected(tiny_config, capsys):
    rc = main(["sweep", "--config", tiny_config, "--variants", "bogus"])
    assert rc == 2
    assert "unknown variant" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("frobnicate = 1\n")
    rc = main(["crb", "--config", str(path)])
    assert rc == 2
    assert "config error" in capsys.readouterr().err
