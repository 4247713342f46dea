import os

import pytest

from meldctl.cli import main
from meldctl.config import fixture_path

DINT = fixture_path("double_integrator.ini")


def run(*args):
    return main([str(a) for a in args])


def write_config(tmp_path, old, new, name="cfg.ini", source=DINT):
    text = open(source).read()
    assert old in text
    path = tmp_path / name
    path.write_text(text.replace(old, new))
    return path


def test_full_chain_on_double_integrator(tmp_path):
    out = tmp_path / "out"
    assert run("enumerate", "--config", DINT, "--out", out) == 0
    assert (out / "melds.csv").read_text().startswith("sigma_bits,")
    assert run("certify", "--config", DINT, "--out", out) == 0
    assert run("simulate", "--config", DINT, "--out", out, "--certificate", out / "certificate.txt") == 0
    assert run("verify", "--trace", out / "trace.csv", "--certificate", out / "certificate.txt") == 0
    report = (out / "report.txt").read_text()
    assert report.startswith("verdict = PASS")
    assert sorted(os.listdir(out)) == ["certificate.csv", "certificate.txt", "melds.csv", "report.txt", "summary.txt", "trace.csv"]


def test_repeated_runs_are_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("certify", "--config", DINT, "--out", tmp_path / d, "--seed", 7) == 0
        assert run("simulate", "--config", DINT, "--out", tmp_path / d) == 0
    for name in ("certificate.txt", "trace.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parse_errors(tmp_path, capsys):
    assert run("certify", "--config", tmp_path / "missing.ini") == 2
    bad = write_config(tmp_path, "hold = stage", "hold = never")
    assert run("simulate", "--config", bad, "--out", tmp_path) == 2
    assert run("certify", "--config", DINT, "--epsilon", "-1", "--out", tmp_path) == 2
    assert run("frobnicate") == 2
    assert "error:" in capsys.readouterr().err
    assert not (tmp_path / "trace.csv").exists()


def test_evaluation_error_on_non_meld(tmp_path):
    cfg = write_config(tmp_path, "melds = 10", "melds = 01")
    assert run("certify", "--config", cfg, "--out", tmp_path / "out") == 3
    assert not (tmp_path / "out").exists() or not os.listdir(tmp_path / "out")


def test_singular_simulation_leaves_no_files(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        "melds = 1110000, 0011100, 0100011, 0010011, 1000011, 1110000",
        "melds = 1000011, 0011100, 0100011, 0010011, 1000011, 1110000",
        source=fixture_path("arm_pickplace.ini"),
    )
    out = tmp_path / "out"
    assert run("simulate", "--config", cfg, "--out", out) == 5
    assert "t = 0" in capsys.readouterr().err
    assert not out.exists() or not os.listdir(out)


def test_certificate_from_another_scenario(tmp_path):
    out = tmp_path / "out"
    assert run("certify", "--config", DINT, "--out", out) == 0
    other = write_config(tmp_path, "default = 4.0, 4.0", "default = 9.0, 6.0")
    assert run("simulate", "--config", other, "--out", tmp_path / "o2", "--certificate", out / "certificate.txt") == 6
    # a trace simulated without the certificate carries no bound and cannot be checked against it
    assert run("simulate", "--config", DINT, "--out", tmp_path / "o3") == 0
    assert run("verify", "--trace", tmp_path / "o3" / "trace.csv", "--certificate", out / "certificate.txt") == 6


def test_verify_fails_on_tampered_trace(tmp_path):
    out = tmp_path / "out"
    assert run("certify", "--config", DINT, "--out", out) == 0
    assert run("simulate", "--config", DINT, "--out", out, "--certificate", out / "certificate.txt") == 0
    lines = (out / "trace.csv").read_text().split("\n")
    header = lines[0].split(",")
    col = header.index("err1")
    row = lines[-2].split(",")
    row[col] = "5.0"
    lines[-2] = ",".join(row)
    (out / "trace.csv").write_text("\n".join(lines))
    assert run("verify", "--trace", out / "trace.csv", "--certificate", out / "certificate.txt") == 1
    assert "FAIL" in (out / "report.txt").read_text()


def test_unreadable_certificate(tmp_path):
    bogus = tmp_path / "cert.txt"
    bogus.write_text("alpha = 1\n")
    assert run("simulate", "--config", DINT, "--certificate", bogus, "--out", tmp_path) == 2
    assert run("verify", "--trace", bogus, "--certificate", bogus) == 2


@pytest.mark.parametrize("command", ["enumerate", "certify", "simulate", "verify"])
def test_help_exits_cleanly(command, capsys):
    assert run(command, "--help") == 0
    assert "usage" in capsys.readouterr().out
