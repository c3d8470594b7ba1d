import json
from importlib.resources import files

import pytest
from click.testing import CliRunner

from chorchain.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def test_run_writes_outputs(runner, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(
        main,
        ["run", "--model", "1", "--seed", "5", "--reps", "2", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert (out / "metrics.csv").exists()
    assert (out / "summary.json").exists()
    assert (out / "chains" / "rep0.chain").exists()
    assert (out / "traces" / "rep1.json").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["groups"][0]["runs"] == 2
    trace = json.loads((out / "traces" / "rep0.json").read_text())
    assert trace["verdict"] == "conformant"


def test_run_verification_off(runner, tmp_path):
    out = tmp_path / "baseline"
    result = runner.invoke(
        main, ["run", "--model", "2", "--verify", "off", "--seed", "1", "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert not (out / "chains" / "rep0.chain").exists()  # no chain when not verifying


def test_run_with_fault(runner, tmp_path):
    out = tmp_path / "fault"
    result = runner.invoke(
        main,
        ["run", "--model", "2", "--fault-step", "2", "--seed", "7", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    trace = json.loads((out / "traces" / "rep0.json").read_text())
    assert trace["detection"] == "detected"


def test_summarize_aggregates_directories(runner, tmp_path):
    for seed in (1, 2):
        runner.invoke(
            main,
            ["run", "--model", "1", "--seed", str(seed), "--out", str(tmp_path / f"s{seed}")],
        )
    result = runner.invoke(main, ["summarize", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "mean dur" in result.output
    as_json = runner.invoke(main, ["summarize", str(tmp_path), "--json"])
    summary = json.loads(as_json.output)
    assert summary["groups"][0]["runs"] == 2


def test_summarize_empty_dir_fails(runner, tmp_path):
    result = runner.invoke(main, ["summarize", str(tmp_path)])
    assert result.exit_code != 0


def test_audit_command(runner, tmp_path):
    out = tmp_path / "run"
    runner.invoke(main, ["run", "--model", "3", "--seed", "9", "--out", str(out)])
    model_file = tmp_path / "model3.json"
    model_file.write_text(files("chorchain.models").joinpath("model3.json").read_text())
    result = runner.invoke(
        main,
        ["audit", "--chain", str(out / "chains" / "rep0.chain"), "--model", str(model_file)],
    )
    assert result.exit_code == 0, result.output
    report = json.loads(result.output)
    assert report["all_clean"] and report["instances"][0]["conformant"]


def test_audit_fails_on_tampered_dump(runner, tmp_path):
    out = tmp_path / "run"
    runner.invoke(main, ["run", "--model", "1", "--seed", "9", "--out", str(out)])
    dump_file = out / "chains" / "rep0.chain"
    from chorchain.encoding import TxKind, encode_data_block, tx_from_hex

    lines = dump_file.read_text().splitlines()
    for i, line in enumerate(lines):
        if line.startswith(("{", "block", "mempool")) or not line.strip():
            continue
        tx = tx_from_hex(line)
        if tx.kind == TxKind.HANDOVER:
            raw = bytearray(bytes.fromhex(line))
            offset = bytes(raw).index(encode_data_block(tx.data_block))
            raw[offset + 5] ^= 0x01
            lines[i] = raw.hex()
            break
    dump_file.write_text("\n".join(lines) + "\n")
    model_file = tmp_path / "model1.json"
    model_file.write_text(files("chorchain.models").joinpath("model1.json").read_text())
    result = runner.invoke(
        main, ["audit", "--chain", str(dump_file), "--model", str(model_file)]
    )
    assert result.exit_code == 1
