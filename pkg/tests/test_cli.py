from __future__ import annotations

import asyncio
import json

import numpy as np
import pytest

from commands.attn_sim import CSV_HEADER
from core.bank_storage import decode_bank
from core.constants import Branch
from core.errors import EXIT_CONFIG, EXIT_COVERAGE, EXIT_IO, EXIT_OK
from core.trace_storage import TraceSet, encode_traces
from core.types import AttentionRecord
from main import main

MODEL = ["--dim", "32", "--heads", "2", "--blocks", "1", "--tokens", "8", "--steps", "4"]
LAYERS = 5


def run(*argv: str) -> int:
    return asyncio.run(main(["--log-level", "WARNING", *argv]))


@pytest.fixture
def workspace(tmp_path):
    traces = tmp_path / "calib.trdq"
    bank = tmp_path / "bank.trdq"
    assert run("trace", *MODEL, "--conditions", "2", "--out", str(traces)) == EXIT_OK
    assert run("calibrate", *MODEL, "--traces", str(traces), "--out", str(bank)) == EXIT_OK
    return tmp_path, traces, bank


def test_trace_and_calibrate_are_reproducible(workspace):
    tmp_path, traces, bank = workspace
    again_traces = tmp_path / "again.trdq"
    again_bank = tmp_path / "again.bank"
    assert run("trace", *MODEL, "--conditions", "2", "--out", str(again_traces)) == EXIT_OK
    assert run("calibrate", *MODEL, "--traces", str(again_traces), "--out", str(again_bank)) == EXIT_OK
    assert again_traces.read_bytes() == traces.read_bytes()
    assert again_bank.read_bytes() == bank.read_bytes()
    assert len(decode_bank(bank.read_bytes()).entries) == LAYERS * 4


def test_single_bucket_grouping(workspace):
    tmp_path, traces, _ = workspace
    out = tmp_path / "flat.bank"
    assert run("calibrate", *MODEL, "--traces", str(traces), "--grouping", "buckets:1", "--out", str(out)) == EXIT_OK
    bank = decode_bank(out.read_bytes())
    assert len(bank.entries) == LAYERS
    assert bank.grouping.is_time_agnostic


def test_attn_sim_outputs(workspace):
    tmp_path, traces, _ = workspace
    csv = tmp_path / "sim.csv"
    png = tmp_path / "sim.png"
    assert run("attn-sim", "--traces", str(traces), "--out", str(csv), "--png", str(png)) == EXIT_OK
    lines = csv.read_text(encoding="utf-8").splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 1 + 1 * 4
    for line in lines[1:]:
        block, t, value = line.split(",")
        assert block == "0" and 1 <= int(t) <= 4
        assert -1.0 <= float(value) <= 1.0
    assert png.read_bytes()[:4] == b"\x89PNG"


def test_eval_report(workspace):
    tmp_path, traces, bank = workspace
    out = tmp_path / "report.json"
    code = run(
        "eval", *MODEL, "--bank", str(bank), "--traces", str(traces),
        "--seeds", "2", "--share-threshold", "1.01", "--out", str(out),
    )
    assert code == EXIT_OK
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["sharing_plan"]["shared_blocks"] == []
    assert report["summary"]["seeds"] == 2
    assert report["summary"]["attention_skipped_per_run"] == 0
    assert report["bank"]["source"] == "file"
    assert report["bank"]["entries"] == LAYERS * 4
    keys = [(row["layer_id"], row["timestep"]) for row in report["layers"]]
    assert len(keys) == len(set(keys)) == LAYERS * 4
    assert all(row["seeds"] == 2 for row in report["layers"])
    assert len(report["seeds"][0]["step_sqnr_db"]) == 4


def test_eval_flag_errors(workspace):
    tmp_path, traces, _ = workspace
    out = str(tmp_path / "r.json")
    common = [*MODEL, "--traces", str(traces), "--seeds", "1", "--out", out]
    assert run("eval", *common) == EXIT_CONFIG
    assert run("eval", *common, "--ablate", "r1,p,r2") == EXIT_OK
    assert run("eval", *common, "--ablate", "r1,q") == EXIT_CONFIG
    assert run("eval", *common, "--wbits", "5") == EXIT_CONFIG


def test_eval_rejects_mismatched_bank(workspace):
    tmp_path, traces, bank = workspace
    out = str(tmp_path / "r.json")
    base = ["--heads", "2", "--tokens", "8", "--steps", "4", "--conditions", "2", "--seeds", "1"]
    assert run("eval", *base, "--dim", "32", "--blocks", "2", "--bank", str(bank), "--out", out) == EXIT_CONFIG
    assert run("eval", *base, "--dim", "48", "--blocks", "1", "--bank", str(bank), "--out", out) == EXIT_CONFIG


def test_io_and_format_failures(workspace):
    tmp_path, traces, _ = workspace
    out = str(tmp_path / "x.bank")
    assert run("calibrate", *MODEL, "--traces", str(tmp_path / "absent.trdq"), "--out", out) == EXIT_IO
    corrupted = tmp_path / "corrupt.trdq"
    corrupted.write_bytes(traces.read_bytes()[:-16])
    assert run("calibrate", *MODEL, "--traces", str(corrupted), "--out", out) == EXIT_COVERAGE
    assert run("calibrate", *MODEL, "--traces", str(traces), "--seed", str(2**64), "--out", out) == EXIT_CONFIG


def test_calibrate_reports_missing_steps(workspace):
    tmp_path, traces, _ = workspace
    longer = [*MODEL[:-1], "6"]
    assert run("calibrate", *longer, "--traces", str(traces), "--out", str(tmp_path / "x.bank")) == EXIT_COVERAGE


def test_attn_sim_rejects_unpaired_records(tmp_path):
    record = AttentionRecord(block_id=0, timestep=1, branch=Branch.CONDITIONAL, attn=np.full((2, 2), 0.5))
    path = tmp_path / "unpaired.trdq"
    path.write_bytes(encode_traces(TraceSet([], [record])))
    assert run("attn-sim", "--traces", str(path), "--out", str(tmp_path / "sim.csv")) == EXIT_COVERAGE


def test_usage_errors_exit_with_config_code():
    assert run("trace") == EXIT_CONFIG
    assert run("unknown-command") == EXIT_CONFIG


def test_eval_full_pipeline_beats_smoothing_only_at_w8a8(workspace):
    tmp_path, traces, bank = workspace
    common = [*MODEL, "--traces", str(traces), "--seeds", "2", "--wbits", "8", "--abits", "8"]
    full, bare = tmp_path / "full.json", tmp_path / "bare.json"
    assert run("eval", *common, "--bank", str(bank), "--out", str(full)) == EXIT_OK
    assert run("eval", *common, "--ablate", "r1,p,r2,tr", "--out", str(bare)) == EXIT_OK
    full_sqnr = json.loads(full.read_text(encoding="utf-8"))["summary"]["mean_sqnr_db"]
    bare_sqnr = json.loads(bare.read_text(encoding="utf-8"))["summary"]["mean_sqnr_db"]
    assert full_sqnr is not None and bare_sqnr is not None
    assert full_sqnr > bare_sqnr
