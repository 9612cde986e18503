"""Tests for the `bench` module."""

from pathlib import Path

import jsonlines
import pytest

from offload_bridge.bench import (
    CSV_COLUMNS,
    Repetition,
    Scenario,
    TimingReport,
    format_report,
    load_scenario,
    parse_batch_spec,
    parse_shape,
    read_report_csv,
    run_scenario,
    transfer_experiment,
    trimmed_mean,
)
from offload_bridge.errors import ArgumentError
from offload_bridge.server import BridgeServer


def test_load_scenario(tmp_path: Path) -> None:
    """Files hold key=value lines; overrides win over the file."""
    path = tmp_path / "svd.scenario"
    path.write_text("# a comment\nroutine=truncated_svd\n\nm=300\nn=100\nk=20\n")
    scenario = load_scenario(path, ["reps=5"])
    assert (scenario.routine, scenario.m, scenario.n, scenario.k) == (
        "truncated_svd",
        300,
        100,
        20,
    )
    assert scenario.reps == 5
    assert load_scenario(path, ["k=3"]).k == 3


@pytest.mark.parametrize(
    "lines",
    [["routine=cholesky"], ["m=0"], ["colour=red"], ["m=many"], ["no equals sign"]],
)
def test_load_scenario_errors(lines: list[str]) -> None:
    """Unknown keys and routines, bad values and bad lines are argument errors."""
    with pytest.raises(ArgumentError):
        load_scenario(overrides=lines)


def test_missing_scenario_file(tmp_path: Path) -> None:
    """A scenario file that does not exist is an argument error."""
    with pytest.raises(ArgumentError):
        load_scenario(tmp_path / "nope")


def test_result_size() -> None:
    """A 10000^3 GEMM returns 0.8 GB."""
    scenario = Scenario(m=10000, n=10000, k=10000)
    assert scenario.result_bytes == 800_000_000
    assert Scenario(routine="transpose", m=3, n=2).result_shape == (2, 3)
    assert Scenario(routine="condest").result_shape == (1, 1)


def test_parse_batch_spec() -> None:
    """Row counts and byte sizes."""
    assert parse_batch_spec("16rows").rows_per_message == 16
    assert parse_batch_spec("1MiB").batch_bytes == 1 << 20
    assert parse_batch_spec("512").batch_bytes == 512
    with pytest.raises(ArgumentError):
        parse_batch_spec("fast")
    with pytest.raises(ArgumentError):
        parse_shape("12x")


def test_trimmed_mean() -> None:
    """The extremes are dropped from three values on."""
    assert trimmed_mean([3.0, 1.0, 2.0]) == 2.0
    assert trimmed_mean([7.0]) == 7.0


def test_repetition_phases() -> None:
    """Phases must fit in the total; overhead is the share of moving data."""
    rep = Repetition(rep=0, send_s=1.0, compute_s=2.0, receive_s=1.0, total_s=4.0)
    assert rep.ok and rep.phases_consistent()
    assert rep.overhead == 0.5
    assert not Repetition(rep=1, send_s=3.0, total_s=1.0).phases_consistent()


def test_summary_table() -> None:
    """The table shows dims, size of result and nodes; failed phases are NA."""
    scenario = Scenario(m=10000, n=10000, k=10000, clients=2, workers=4)
    failed = TimingReport(scenario, [Repetition(rep=0, error="ConnectError: no")])
    assert failed.failed and failed.failures == ["ConnectError: no"]
    table = format_report(failed)
    for text in ("10000x10000 * 10000x10000", "0.8", "2/4", "NA", "0/1"):
        assert text in table

    report = TimingReport(
        scenario,
        [
            Repetition(rep=i, send_s=1.0, compute_s=2.0, total_s=t)
            for i, t in enumerate([3.0, 4.0, 20.0])
        ],
    )
    assert report.mean("total_s") == 9.0
    assert report.trimmed("total_s") == 4.0
    assert "9.000" in format_report(report)


def test_csv_round_trip() -> None:
    """A timing report survives its csv."""
    report = TimingReport(
        Scenario(routine="truncated_svd", m=30, n=10, k=3, rows_per_message=4),
        [
            Repetition(
                rep=0,
                send_s=0.125,
                compute_s=0.5,
                receive_s=0.25,
                total_s=1.0,
                messages=12,
                bytes_sent=2400,
                bytes_received=960,
                check_error=3.5e-16,
            ),
            Repetition(rep=1, error="RoutineError: diverged, badly"),
        ],
    )
    text = format_report(report, "csv")
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    parsed = read_report_csv(text)
    assert parsed.scenario == report.scenario
    assert parsed.repetitions == report.repetitions


def test_csv_of_empty_report() -> None:
    """Without repetitions the csv is the header; reading it back is an error."""
    text = format_report(TimingReport(Scenario()), "csv")
    assert text.strip() == ",".join(CSV_COLUMNS)
    with pytest.raises(ArgumentError):
        read_report_csv(text)
    with pytest.raises(ArgumentError):
        read_report_csv("a,b\n1,2\n")
    with pytest.raises(ArgumentError):
        format_report(TimingReport(Scenario()), "html")  # type: ignore[arg-type]


def test_run_scenario(server: BridgeServer, tmp_path: Path) -> None:
    """A small GEMM runs every repetition, checks out and is logged raw."""
    raw_log = tmp_path / "raw.jsonl"
    scenario = Scenario(m=64, n=64, k=64, workers=2, reps=3)
    report = run_scenario(scenario, server.endpoint, raw_log=raw_log)

    assert len(report.successful) == 3
    for rep in report.repetitions:
        assert rep.phases_consistent()
        assert rep.check_error is not None and rep.check_error < 1e-12
        assert rep.messages > 0 and rep.bytes_sent > 0
    with jsonlines.open(raw_log) as reader:
        records = list(reader)
    assert [record["rep"] for record in records] == [0, 1, 2]
    assert all(record["routine"] == "gemm" for record in records)


@pytest.mark.parametrize("routine", ["truncated_svd", "transpose", "condest"])
def test_run_other_routines(server: BridgeServer, routine: str) -> None:
    """Every benchmark routine runs and matches its dense result."""
    scenario = Scenario(routine=routine, m=40, n=12, k=3, workers=2, reps=1)
    report = run_scenario(scenario, server.endpoint)
    assert report.failures == []
    assert report.repetitions[0].check_error < 1e-8


def test_multiple_clients(server: BridgeServer) -> None:
    """Several client processes share the send and receive phases."""
    scenario = Scenario(m=50, n=20, k=10, clients=3, workers=2, reps=1)
    report = run_scenario(scenario, server.endpoint)
    assert report.failures == []
    assert report.repetitions[0].check_error < 1e-12


def test_failures_are_reported(server: BridgeServer) -> None:
    """A scenario the pool cannot serve fails each repetition, not the run."""
    report = run_scenario(Scenario(workers=5, reps=2), server.endpoint)
    assert report.failed
    assert len(report.failures) == 2
    assert report.failures[0].startswith("InsufficientWorkersError")
    assert "NA" in format_report(report)


def test_transfer_experiment(server: BridgeServer) -> None:
    """Row-by-row tall sends cost m/m' times the frames; batching evens it out."""
    report = transfer_experiment(
        (4000, 3), (30, 400), ["1row", "2KiB", "1MiB"], server.endpoint
    )
    assert all(row.law_holds for row in report.rows)
    assert report.ratio("1row") == pytest.approx(4000 / 30)
    assert report.ratio("1MiB") < 2
    assert report.messages("tall", "2KiB") < report.messages("tall", "1row")
    assert set(report.to_frame()["shape"]) == {"tall", "wide"}
    with pytest.raises(ArgumentError):
        transfer_experiment((10, 3), (3, 11), ["1row"], server.endpoint)


@pytest.mark.slow
def test_transfer_experiment_full_scale(server: BridgeServer) -> None:
    """512000x100 against 4000x12800 sends 128 times the frames, row by row."""
    report = transfer_experiment(
        (512000, 100), (4000, 12800), ["1row", "1MiB"], server.endpoint
    )
    assert report.ratio("1row") == pytest.approx(128)
    assert report.ratio("1MiB") < 2
    assert all(row.law_holds for row in report.rows)
