from importlib import resources

import numpy as np
import pytest

from gatedssd.benchmark import (
    CSV_COLUMNS,
    BenchReport,
    CaseTiming,
    affine_fit,
    bench_all_cases,
    build_case_frames,
    fit_cost_model,
    gain_percent,
    monotone_gain_checks,
    run_case,
    sign_test_pvalue,
)
from gatedssd.errors import CostModelInvalidError, ShapeError
from gatedssd.model import GatedSSD, ModelConfig
from gatedssd.trainer import SceneSpec

DESKTOP_GAINS = [22.69, 18.23, 14.44, 10.84, 7.15, 3.19, -2.05]


def _table(name):
    return BenchReport.from_csv(resources.files("gatedssd").joinpath(f"data/{name}").read_text())


def _synthetic(base, gated_means):
    return BenchReport({k: CaseTiming(k, "baseline", summary={"mean": base}) for k in range(len(gated_means))},
                       {k: CaseTiming(k, "gated", summary={"mean": m}) for k, m in enumerate(gated_means)})


def test_reference_desktop_gains():
    gains = _table("reference_desktop.csv").gains()
    for k, want in enumerate(DESKTOP_GAINS):
        assert abs(gains[k] - want) <= 0.05


def test_reference_gains_strictly_decreasing():
    for name in ("reference_desktop.csv", "reference_xavier.csv"):
        g = _table(name).gains()
        assert all(g[k] > g[k + 1] for k in range(6))


def test_reference_xavier_gains():
    g = _table("reference_xavier.csv").gains()
    for k, want in enumerate([24.23, 19.88, 14.86, 10.41, 6.45, 2.79, -6.44]):
        assert abs(g[k] - want) <= 0.05


def test_gain_sign_convention():
    assert gain_percent(50.0, 40.0) == 20.0
    assert gain_percent(50.0, 55.0) == -10.0


def test_csv_round_trip_and_header():
    report = _table("reference_desktop.csv")
    text = report.to_csv(["config_hash abc"])
    lines = text.splitlines()
    assert lines[0] == "# config_hash abc"
    assert lines[1].startswith("# gain_percent = (baseline_mean - gated_mean)")
    assert lines[2] == ",".join(CSV_COLUMNS)
    again = BenchReport.from_csv(text)
    assert again.gains() == pytest.approx(report.gains(), abs=1e-3)


def test_csv_import_errors():
    with pytest.raises(ShapeError):
        BenchReport.from_csv("a,b\n1,2\n")
    with pytest.raises(ShapeError):
        BenchReport.from_csv("case_k,mode,mean_ms\n0,fast,1.0\n")
    with pytest.raises(ShapeError):
        BenchReport.from_csv("case_k,mode,mean_ms\n0,gated,1.0\n")


def test_affine_exact_fit():
    report = _synthetic(50.0, [38 + 2 * k for k in range(7)])
    cm = fit_cost_model(report)
    assert abs(cm.a - 38) < 1e-9 and abs(cm.b - 2) < 1e-9
    assert cm.break_even_k == pytest.approx(6.0, abs=1e-9)
    assert cm.r2 == pytest.approx(1.0)


def test_constant_data_invalid():
    with pytest.raises(CostModelInvalidError):
        fit_cost_model(_synthetic(50.0, [40.0] * 7))
    with pytest.raises(CostModelInvalidError):
        fit_cost_model(_synthetic(50.0, [40.0, 41.0]))
    with pytest.raises(CostModelInvalidError):
        affine_fit([2, 2, 2], [1, 2, 3])


def test_reference_cost_model():
    cm = fit_cost_model(_table("reference_desktop.csv"))
    # least squares over all seven means; the endpoint slope (50.82-38.5)/6 is 2.053
    assert cm.b == pytest.approx(2.05, abs=0.1)
    assert 5 < cm.break_even_k < 6
    assert cm.r2 >= 0.95


def test_sign_test():
    assert sign_test_pvalue(10, 10) == pytest.approx(1 / 1024)
    assert sign_test_pvalue(0, 10) == 1.0
    assert sign_test_pvalue(9, 10) == pytest.approx(11 / 1024)


def test_monotone_checks_on_rep_means():
    base = {k: CaseTiming(k, "baseline", rep_means=[10.0] * 10) for k in range(3)}
    gate = {k: CaseTiming(k, "gated", rep_means=[5.0 + k + 0.01 * r for r in range(10)]) for k in range(3)}
    checks = monotone_gain_checks(BenchReport(base, gate))
    assert [c[:3] for c in checks] == [(0, 10, 10), (1, 10, 10)]
    assert all(c[4] for c in checks)


def test_paired_rep_gains_preferred():
    base = {0: CaseTiming(0, "baseline", rep_means=[10.0, 10.0])}
    gate = {0: CaseTiming(0, "gated", rep_means=[9.0, 8.0])}
    report = BenchReport(base, gate)
    assert report.rep_gains(0) == pytest.approx([10.0, 20.0])
    gate[0].rep_gains = [11.0, 12.0]
    assert report.rep_gains(0) == [11.0, 12.0]


def test_build_case_frames():
    rng = np.random.default_rng(0)
    sets, labels = build_case_frames(2, 4, rng, SceneSpec(image_size=32))
    assert len(sets) == 4 and all(len(s) == 6 for s in sets)
    assert all(lab.sum() == 2 for lab in labels)
    with pytest.raises(ShapeError):
        build_case_frames(7, 1, rng, SceneSpec())


def test_run_case_structure():
    model = GatedSSD(ModelConfig(), seed=0)
    base, gate, log = run_case(model, 3, frames_per_camera=3, rng=np.random.default_rng(1), warmup=1)
    assert len(base.samples_ms) == len(gate.samples_ms) == 3
    assert all(m == 6 * (model.backbone_macs() + model.detection_macs()) for m in base.macs)
    full = model.backbone_macs() + model.gate_macs() + model.detection_macs()
    skip = model.backbone_macs() + model.gate_macs()
    # oracle gate: exactly 3 cameras pass in every set
    assert all(m == 3 * full + 3 * skip for m in gate.macs)
    assert len(log) == 18 and sum(y for _, y in log) == 9


def test_bench_all_cases_shape():
    model = GatedSSD(ModelConfig(), seed=0)
    report = bench_all_cases(model, frames_per_camera=1, repetitions=2)
    assert report.cases == list(range(7))
    assert all(len(report.baseline[k].rep_means) == 2 for k in range(7))
    assert all(len(report.gated[k].rep_gains) == 2 for k in range(7))
    assert all(len(report.gated[k].samples_ms) == 2 for k in range(7))
    assert report.gate_metrics is not None
