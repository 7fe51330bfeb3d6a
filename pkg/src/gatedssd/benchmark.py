"""Seven-case latency benchmark (0..6 object cameras), gain reporting and cost model."""

from __future__ import annotations

import csv
import gc
import io
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from gatedssd.errors import CostModelInvalidError, ShapeError
from gatedssd.gate import gate_decide, gate_metrics
from gatedssd.pipeline import BASELINE, NUM_CAMERAS, gated, process_camera_set
from gatedssd.tensor import compute_threads
from gatedssd.trainer import SceneSpec, generate_scene

CSV_COLUMNS = ["case_k", "mode", "mean_ms", "min_ms", "max_ms", "sd_ms", "gain_percent", "macs_mean"]
GAIN_NOTE = ("# gain_percent = (baseline_mean - gated_mean) / baseline_mean * 100; "
             "positive means the gated pipeline is faster")
WARMUP_SETS = 5


@dataclass
class CaseTiming:
    k: int
    mode: str
    samples_ms: list[float] = field(default_factory=list)
    macs: list[int] = field(default_factory=list)
    rep_means: list[float] = field(default_factory=list)
    rep_gains: list[float] = field(default_factory=list)  # gated rows: median paired gain per repetition
    summary: dict | None = None  # imported statistics when no raw samples exist

    def _stat(self, key, fn):
        if self.samples_ms:
            return fn(self.samples_ms)
        return (self.summary or {}).get(key)

    @property
    def mean(self):
        return self._stat("mean", statistics.fmean)

    @property
    def min(self):
        return self._stat("min", min)

    @property
    def max(self):
        return self._stat("max", max)

    @property
    def sd(self):
        return self._stat("sd", lambda s: statistics.stdev(s) if len(s) > 1 else 0.0)

    @property
    def macs_mean(self):
        return statistics.fmean(self.macs) if self.macs else (self.summary or {}).get("macs")


def gain_percent(baseline_mean: float, gated_mean: float) -> float:
    return (baseline_mean - gated_mean) / baseline_mean * 100.0


@dataclass
class BenchReport:
    baseline: dict[int, CaseTiming]
    gated: dict[int, CaseTiming]
    gate_metrics: dict | None = None

    @property
    def cases(self) -> list[int]:
        return sorted(self.gated)

    def baseline_mean(self, k: int) -> float:
        row = self.baseline.get(k)
        if row is None:  # a single shared baseline row
            row = next(iter(self.baseline.values()))
        return row.mean

    def gain(self, k: int) -> float:
        return gain_percent(self.baseline_mean(k), self.gated[k].mean)

    def gains(self) -> dict[int, float]:
        return {k: self.gain(k) for k in self.cases}

    def rep_gains(self, k: int) -> list[float]:
        """Per-repetition gains for case k.

        Live runs use the median over camera sets of the gain between each
        set's adjacent baseline and gated timings, which cancels host drift
        and ignores scheduler spikes. Without per-set data the repetition
        means are compared.
        """
        if self.gated[k].rep_gains:
            return list(self.gated[k].rep_gains)
        return [gain_percent(b, g) for b, g in zip(self.baseline[k].rep_means, self.gated[k].rep_means)]

    def to_csv(self, header_comments=()) -> str:
        buf = io.StringIO()
        for line in (*header_comments, GAIN_NOTE):
            buf.write(line if line.startswith("#") else f"# {line}")
            buf.write("\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for k in sorted(set(self.baseline) | set(self.gated)):
            for mode, table in (("baseline", self.baseline), ("gated", self.gated)):
                row = table.get(k)
                if row is None:
                    continue
                gain = self.gain(k) if mode == "gated" else None
                writer.writerow([k, mode, _fmt(row.mean), _fmt(row.min), _fmt(row.max), _fmt(row.sd),
                                 _fmt(gain), _fmt(row.macs_mean)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "BenchReport":
        """Rebuild a report from CSV means (e.g. externally published timings)."""
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        reader = csv.DictReader(lines)
        if reader.fieldnames is None or not {"case_k", "mode", "mean_ms"} <= set(reader.fieldnames):
            raise ShapeError("imported CSV needs at least the columns case_k, mode, mean_ms")
        tables = {"baseline": {}, "gated": {}}
        for lineno, rec in enumerate(reader, 2):
            mode = rec["mode"].strip().lower()
            if mode not in tables:
                raise ShapeError(f"line {lineno}: unknown mode {rec['mode']!r}")
            try:
                k = int(rec["case_k"])
                summary = {key: _parse(rec.get(col)) for key, col in
                           (("mean", "mean_ms"), ("min", "min_ms"), ("max", "max_ms"), ("sd", "sd_ms"),
                            ("macs", "macs_mean"))}
            except ValueError as exc:
                raise ShapeError(f"line {lineno}: {exc}") from None
            if summary["mean"] is None:
                raise ShapeError(f"line {lineno}: missing mean_ms")
            tables[mode][k] = CaseTiming(k, mode, summary=summary)
        if not tables["baseline"] or not tables["gated"]:
            raise ShapeError("imported CSV needs baseline and gated rows")
        return cls(tables["baseline"], tables["gated"])


def _fmt(v):
    return "" if v is None else f"{v:.4f}"


def _parse(v):
    if v is None or not str(v).strip():
        return None
    return float(v)


def build_case_frames(k: int, frames_per_camera: int, rng, spec: SceneSpec):
    """``frames_per_camera`` camera sets with exactly k object cameras each (random cameras)."""
    if not 0 <= k <= NUM_CAMERAS:
        raise ShapeError(f"object-frame count {k} outside 0..{NUM_CAMERAS}")
    sets, labels = [], []
    for _ in range(frames_per_camera):
        present = np.zeros(NUM_CAMERAS, dtype=bool)
        present[rng.permutation(NUM_CAMERAS)[:k]] = True
        sets.append([generate_scene(rng, spec, bool(p))[0] for p in present])
        labels.append(present)
    return sets, labels


def _timed(model, frames, mode, labels):
    start = time.perf_counter_ns()
    result = process_camera_set(model, frames, mode, preprocessed=True, oracle_labels=labels)
    return (time.perf_counter_ns() - start) / 1e6, result


def _prepare_case(model, k, frames_per_camera, rng, spec):
    sets, labels = build_case_frames(k, frames_per_camera, rng, spec)
    return [[model.preprocess(f) for f in s] for s in sets], labels


def _time_cases(model, cases, tau, oracle_gate, warmup):
    """Time every case's camera sets, interleaving cases set by set.

    ``cases`` maps k to (prepared sets, labels). Set i of every case is timed
    before set i + 1 of any case, starting from a rotating case, so slow host
    drift lands on all cases alike. Within a set the two modes alternate
    which runs first.
    """
    mode = gated(tau)
    rows = {k: (CaseTiming(k, "baseline"), CaseTiming(k, "gated"), []) for k in cases}
    paired = {k: [] for k in cases}
    ks = sorted(cases)
    n_sets = min(len(prepared) for prepared, _ in cases.values())
    with compute_threads(1):
        for k in ks:
            prepared, labels = cases[k]
            for i in range(min(warmup, n_sets)):
                process_camera_set(model, prepared[i], BASELINE, preprocessed=True)
                process_camera_set(model, prepared[i], mode, preprocessed=True,
                                   oracle_labels=list(labels[i]) if oracle_gate else None)
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for i in range(n_sets):
                for j in range(len(ks)):
                    k = ks[(i + j) % len(ks)]
                    prepared, labels = cases[k]
                    base, gate, gate_log = rows[k]
                    oracle = list(labels[i]) if oracle_gate else None
                    order = ((BASELINE, base), (mode, gate))
                    if (i + j) % 2:
                        order = order[::-1]
                    times = {}
                    for m, table in order:
                        ms, res = _timed(model, prepared[i], m, oracle if m.gated else None)
                        table.samples_ms.append(ms)
                        table.macs.append(res.total_macs)
                        times[m.gated] = ms
                        if m.gated:
                            gate_log.extend((r.p_object, bool(y)) for r, y in zip(res.frames, labels[i]))
                    paired[k].append(gain_percent(times[False], times[True]))
        finally:
            if gc_was_enabled:
                gc.enable()
    for k, (base, gate, _) in rows.items():
        base.rep_means.append(base.mean)
        gate.rep_means.append(gate.mean)
        gate.rep_gains.append(statistics.median(paired[k]))
    return rows


def run_case(model, k: int, frames_per_camera: int = 50, rng=None, tau: float = 0.5,
             oracle_gate: bool = True, scene_spec: SceneSpec | None = None, warmup: int = WARMUP_SETS):
    """Time baseline and gated execution over camera sets with k object cameras.

    Frames are generated and preprocessed before timing; only model compute
    is inside the clock. The two modes alternate order set by set. Returns
    (baseline CaseTiming, gated CaseTiming, [(p_object, label), ...]).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = scene_spec or SceneSpec(image_size=model.input_size)
    cases = {k: _prepare_case(model, k, frames_per_camera, rng, spec)}
    return _time_cases(model, cases, tau, oracle_gate, warmup)[k]


def bench_all_cases(model, frames_per_camera: int = 50, repetitions: int = 10, seed: int = 0,
                    tau: float = 0.5, oracle_gate: bool = True, progress=None) -> BenchReport:
    """Run cases k = 0..6 ``repetitions`` times; statistics pool all repetitions.

    Within a repetition the seven cases are timed interleaved (see
    ``_time_cases``); ``progress(rep, k, baseline, gated)`` reports each case
    once its repetition finishes.
    """
    spec = SceneSpec(image_size=model.input_size)
    baseline = {k: CaseTiming(k, "baseline") for k in range(NUM_CAMERAS + 1)}
    gated_rows = {k: CaseTiming(k, "gated") for k in range(NUM_CAMERAS + 1)}
    p_log = []
    for rep in range(repetitions):
        cases = {k: _prepare_case(model, k, frames_per_camera, np.random.default_rng([seed, rep, k]), spec)
                 for k in range(NUM_CAMERAS + 1)}
        rows = _time_cases(model, cases, tau, oracle_gate, WARMUP_SETS)
        for k in range(NUM_CAMERAS + 1):
            b, g, glog = rows[k]
            for dst, src in ((baseline[k], b), (gated_rows[k], g)):
                dst.samples_ms += src.samples_ms
                dst.macs += src.macs
                dst.rep_means += src.rep_means
                dst.rep_gains += src.rep_gains
            p_log += glog
            if progress is not None:
                progress(rep, k, b, g)
    metrics = gate_metrics([gate_decide(p, tau) for p, _ in p_log], [y for _, y in p_log]) if p_log else None
    return BenchReport(baseline, gated_rows, metrics)


def sign_test_pvalue(successes: int, trials: int) -> float:
    """One-sided P(X >= successes) for X ~ Binomial(trials, 1/2)."""
    return sum(math.comb(trials, i) for i in range(successes, trials + 1)) / 2 ** trials


def monotone_gain_checks(report: BenchReport, alpha: float = 0.05):
    """For each adjacent pair of cases, test gain(k) > gain(k+1) across repetitions.

    Returns a list of (k, successes, trials, p_value, passed).
    """
    out = []
    for k in report.cases[:-1]:
        a, b = report.rep_gains(k), report.rep_gains(k + 1)
        wins = sum(x > y for x, y in zip(a, b))
        p = sign_test_pvalue(wins, len(a))
        out.append((k, wins, len(a), p, p < alpha))
    return out


@dataclass
class CostModel:
    a: float
    b: float
    break_even_k: float
    r2: float
    baseline_mean: float
    predicted_gain: dict[int, float]


def affine_fit(xs, ys):
    """Least squares y = a + b x; returns (a, b, r2)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx == 0:
        raise CostModelInvalidError("need at least two distinct case counts")
    b = ((x - xm) * (y - ym)).sum() / sxx
    a = ym - b * xm
    ss_tot = ((y - ym) ** 2).sum()
    ss_res = ((y - (a + b * x)) ** 2).sum()
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), float(r2)


def fit_cost_model(report: BenchReport) -> CostModel:
    """Fit gated_mean(k) = a + b k and solve a + b k = baseline for the break-even k."""
    ks = report.cases
    if len(ks) < 3:
        raise CostModelInvalidError("cost model needs at least 3 cases")
    ys = [report.gated[k].mean for k in ks]
    a, b, r2 = affine_fit(ks, ys)
    scale = max(abs(float(np.mean(ys))), 1.0)
    if b <= 1e-9 * scale:
        raise CostModelInvalidError(f"per-object-frame cost b = {b:.3g} is not positive")
    base = float(np.mean([report.baseline_mean(k) for k in ks]))
    predicted = {k: gain_percent(base, a + b * k) for k in ks}
    return CostModel(a, b, (base - a) / b, r2, base, predicted)
