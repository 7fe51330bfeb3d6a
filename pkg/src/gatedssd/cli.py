"""Command-line entry point: ``gatedssd <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from gatedssd.errors import GatedSSDError


class _Parser(argparse.ArgumentParser):
    """argparse with single-line diagnostics."""

    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def cmd_synth(args) -> int:
    from gatedssd.trainer import SceneSpec, save_dataset, synthesize_dataset

    if args.num < 1:
        raise ValueError("--num must be >= 1")
    if not 0.0 <= args.object_prob <= 1.0:
        raise ValueError("--object-prob must lie in [0, 1]")
    spec = SceneSpec(image_size=args.size)
    save_dataset(synthesize_dataset(args.num, args.object_prob, args.seed, spec), args.out)
    print(f"wrote {args.num} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    from gatedssd.artifacts import save_model
    from gatedssd.config import RunConfig, config_hash, load_config
    from gatedssd.model import GatedSSD
    from gatedssd.tensor import compute_threads
    from gatedssd.trainer import load_dataset, train

    config = load_config(args.config) if args.config else RunConfig()
    dataset = load_dataset(args.data)
    model = GatedSSD(config.model_config(), seed=config.model_seed)
    if dataset.images.shape[-1] != model.input_size:
        raise ValueError(f"frames are {dataset.images.shape[-1]} px, model expects {model.input_size}")
    out = csv.writer(sys.stdout, lineterminator="\n")
    print(f"# config_hash {config_hash(config)}")
    out.writerow(["epoch", "lr", "l_conf", "l_loc", "l_multibox", "l_binary", "total"])

    def on_epoch(epoch, lr, bd):
        out.writerow([epoch, _fmt(lr), _fmt(bd.l_conf), _fmt(bd.l_loc), _fmt(bd.l_multibox),
                      _fmt(bd.l_binary), _fmt(bd.total)])
        sys.stdout.flush()

    with compute_threads(1):
        train(model, dataset, config.train, config.loss, on_epoch=on_epoch)
    save_model(args.out, config, model.params)
    return 0


def _mode(args):
    from gatedssd.pipeline import BASELINE, gated

    return gated(args.tau) if args.mode == "gated" else BASELINE


def cmd_infer(args) -> int:
    from gatedssd.artifacts import load_detector
    from gatedssd.config import config_hash
    from gatedssd.pipeline import process_frame
    from gatedssd.tensor import compute_threads
    from gatedssd.trainer import load_dataset

    config, model = load_detector(args.model)
    mode = _mode(args)
    dataset = load_dataset(args.data)
    out = csv.writer(sys.stdout, lineterminator="\n")
    print(f"# config_hash {config_hash(config)}")
    out.writerow(["image", "mode", "verdict", "class_id", "score", "x_min", "y_min", "x_max", "y_max"])
    with compute_threads(1):
        for name, img in zip(dataset.names, dataset.images):
            res = process_frame(model, img, mode)
            if not res.detections:
                out.writerow([name, mode.name, res.verdict, "", "", "", "", "", ""])
            for det in res.detections:
                out.writerow([name, mode.name, res.verdict, det.class_id, _fmt(det.score),
                              *(_fmt(v) for v in det.bbox.as_tuple())])
    return 0


def cmd_bench(args) -> int:
    from gatedssd.benchmark import BenchReport, bench_all_cases, monotone_gain_checks

    if args.import_csv:
        report = BenchReport.from_csv(Path(args.import_csv).read_text())
        text = report.to_csv([f"imported from {Path(args.import_csv).name}"])
    else:
        if not args.model:
            raise ValueError("bench needs --model or --import")
        from gatedssd.artifacts import load_detector
        from gatedssd.config import config_hash

        config, model = load_detector(args.model)
        fpc = args.frames_per_camera or config.bench.frames_per_camera
        reps = args.reps or config.bench.repetitions
        if fpc < 1 or reps < 1:
            raise ValueError("--frames-per-camera and --reps must be >= 1")
        oracle = config.bench.oracle_gate if args.oracle_gate is None else args.oracle_gate
        tau = config.gate.tau if args.tau is None else args.tau

        def progress(rep, k, b, g):
            print(f"rep {rep} k={k}: baseline {b.mean:.3f} ms, gated {g.mean:.3f} ms",
                  file=sys.stderr)

        report = bench_all_cases(model, fpc, reps, seed=args.seed if args.seed is not None
                                 else config.bench.seed, tau=tau, oracle_gate=oracle,
                                 progress=progress if args.verbose else None)
        comments = [f"config_hash {config_hash(config)}",
                    f"frames_per_camera {fpc} repetitions {reps} oracle_gate {int(oracle)} tau {tau}"]
        for k, wins, trials, p, ok in monotone_gain_checks(report):
            comments.append(f"sign test gain({k}) > gain({k + 1}): {wins}/{trials} p={p:.4g}"
                            f" {'pass' if ok else 'fail'}")
        text = report.to_csv(comments)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gate_eval(args) -> int:
    from gatedssd.artifacts import load_detector
    from gatedssd.config import config_hash
    from gatedssd.gate import gate_decide, gate_metrics
    from gatedssd.tensor import compute_threads, softmax
    from gatedssd.trainer import load_dataset

    config, model = load_detector(args.model)
    tau = config.gate.tau if args.tau is None else args.tau
    dataset = load_dataset(args.data)
    decisions = []
    with compute_threads(1):
        for img in dataset.images:
            taps = model.features(model.preprocess(img))
            p = float(softmax(model.gate_logits(taps))[0, 1])
            decisions.append(gate_decide(p, tau))
    metrics = gate_metrics(decisions, list(dataset.frame_labels))
    out = csv.writer(sys.stdout, lineterminator="\n")
    print(f"# config_hash {config_hash(config)}")
    out.writerow(["tau", *metrics])
    out.writerow([_fmt(tau), *(_fmt(v) for v in metrics.values())])
    return 0


def cmd_costmodel(args) -> int:
    from gatedssd.benchmark import BenchReport, fit_cost_model

    report = BenchReport.from_csv(Path(args.results).read_text())
    cm = fit_cost_model(report)
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["a_ms", "b_ms", "break_even_k", "r2"])
    out.writerow([_fmt(cm.a), _fmt(cm.b), _fmt(cm.break_even_k), _fmt(cm.r2)])
    return 0


def cmd_gradcheck(args) -> int:
    from gatedssd.gradcheck import TOLERANCE, run_gradcheck

    if args.seeds < 1:
        raise ValueError("--seeds must be >= 1")

    def progress(name, results):
        worst = max(r.rel_error for r in results)
        print(f"{name}: {len(results)} tensors, worst rel error {worst:.3e}", file=sys.stderr)

    results = run_gradcheck(args.seed, args.seeds, progress=progress if args.verbose else None)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.check} seed {r.seed} {r.tensor}: rel error {r.rel_error:.3e} > {TOLERANCE:g}")
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gatedssd", description="Gated single-shot detector toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, required=True)
    p.add_argument("--object-prob", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=96, help="frame side in pixels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model; per-epoch losses go to stdout as CSV")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="per-frame verdicts and detections as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["baseline", "gated"], default="baseline")
    p.add_argument("--tau", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="seven-case camera-set benchmark")
    p.add_argument("--model")
    p.add_argument("--frames-per-camera", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--oracle-gate", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--import", dest="import_csv", metavar="CSV",
                   help="recompute gains from externally measured means")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gate-eval", help="gate accuracy, precision, recall on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_gate_eval)

    p = sub.add_parser("costmodel", help="fit gated latency = a + b k to benchmark results")
    p.add_argument("--results", required=True)
    p.set_defaults(func=cmd_costmodel)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=100, help="random instances per check")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (GatedSSDError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"gatedssd {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
