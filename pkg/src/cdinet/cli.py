"""Command-line entry point: generate / train / predict / eval / bench /
activations.

Batch-style tool: every run is fully determined by its flags and seeds,
and every output artifact gets a manifest JSON written atomically next to
it. Exit codes: 0 success, 2 usage, 3 I/O or corrupt file, 4 numeric
abort during training, 5 model mismatch (wrong head or parameter shape).
"""

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from math import pi

import numpy as np

from . import __version__
from . import baseline as bl
from . import evaluate as ev
from . import fields as fd
from . import model as md
from . import train as tr

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_MODEL = 5


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(artifact_path: str, payload: dict) -> str:
    """Atomic manifest next to an output artifact."""
    path = artifact_path + ".manifest.json"
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    return path


def _manifest(subcommand: str, args: argparse.Namespace, started: str,
              inputs: list[str], outputs: list[str], extra: dict | None = None) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    return {
        "schema_version": 1,
        "tool": {"name": "cdinet", "version": __version__},
        "subcommand": subcommand,
        "config": cfg,
        "inputs": inputs,
        "outputs": outputs,
        "started": started,
        "finished": _now(),
        **(extra or {}),
    }


def _load_head(path: str, head: str) -> md.Network:
    return md.require_head(md.load_weights(path), head)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    started = _now()
    cfg = fd.GenerationConfig(
        grid_n=args.grid,
        n_points=(args.points_min, args.points_max),
        min_area=args.min_area,
        blur_sigma=args.blur_sigma,
        support_threshold=args.support_threshold,
        phase_sigma=args.phase_sigma,
        phi_max_range=(args.phimax_min, args.phimax_max),
        zero_phase=args.zero_phase,
    )

    def progress(done, total):
        if done % 10000 == 0 or done == total:
            print(f"generated {done}/{total}", file=sys.stderr)

    fd.generate_dataset(args.count, args.seed, args.out, cfg, progress=progress)
    write_manifest(args.out, _manifest("generate", args, started,
                                       inputs=[], outputs=[args.out],
                                       extra={"seeds": {"master": args.seed}}))
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    started = _now()
    ds = fd.Dataset(args.data)
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    config = tr.TrainConfig(head=args.head, epochs=args.epochs,
                            batch_size=args.batch, lr=args.lr,
                            seed=args.seed, validation_count=args.val_count)

    def progress(epoch, st):
        print(f"epoch {epoch}/{config.epochs}  train {st.train_loss:.5f}  "
              f"val {st.val_loss:.5f}  ({st.seconds:.1f}s)", file=sys.stderr)

    net, history = tr.train(config, ds, progress=progress)
    md.save_weights(args.out, net)
    history_path = args.history or (args.out + ".history.json")
    with open(history_path, "w", encoding="utf-8") as f:
        json.dump(history.to_dict(), f, indent=2)
        f.write("\n")
    write_manifest(args.out, _manifest(
        "train", args, started, inputs=[args.data],
        outputs=[args.out, history_path],
        extra={"seeds": {"train": args.seed},
               "final_val_loss": history.entries[-1].val_loss}))
    print(f"trained {args.head} head -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    started = _now()
    snet = _load_head(args.snet, "shape")
    pnet = _load_head(args.pnet, "phase")
    ds = fd.Dataset(args.infile)
    count = len(ds) if args.limit is None else min(args.limit, len(ds))
    if count == 0:
        raise ValueError("no patterns to predict")
    os.makedirs(args.out_dir, exist_ok=True)
    preds = np.zeros((count, ds.grid_n, ds.grid_n), dtype=np.complex64)
    latencies = []
    for i in range(count):
        s = ds[i]
        t0 = time.perf_counter()
        obj = md.predict_object(snet, pnet, s.pattern, args.threshold)
        latencies.append((time.perf_counter() - t0) * 1e3)
        preds[i] = obj.astype(np.complex64)
        ev.write_pgm(os.path.join(args.out_dir, f"pred_{i:06d}_shape.pgm"),
                     np.abs(obj))
        ev.write_pgm(os.path.join(args.out_dir, f"pred_{i:06d}_phase.pgm"),
                     np.angle(obj))
    fields_path = os.path.join(args.out_dir, "predicted_fields.npy")
    np.save(fields_path, preds)
    lat = sorted(latencies)
    write_manifest(fields_path, _manifest(
        "predict", args, started, inputs=[args.snet, args.pnet, args.infile],
        outputs=[args.out_dir],
        extra={"latency_ms": {"per_sample": latencies,
                              "median": lat[len(lat) // 2]}}))
    print(f"predicted {count} patterns -> {args.out_dir}")
    return 0


def _panel_rows(ds, snet, pnet, indices, threshold):
    rows = [[] for _ in range(6)]
    for i in indices:
        s = ds[int(i)]
        obj = md.predict_object(snet, pnet, s.pattern, threshold)
        pred_amp = fd.diffraction_amplitudes(obj)
        rows[0].append(s.pattern)
        rows[1].append(pred_amp)
        rows[2].append(s.shape_target)
        rows[3].append(np.abs(obj))
        rows[4].append(fd.unit_to_phase(s.phase_target.astype(np.float64)))
        rows[5].append(np.angle(obj))
    return rows


def cmd_eval(args) -> int:
    started = _now()
    snet = _load_head(args.snet, "shape")
    pnet = _load_head(args.pnet, "phase")
    ds = fd.Dataset(args.data)
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    count = len(ds) if args.limit is None else min(args.limit, len(ds))
    indices = np.arange(count)
    records = ev.evaluate_dataset(snet, pnet, ds, indices, args.threshold)
    os.makedirs(args.out_dir, exist_ok=True)

    records_path = os.path.join(args.out_dir, "records.jsonl")
    ev.write_records_jsonl(records_path, records)
    edges, counts = ev.error_histogram(records, args.bins)
    ev.write_histogram_csv(os.path.join(args.out_dir, "histogram.csv"),
                           edges, counts)

    by_id = {id(r): int(i) for i, r in zip(indices, records)}
    for order in ("best", "worst"):
        ranked = ev.rank_cases(records, min(args.k, len(records)), order)
        rows = _panel_rows(ds, snet, pnet, [by_id[id(r)] for r in ranked],
                           args.threshold)
        ev.write_pgm(os.path.join(args.out_dir, f"{order}_{args.k}.pgm"),
                     ev.panel_grid(rows))

    chi2s = np.array([r.chi2 for r in records])
    write_manifest(records_path, _manifest(
        "eval", args, started, inputs=[args.snet, args.pnet, args.data],
        outputs=[args.out_dir],
        extra={"chi2": {"mean": float(chi2s.mean()),
                        "median": float(np.median(chi2s)),
                        "max": float(chi2s.max()),
                        "frac_below_0.5": float((chi2s < 0.5).mean())}}))
    print(f"evaluated {count} samples -> {args.out_dir} "
          f"(mean chi2 {chi2s.mean():.4f})")
    return 0


def _schedule_from_args(args) -> bl.Schedule:
    return bl.Schedule(
        phases=[("hio", args.hio_iters, args.beta), ("er", args.er_iters, 0.0)],
        shrinkwrap_every=args.shrink_every,
        shrink_sigma=args.shrink_sigma,
        shrink_threshold=args.shrink_threshold)


def cmd_bench(args) -> int:
    started = _now()
    snet = _load_head(args.snet, "shape")
    pnet = _load_head(args.pnet, "phase")
    ds = fd.Dataset(args.data)
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    count = min(args.count, len(ds))
    report = bl.benchmark(snet, pnet, ds, np.arange(count),
                          _schedule_from_args(args), args.threshold, args.seed)
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    write_manifest(args.out, _manifest(
        "bench", args, started, inputs=[args.snet, args.pnet, args.data],
        outputs=[args.out],
        extra={"speedup": report["speedup"], "hardware": report["hardware"]}))
    print(f"median nn {report['medians']['nn_ms']:.2f} ms, "
          f"iterative {report['medians']['iter_ms']:.1f} ms, "
          f"speedup {report['speedup']:.0f}x")
    return 0


def cmd_activations(args) -> int:
    started = _now()
    net = md.load_weights(args.net)
    ds = fd.Dataset(args.data)
    if args.sample >= len(ds):
        raise ValueError(f"sample index {args.sample} out of range ({len(ds)})")
    s = ds[args.sample]
    amap = ev.activation_map(net, s.pattern, args.layer)
    ev.write_pgm(args.out, amap)
    write_manifest(args.out, _manifest(
        "activations", args, started, inputs=[args.net, args.data],
        outputs=[args.out],
        extra={"layer": args.layer, "head": net.spec.head}))
    print(f"activation map of conv layer {args.layer} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cdinet",
        description="Synthesize diffraction data, train the paired shape/phase "
                    "inverters, and evaluate them against iterative retrieval.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic CDIN dataset")
    g.add_argument("--count", type=_positive_int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--grid", type=int, default=32)
    g.add_argument("--points-min", type=int, default=5)
    g.add_argument("--points-max", type=int, default=15)
    g.add_argument("--min-area", type=int, default=12)
    g.add_argument("--blur-sigma", type=float, default=1.0)
    g.add_argument("--support-threshold", type=float, default=0.1)
    g.add_argument("--phase-sigma", type=float, default=2.0)
    g.add_argument("--phimax-min", type=float, default=0.1)
    g.add_argument("--phimax-max", type=float, default=pi)
    g.add_argument("--zero-phase", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one head on a CDIN dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--head", choices=("shape", "phase"), required=True)
    t.add_argument("--epochs", type=_positive_int, default=10)
    t.add_argument("--batch", type=_positive_int, default=256)
    t.add_argument("--val-count", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--out", required=True)
    t.add_argument("--history", default=None,
                   help="history JSON path (default: <out>.history.json)")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="invert patterns from a CDIN file")
    pr.add_argument("--snet", required=True)
    pr.add_argument("--pnet", required=True)
    pr.add_argument("--in", dest="infile", required=True)
    pr.add_argument("--threshold", type=float, default=0.1)
    pr.add_argument("--limit", type=_positive_int, default=None)
    pr.add_argument("--out-dir", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--snet", required=True)
    e.add_argument("--pnet", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--k", type=_positive_int, default=5)
    e.add_argument("--bins", type=_positive_int, default=50)
    e.add_argument("--threshold", type=float, default=0.1)
    e.add_argument("--limit", type=_positive_int, default=None)
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="latency: one-shot nets vs iterative retrieval")
    b.add_argument("--snet", required=True)
    b.add_argument("--pnet", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--count", type=_positive_int, default=10)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--threshold", type=float, default=0.1)
    b.add_argument("--hio-iters", type=int, default=560)
    b.add_argument("--er-iters", type=int, default=60)
    b.add_argument("--beta", type=float, default=0.9)
    b.add_argument("--shrink-every", type=int, default=20)
    b.add_argument("--shrink-sigma", type=float, default=1.0)
    b.add_argument("--shrink-threshold", type=float, default=0.1)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("activations", help="mean activation map of a conv layer")
    a.add_argument("--net", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--sample", type=int, default=0)
    a.add_argument("--layer", type=_positive_int, required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_activations)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (md.HeadTagMismatchError, md.ParameterShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except (md.MagicMismatchError, md.VersionMismatchError,
            md.TruncatedFileError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except tr.NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
