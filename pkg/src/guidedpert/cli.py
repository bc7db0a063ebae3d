"""Command-line front end.

Every command writes its CSVs plus ``manifest.json`` into ``--out-dir``.
Wall-clock measurements go to ``*timings.csv`` and the manifest only, so the
remaining CSVs are byte-identical across re-runs (``guidedpert rerun``).
"""
import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__, modelio
from .experiments import (DatasetError, check_compatible, eps_grid, evaluate, knn_sweep, load_data, make_index,
                          predict_all, score, sha256_file, sweep, time_refinement)
from .gp import VARIANTS, PerturbConfig
from .netcore import INPUT
from .trainer import ALIASES, ARCHS, TrainingDiverged, build_arch, default_config, train

log = logging.getLogger("guidedpert")

DEFAULT_GRID = "-1:1:0.05"


def fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else f"{v:.6f}"
    return str(v)


class Run:
    """Collects output files and timings of one command, then writes the manifest."""

    def __init__(self, args, argv):
        self.args, self.argv = args, list(argv)
        self.out = args.out_dir
        os.makedirs(self.out, exist_ok=True)
        self.outputs, self.timings, self.extra = {}, {}, {}
        self.t0 = time.perf_counter()

    def path(self, name):
        return os.path.join(self.out, name)

    def csv(self, name, header, rows, deterministic=True):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([fmt(v) for v in r])
        self.outputs[name] = deterministic

    def file(self, name, deterministic=True):
        self.outputs[name] = deterministic

    def finish(self):
        self.timings["total_seconds"] = time.perf_counter() - self.t0
        manifest = {
            "version": __version__,
            "command": self.args.command,
            "argv": self.argv,
            "config": {k: v for k, v in vars(self.args).items() if k != "func"},
            "seeds": {"seed": self.args.seed},
            "outputs": {n: {"sha256": sha256_file(self.path(n)), "deterministic": d}
                        for n, d in sorted(self.outputs.items())},
            "timings": self.timings,
            **self.extra,
        }
        if getattr(self.args, "model", None):
            manifest["model"] = {"path": self.args.model, "sha256": sha256_file(self.args.model)}
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        return manifest


def _load_model(run):
    net, index = modelio.load(run.args.model)
    return net, index


def _eval_data(run, net):
    data = load_data(run.args.dataset, "val", mean=net.channel_mean, count=run.args.limit)
    check_compatible(net, data)
    run.extra["dataset"] = {"spec": run.args.dataset, "split": "val", "fingerprint": data.fingerprint,
                            "count": len(data)}
    return data


def score_name(data):
    return "miou" if data.dense else "accuracy"


def plot_curves(path, curves, ylabel, baseline=None):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (xs, ys) in curves.items():
        ax.plot(xs, ys, marker=".", label=label)
    if baseline is not None:
        ax.axhline(baseline, color="gray", ls="--", lw=1, label="baseline")
    ax.set_xlabel("epsilon")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_train(run):
    a = run.args
    cfg = default_config(a.arch, lr=a.lr, batch_size=a.batch_size, epochs=a.epochs, seed=a.seed)
    data = load_data(a.dataset, "train", count=a.limit)
    held = load_data(a.dataset, "val", mean=data.mean, count=a.limit)
    net = build_arch(cfg.arch, seed=a.seed, input_shape=data.images.shape[1:], num_classes=data.num_classes,
                     channel_mean=data.mean)
    check_compatible(net, data)
    run.extra["dataset"] = {"spec": a.dataset, "fingerprint": data.fingerprint, "heldout": held.fingerprint}
    run.extra["train_config"] = cfg.as_dict()

    def metric(n, x, y):
        return score(held, predict_all(n, x, 100)).primary

    history = train(net, data.images, data.labels, cfg, heldout=(held.images, held.labels), metric=metric)
    name = f"{cfg.arch}.gpn"
    modelio.save(run.path(name), net)
    run.file(name)
    run.csv("loss.csv", ["epoch", "train_loss", "heldout_" + score_name(held)],
            [(h["epoch"], h["train_loss"], h["heldout_metric"]) for h in history])
    run.csv("timings.csv", ["epoch", "seconds"], [(h["epoch"], h["seconds"]) for h in history], deterministic=False)
    run.timings["train_seconds"] = sum(h["seconds"] for h in history)
    print(f"saved {run.path(name)}; held-out {score_name(held)} {history[-1]['heldout_metric']:.4f}")


def cmd_eval(run):
    a = run.args
    net, _ = _load_model(run)
    data = _eval_data(run, net)
    cfg = PerturbConfig(a.eps, a.variant, a.iterations, a.truncate_at, a.seed)
    res = evaluate(net, data, cfg)
    name = score_name(data)
    run.csv("metrics.csv", ["method", "epsilon", name, "pixel_accuracy" if data.dense else "top1", "corrected", "corrupted"],
            [("baseline", 0.0, res.baseline.primary, res.baseline.accuracy, 0, 0),
             (a.variant, a.eps, res.refined.primary, res.refined.accuracy, res.corrected, res.corrupted)])
    run.csv("iterations.csv", ["iteration", name],
            [(0, res.baseline.primary)] + [(i + 1, v) for i, v in enumerate(res.per_iteration)])
    if data.dense:
        b, g = res.baseline.confusion.per_class_iou(), res.refined.confusion.per_class_iou()
        run.csv("iou.csv", ["class", "baseline_iou", "gp_iou"], [(c, b[c], g[c]) for c in range(len(b))])
    t = res.timings
    run.csv("timings.csv", ["phase", "seconds_per_image"],
            [(k, t[k]) for k in ("baseline", "forward", "backward", "reforward", "gp_total")]
            + [("gp_over_baseline", t["gp_total"] / max(t["baseline"], 1e-12))], deterministic=False)
    run.timings.update(t)
    print(f"baseline {name} {res.baseline.primary:.4f}  gp {res.refined.primary:.4f}  "
          f"corrected {res.corrected} corrupted {res.corrupted}")


def cmd_sweep(run):
    a = run.args
    net, _ = _load_model(run)
    data = _eval_data(run, net)
    grid = eps_grid(a.eps_grid)
    base, rows = sweep(net, data, grid, a.variant, a.truncate_at, a.seed)
    name = score_name(data)
    run.csv("sweep.csv", ["epsilon", name, "pixel_accuracy" if data.dense else "top1"],
            [(e, s.primary, s.accuracy) for e, s in zip(grid, rows)])
    plot_curves(run.path("sweep.png"), {a.variant: (grid, [s.primary for s in rows])}, name, base.primary)
    run.file("sweep.png", deterministic=False)
    best = max(range(len(grid)), key=lambda i: rows[i].primary)
    print(f"baseline {base.primary:.4f}; best eps {grid[best]:+.3f} -> {rows[best].primary:.4f}")


def cmd_ablate(run):
    a = run.args
    net, _ = _load_model(run)
    data = _eval_data(run, net)
    grid = eps_grid(a.eps_grid)
    variants = a.variant.split(",")
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; expected one of {', '.join(VARIANTS)}")
    name = score_name(data)
    summary, curves, plots = [], [], {}
    for v in variants:
        base, rows = sweep(net, data, grid, v, a.truncate_at, a.seed)
        best = max(range(len(grid)), key=lambda i: rows[i].primary)
        summary.append((v, grid[best], rows[best].primary, base.primary))
        curves.extend((v, e, s.primary) for e, s in zip(grid, rows))
        plots[v] = (grid, [s.primary for s in rows])
        print(f"{v:20s} best eps {grid[best]:+.3f} {name} {rows[best].primary:.4f}")
    run.csv("variants.csv", ["variant", "best_epsilon", "best_" + name, "baseline_" + name], summary)
    run.csv("variant_curves.csv", ["variant", "epsilon", name], curves)
    plot_curves(run.path("variants.png"), plots, name, summary[0][3])
    run.file("variants.png", deterministic=False)


def cmd_truncate(run):
    a = run.args
    net, _ = _load_model(run)
    data = _eval_data(run, net)
    layers = [INPUT] + [l for l in a.truncate_at.split(",") if l and l != INPUT]
    for l in layers:
        net.index(l)  # unknown layer -> KeyError
    grid = eps_grid(a.eps_grid) if a.eps_grid else [a.eps]
    name = score_name(data)
    rows, trows = [], []
    for l in layers:
        base, scores = sweep(net, data, grid, "gp_onehot", l, a.seed)
        best = max(range(len(grid)), key=lambda i: scores[i].primary)
        rows.append((l, net.index(l) + 1, grid[best], scores[best].primary, base.primary))
        trows.append((l, time_refinement(net, data.images, l, grid[best], repeats=a.repeats)))
        print(f"{l:10s} eps {grid[best]:+.3f} {name} {scores[best].primary:.4f} "
              f"(baseline {base.primary:.4f}) {1000 * trows[-1][1]:.2f} ms/image")
    base_time = time_refinement(net, data.images, INPUT, 0.0, repeats=a.repeats)
    run.csv("truncate.csv", ["layer", "depth", "epsilon", name, "baseline_" + name], rows)
    run.csv("truncate_timings.csv", ["layer", "seconds_per_image"], trows, deterministic=False)
    run.timings.update({f"refine_{l}": t for l, t in trows})
    run.timings["refine_at_input_eps0"] = base_time


def cmd_knn(run):
    a = run.args
    net, index = _load_model(run)
    if net.dense:
        raise ValueError("knn-eval needs an image-level classifier")
    data = _eval_data(run, net)
    if index is None:
        train_data = load_data(a.dataset, "train", mean=net.channel_mean, count=a.index_limit)
        index = make_index(net, train_data)
        run.extra["index"] = {"fingerprint": train_data.fingerprint, "size": len(index),
                              "feature_layer": index.feature_layer}
    if a.k > len(index):
        raise ValueError(f"k={a.k} exceeds index size {len(index)}")
    grid = eps_grid(a.eps_grid) if a.eps_grid else [a.eps]
    res = knn_sweep(net, index, data, a.k, grid)
    n = len(data)
    run.csv("knn.csv", ["epsilon", "k", "baseline_accuracy", "gp_accuracy", "corrected", "corrupted"],
            [(e, a.k, res.baseline, acc, cor, corr) for e, acc, cor, corr in res.rows])
    best = max(res.rows, key=lambda r: (r[1], -abs(r[0])))
    ids = data.ids
    run.csv("corrected_ids.csv", ["epsilon", "id", "label"],
            [(best[0], ids[i], int(data.labels[i])) for i in res.corrected_ids[best[0]]])
    print(f"baseline {res.baseline:.4%}; best eps {best[0]:+.3f} -> {best[1]:.4%} "
          f"(corrected {best[2]}, corrupted {best[3]}, n={n})")


def cmd_rerun(run_args, argv_main):
    with open(run_args.manifest) as fh:
        manifest = json.load(fh)
    argv = list(manifest["argv"])
    if run_args.out_dir:
        i = argv.index("--out-dir")
        argv[i + 1] = run_args.out_dir
        out = run_args.out_dir
    else:
        out = os.path.dirname(os.path.abspath(run_args.manifest))
    code = argv_main(argv)
    if code:
        return code
    bad = []
    for name, info in manifest["outputs"].items():
        if info["deterministic"] and sha256_file(os.path.join(out, name)) != info["sha256"]:
            bad.append(name)
    for name in bad:
        print(f"MISMATCH {name}", file=sys.stderr)
    print("reproduced" if not bad else f"{len(bad)} output(s) differ")
    return 1 if bad else 0


def build_parser():
    p = argparse.ArgumentParser(prog="guidedpert", description="Guided perturbation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True):
        if model:
            sp.add_argument("--model", required=True, help="GPN1 model file")
        sp.add_argument("--dataset", required=True,
                        help="'synthetic[:k=v,...]', an MNIST IDX directory, or an .npz file")
        sp.add_argument("--out-dir", required=True)
        sp.add_argument("--seed", type=int, default=1)
        sp.add_argument("--limit", type=int, default=None, help="use only the first N samples")
        return sp

    sp = common(sub.add_parser("train", help="train a baseline model"), model=False)
    sp.add_argument("--arch", required=True, choices=sorted(ARCHS + tuple(ALIASES)))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="baseline vs guided perturbation"))
    sp.add_argument("--eps", type=float, default=0.0)
    sp.add_argument("--variant", default="gp_onehot", choices=VARIANTS)
    sp.add_argument("--iterations", type=int, default=1)
    sp.add_argument("--truncate-at", default=INPUT)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("sweep-epsilon", help="score over an epsilon grid"))
    sp.add_argument("--eps-grid", default=DEFAULT_GRID, help="lo:hi:step or comma list")
    sp.add_argument("--variant", default="gp_onehot", choices=VARIANTS)
    sp.add_argument("--truncate-at", default=INPUT)
    sp.set_defaults(func=cmd_sweep)

    sp = common(sub.add_parser("ablate-variants", help="best-over-grid score per pseudo-label variant"))
    sp.add_argument("--eps-grid", default=DEFAULT_GRID)
    sp.add_argument("--variant", default=",".join(VARIANTS), help="comma-separated variants")
    sp.add_argument("--truncate-at", default=INPUT)
    sp.set_defaults(func=cmd_ablate)

    sp = common(sub.add_parser("truncate-bench", help="score and wall time per truncation point"))
    sp.add_argument("--truncate-at", required=True, help="comma-separated layer names")
    sp.add_argument("--eps", type=float, default=0.05)
    sp.add_argument("--eps-grid", default=None, help="pick the best epsilon per layer from this grid")
    sp.add_argument("--repeats", type=int, default=3)
    sp.set_defaults(func=cmd_truncate)

    sp = common(sub.add_parser("knn-eval", help="nearest-neighbour guided perturbation for classifiers"))
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--eps", type=float, default=0.0)
    sp.add_argument("--eps-grid", default=None)
    sp.add_argument("--index-limit", type=int, default=None, help="build the index from the first N training samples")
    sp.set_defaults(func=cmd_knn)

    sp = sub.add_parser("rerun", help="re-execute a manifest and verify its outputs")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out-dir", default=None)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "rerun":
        return cmd_rerun(args, main)
    try:
        run = Run(args, argv)
        args.func(run)
        run.finish()
    except (DatasetError, FileNotFoundError) as e:
        print(f"guidedpert: error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"guidedpert: training diverged: {e}", file=sys.stderr)
        return 3
    except (ValueError, KeyError) as e:
        print(f"guidedpert: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
