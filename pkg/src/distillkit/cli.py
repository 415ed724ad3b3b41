"""Command-line experiment driver.

    distillkit <distill|eval|baseline|knn-demo|curve> --config PATH [--seed N] [--out DIR]

Exit codes: 0 success, 1 configuration or input error, 2 divergence.
Worker count for evaluation comes from DISTILLKIT_WORKERS.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines as B
from . import knn as K
from .config import ConfigError, ExperimentConfig, derive_seed, load_config
from .data import (DataFormatError, EmbeddingTable, LabeledData, TextCorpus, UnknownTokenError, export_image_grid,
                   images_to_nchw, load_csv_dataset, load_dd, load_embeddings, load_idx, load_iris,
                   load_text_corpus, make_blobs, make_text_task, pad_embed, save_dd)
from .distill import DivergenceError, sldd, soft_to_hard, tdd
from .metrics import SizeCurve, distillation_size, evaluate, evaluate_trials, original_accuracy
from .models import InitSource, ModelSpec

log = logging.getLogger("distillkit")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


@dataclass
class Task:
    train: LabeledData
    test: LabeledData
    corpus: TextCorpus | None = None
    table: EmbeddingTable | None = None


@dataclass
class Run:
    cfg: ExperimentConfig
    master: int
    out: Path

    def seed(self, component: str) -> int:
        return derive_seed(self.master, component)


# ------------------------------------------------------------------ data


def _need(cfg, *names):
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise ConfigError(f"dataset kind {cfg.kind!r} requires {missing}")


def _split(data: LabeledData, seed: int, test_fraction: float = 0.5) -> tuple[LabeledData, LabeledData]:
    perm = np.random.default_rng(seed).permutation(len(data))
    cut = int(round(len(data) * (1 - test_fraction)))
    return data.subset(perm[:cut]), data.subset(perm[cut:])


def load_task(run: Run) -> Task:
    d = run.cfg.dataset
    seed = run.seed("data")
    if d.kind == "blobs":
        c = d.num_classes or 3
        train = make_blobs(d.n_per_class, c, d.separation, dim=d.dim, seed=seed)
        test = make_blobs(d.test_n_per_class, c, d.separation, dim=d.dim, seed=seed + 1)
        return Task(train, test)
    if d.kind == "iris":
        feats = d.features or ["petal_length", "petal_width"]
        return Task(*_split(load_iris(feats), seed))
    if d.kind == "csv":
        _need(d, "path")
        data, classes = load_csv_dataset(d.path, d.label_column, d.features)
        if d.test_path is None:
            return Task(*_split(data, seed))
        test, test_classes = load_csv_dataset(d.test_path, d.label_column, d.features)
        if test_classes != classes:
            raise ConfigError("train and test files have different class sets")
        return Task(data, test)
    if d.kind == "idx":
        _need(d, "train_images", "train_labels", "test_images", "test_labels")
        train = load_idx(d.train_images, d.train_labels)
        test = load_idx(d.test_images, d.test_labels, train.num_classes)
        return Task(LabeledData(images_to_nchw(train.x), train.y, train.num_classes),
                    LabeledData(images_to_nchw(test.x), test.y, train.num_classes))
    if d.kind == "text":
        _need(d, "corpus", "test_corpus", "embeddings")
        corpus = load_text_corpus(d.corpus)
        test = load_text_corpus(d.test_corpus, corpus.num_classes)
        table = load_embeddings(d.embeddings)
    else:  # synthetic-text
        if d.min_len > d.max_len:
            raise ConfigError("min_len exceeds max_len")
        full, table, _ = make_text_task(d.sentences + d.test_sentences, d.vocab_per_class, d.embedding_dim,
                                        d.min_len, d.max_len, d.num_classes or 2, seed)
        corpus = full.subset(np.arange(d.sentences))
        test = full.subset(np.arange(d.sentences, len(full)))
    s = d.sentence_length
    unk = run.cfg.distill.unknown_token
    train = LabeledData(pad_embed(corpus, table, s, unk), corpus.labels, corpus.num_classes)
    test_data = LabeledData(pad_embed(test, table, s, unk), test.labels, corpus.num_classes)
    return Task(train, test_data, corpus, table)


def model_spec(run: Run, task: Task) -> ModelSpec:
    m = run.cfg.model
    shape = task.train.x.shape[1:]
    if m.kind == "text-cnn" and task.table is None:
        raise ConfigError("text-cnn needs a text dataset")
    if m.kind != "text-cnn" and task.table is not None:
        raise ConfigError(f"model {m.kind!r} cannot consume a text dataset; use text-cnn")
    if m.kind == "mlp" and len(shape) > 1:
        raise ConfigError("mlp expects flat feature vectors")
    try:
        return m.to_spec(tuple(int(v) for v in shape), task.train.num_classes)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def init_source(run: Run, regime: str | None = None, component: str = "init") -> InitSource:
    """Fixed regime shares one snapshot between distillation and evaluation;
    random regime evaluates on networks independent of those seen in training."""
    regime = regime or run.cfg.distill.init_regime
    if regime == "fixed":
        return InitSource("fixed", run.seed("init"))
    return InitSource("random", run.seed(component))


def reference_accuracy(run: Run, spec: ModelSpec, task: Task) -> float:
    e = run.cfg.eval
    if e.original_accuracy is not None:
        return e.original_accuracy
    return original_accuracy(spec, InitSource("random", run.seed("original")), task.train, task.test,
                             e.original_steps, e.original_lr)


# ------------------------------------------------------------------ writers


def _write_trace(path: Path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "outer_loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def _write_sentences(path: Path, sentences, labels) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample", "class", "tokens"])
        for i, (s, y) in enumerate(zip(sentences, labels)):
            w.writerow([i, soft_to_hard(y), " ".join(s)])


# ------------------------------------------------------------------ commands


def _distill(run: Run, task: Task, spec: ModelSpec, m: int | None = None):
    overrides = {} if m is None else {"m": m, "steps": min(run.cfg.distill.steps, m)}
    try:
        config = run.cfg.distill.to_config(run.seed("distill"), **overrides)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    config_echo = {"experiment": run.cfg.model_dump(), "master_seed": run.master, "model": spec.to_dict()}
    init = init_source(run, component="init")
    if task.corpus is not None:
        dd, sentences, trace = tdd(config, spec, task.corpus, task.table, init)
    else:
        dd, trace = sldd(config, spec, task.train, init)
        sentences = None
    dd.config = {**dd.config, **config_echo}
    return dd, trace, sentences


def cmd_distill(run: Run) -> int:
    task = load_task(run)
    spec = model_spec(run, task)
    dd, trace, sentences = _distill(run, task, spec)
    save_dd(run.out / "distilled.dd", dd)
    _write_trace(run.out / "loss_trace.csv", trace)
    if sentences is not None:
        _write_sentences(run.out / "sentences.csv", sentences, dd.y)
    else:
        export_image_grid(dd, run.out / "images")
    log.info("distilled %d samples in %d iterations, final outer loss %.4f", dd.m, len(trace), trace[-1])
    return EXIT_OK


def cmd_eval(run: Run, dd_path: Path | None) -> int:
    task = load_task(run)
    spec = model_spec(run, task)
    dd_path = dd_path or run.out / "distilled.dd"
    try:
        dd = load_dd(dd_path)
    except FileNotFoundError:
        raise ConfigError(f"distilled dataset not found: {dd_path}") from None
    if dd.x.shape[1:] != spec.input_shape or dd.y.shape[1] != spec.label_dim:
        raise ConfigError(f"distilled dataset shapes {dd.x.shape}/{dd.y.shape} do not fit the configured model")
    orig = reference_accuracy(run, spec, task)
    report = evaluate(dd, spec, init_source(run, component="eval-init"), task.test, run.cfg.eval.trials, orig)
    report.write_json(run.out / "eval_report.json")
    report.write_csv(run.out / "eval_report.csv")
    log.info("accuracy %.4f +- %.4f over %d networks", report.mean, report.std, report.networks)
    return EXIT_OK


BASELINE_COLUMNS = {
    "random-real": "rand_real",
    "optimized-real": "optim_real",
    "kmeans": "kmeans",
    "average-real": "avg_real",
    "knn-random-real": "knn_rand_real",
    "knn-kmeans": "knn_kmeans",
}


def cmd_baseline(run: Run) -> int:
    task = load_task(run)
    spec = model_spec(run, task)
    b, dcfg = run.cfg.baselines, run.cfg.distill
    steps, epochs = dcfg.steps, dcfg.epochs
    rows: dict[str, tuple[float, float]] = {}
    reduced_dir = run.out / "reduced"
    reduced_dir.mkdir(exist_ok=True)

    def trained(rs: B.ReducedSet):
        init = init_source(run, component="baseline-init")
        dd, _ = B.train_reduced(rs, spec, init, task.train, min(steps, len(rs)), epochs, b.lr_grid)
        return dd

    def net_eval(name: str, rs: B.ReducedSet):
        dd = trained(rs)
        save_dd(reduced_dir / f"{name}.dd", dd)
        accs = evaluate_trials(dd, spec, init_source(run, component="eval-init"), task.test, run.cfg.eval.trials)
        rows[name] = (float(accs.mean()), float(accs.std()))

    need_kmeans = {"kmeans", "knn-kmeans"} & set(b.methods)
    km = B.kmeans_centroids(task.train, b.per_class, run.seed("kmeans"), b.kmeans_iterations) if need_kmeans else None
    rand = B.random_real(task.train, b.per_class, run.seed("random-real"))
    for name in b.methods:
        if name == "random-real":
            net_eval(name, rand)
        elif name == "optimized-real":
            def score(rs):
                init = init_source(run, component="baseline-init")
                return B.train_reduced(rs, spec, init, task.train, min(steps, len(rs)), epochs, b.lr_grid)[1]
            best = B.optimized_real(task.train, b.per_class, b.draws, score, run.seed("optimized-real"),
                                    b.keep_fraction)[0]
            net_eval(name, best)
        elif name == "kmeans":
            net_eval(name, km)
        elif name == "average-real":
            net_eval(name, B.average_real(task.train))
        elif name == "knn-random-real":
            rows[name] = (B.knn_baseline(rand, b.knn_k, task.test), 0.0)
        elif name == "knn-kmeans":
            rows[name] = (B.knn_baseline(km, b.knn_k, task.test), 0.0)
    with open(run.out / "baselines.csv", "w", newline="") as f:
        w = csv.writer(f)
        order = [m for m in B_ORDER if m in rows]
        w.writerow(["statistic"] + [BASELINE_COLUMNS[m] for m in order])
        w.writerow(["mean"] + [repr(rows[m][0]) for m in order])
        w.writerow(["std"] + [repr(rows[m][1]) for m in order])
    log.info("baselines: %s", {m: round(v[0], 4) for m, v in rows.items()})
    return EXIT_OK


B_ORDER = tuple(BASELINE_COLUMNS)


def cmd_knn_demo(run: Run) -> int:
    task = load_task(run)
    data = task.train
    if data.x.ndim != 2 or data.x.shape[1] != 2:
        raise ConfigError(f"knn-demo needs 2-D feature data, got shape {data.x.shape[1:]}")
    kc = run.cfg.knn
    bounds = K.data_bounds(data)
    summary = {}
    seed = run.seed("knn")
    sel, _ = K.best_points(data, kc.m, kc.budget, 1, seed)
    results = {"selection": (sel, 1, "uniform")}
    gen, _ = K.optimize_prototypes(data, kc.m, "generation", kc.budget, 1, "uniform", seed)
    results["generation"] = (gen, 1, "uniform")
    for regime in ("soft-labels", "combined"):
        init = sel if regime == "soft-labels" else None
        k = min(kc.k, kc.m)
        p, _ = K.optimize_prototypes(data, kc.m, regime, kc.budget, k, kc.weights, seed, init=init)
        results[regime] = (p, k, kc.weights)
    for regime, (p, k, weights) in results.items():
        raster = K.rasterize(p, k, bounds, tuple(kc.resolution), weights)
        K.write_raster_pgm(run.out / f"{regime}_raster.pgm", raster, data.num_classes)
        K.write_raster_csv(run.out / f"{regime}_raster.csv", raster)
        K.write_prototypes_csv(run.out / f"{regime}_prototypes.csv", p)
        summary[regime] = {
            "k": k,
            "weights": weights,
            "train_accuracy": K.knn_accuracy(p, k, data, weights),
            "test_accuracy": K.knn_accuracy(p, k, task.test, weights),
            "raster_classes": sorted(raster.distinct()),
        }
    (run.out / "knn_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("raster classes per regime: %s", {r: s["raster_classes"] for r, s in summary.items()})
    return EXIT_OK


def cmd_curve(run: Run) -> int:
    task = load_task(run)
    spec = model_spec(run, task)
    cc = run.cfg.curve
    points = []
    for m in cc.m_values:
        dd, _, _ = _distill(run, task, spec, m)
        report = evaluate(dd, spec, init_source(run, component="eval-init"), task.test, run.cfg.eval.trials)
        points.append((m, report.mean))
        log.info("M=%d accuracy %.4f", m, report.mean)
    curve = SizeCurve(points)
    curve.write_csv(run.out / "size_curve.csv")
    orig = reference_accuracy(run, spec, task)
    with open(run.out / "distillation_sizes.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["A", "d_A", "original_accuracy"])
        for a in cc.thresholds:
            d = distillation_size(curve, orig, a)
            w.writerow([repr(float(a)), "" if d is None else d, repr(float(orig))])
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distillkit", description="Dataset distillation experiments.")
    p.add_argument("command", choices=["distill", "eval", "baseline", "knn-demo", "curve"])
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--dd", help="distilled dataset for eval (default: OUT/distilled.dd)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        run = Run(cfg, cfg.seed if args.seed is None else args.seed, Path(args.out or cfg.output_dir))
        run.out.mkdir(parents=True, exist_ok=True)
        if args.command == "distill":
            return cmd_distill(run)
        if args.command == "eval":
            return cmd_eval(run, Path(args.dd) if args.dd else None)
        if args.command == "baseline":
            return cmd_baseline(run)
        if args.command == "knn-demo":
            return cmd_knn_demo(run)
        return cmd_curve(run)
    except DivergenceError as e:
        print(f"error: distillation diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DataFormatError, UnknownTokenError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
