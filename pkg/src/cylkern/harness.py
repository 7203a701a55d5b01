"""Experiment harness: datasets, training loops, invariance bench, reports.

Everything here is deterministic given (config, seed): RNG streams are
derived from the master seed with fixed stream ids, training iterates in
seeded-shuffle order, gradient accumulation order is the loop order, and
the canonical report file contains no volatile fields (wall-clock time
lives in a sidecar). Worker pools, when enabled via CYLKERN_WORKERS,
only parallelize read-only evaluation work and reduce in list order.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, ParamStore, checkpoint_hash
from .config import ExperimentConfig
from .errors import (ConfigError, DegenerateGeometryError, NumericalError,
                     ParameterError)
from .features import write_grid_record
from .formats import parse_off, parse_xyz
from .network import (ClassifierHead, Encoder, cross_entropy_logits,
                      encoder_geometry)
from .pointcloud import (PointCloud, RigidTransform, apply_rigid,
                         estimate_normals, gen_synthetic,
                         normalize_unit_sphere, random_rotation, sample_mesh)
from .registration import (METRIC_COLUMNS, RegistrationMetrics,
                           compute_metrics, icp_baseline, loss_rt_op,
                           procrustes_op, soft_correspondence_op)

WORKERS_ENV = "CYLKERN_WORKERS"

# fixed stream ids so independent draws never share an RNG path
_STREAMS = {"train_data": 1, "test_data": 2, "params": 3, "shuffle": 4,
            "bench": 5, "train_rot": 6, "test_rot": 7, "subsample": 8}


def stream_rng(master_seed: int, stream: str, index: int = 0):
    return np.random.default_rng(
        np.random.SeedSequence((int(master_seed), _STREAMS[stream], int(index))))


def stream_seed(master_seed: int, stream: str, index: int = 0) -> int:
    return int(stream_rng(master_seed, stream, index).integers(0, 2 ** 31 - 1))


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def pool_map(fn, items):
    """Order-preserving map, optionally via a fork pool (evaluation only)."""
    items = list(items)
    workers = min(n_workers(), len(items)) if items else 1
    if workers <= 1:
        return [fn(x) for x in items]
    import multiprocessing as mp

    with mp.get_context("fork").Pool(workers) as pool:
        return pool.map(fn, items)


# ---------------------------------------------------------------------------
# dataset assembly


def _finish_cloud(cloud: PointCloud, cfg: ExperimentConfig) -> PointCloud:
    cloud = normalize_unit_sphere(cloud)
    if cfg.normals == "estimated" or cloud.normals is None:
        cloud = estimate_normals(cloud, min(cfg.normals_k, len(cloud)))
    return cloud


def synthetic_cloud(cfg: ExperimentConfig, family: str, seed: int) -> PointCloud:
    return _finish_cloud(
        gen_synthetic(family, cfg.points, cfg.noise_sigma, seed), cfg)


def load_cloud_file(cfg: ExperimentConfig, path: str, seed: int) -> PointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    if path.lower().endswith(".off"):
        cloud = sample_mesh(parse_off(data), cfg.points, seed)
    else:
        cloud = parse_xyz(data)
        if len(cloud) > cfg.points:
            rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
            keep = np.sort(rng.choice(len(cloud), cfg.points, replace=False))
            cloud = PointCloud(cloud.points[keep],
                               None if cloud.normals is None else cloud.normals[keep],
                               None if cloud.labels is None else cloud.labels[keep])
    return _finish_cloud(cloud, cfg)


def split_clouds(cfg: ExperimentConfig, split: str) -> list[tuple[PointCloud, str]]:
    """Clouds of one split: (cloud, source name). Families are disjoint
    between splits for synthetic data; file datasets alternate by index."""
    stream = "train_data" if split == "train" else "test_data"
    size = cfg.train_size if split == "train" else cfg.test_size
    out = []
    if cfg.files:
        chosen = [p for i, p in enumerate(cfg.files)
                  if (i % 2 == 0) == (split == "train")]
        if not chosen:
            raise ConfigError(f"no files left for the {split} split")
        for i in range(size):
            path = chosen[i % len(chosen)]
            out.append((load_cloud_file(cfg, path, stream_seed(cfg.seed, stream, i)),
                        os.path.basename(path)))
        return out
    families = cfg.train_families if split == "train" else cfg.test_families
    if not families:
        raise ConfigError(f"no shape families for the {split} split")
    for i in range(size):
        fam = families[i % len(families)]
        out.append((synthetic_cloud(cfg, fam, stream_seed(cfg.seed, stream, i)), fam))
    return out


@dataclass
class RegistrationPair:
    source: PointCloud
    target: PointCloud
    transform: RigidTransform
    name: str


def make_pairs(cfg: ExperimentConfig, split: str) -> list[RegistrationPair]:
    """Source clouds plus their rigidly moved copies and ground truths."""
    if not cfg.files and set(cfg.train_families) & set(cfg.test_families):
        raise ConfigError("train and test shape families must be disjoint")
    rot_stream = "train_rot" if split == "train" else "test_rot"
    pairs = []
    for i, (cloud, name) in enumerate(split_clouds(cfg, split)):
        T = random_rotation(cfg.max_rotation,
                            stream_seed(cfg.seed, rot_stream, i),
                            with_translation=cfg.with_translation)
        pairs.append(RegistrationPair(cloud, apply_rigid(cloud, T), T, name))
    return pairs


# ---------------------------------------------------------------------------
# run reports


@dataclass
class RunReport:
    """Everything a run produced; canonical bytes exclude wall-clock."""

    task: str
    config: dict
    epoch_losses: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    bench: list | None = None
    checkpoint_hash: str | None = None
    extra: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def canonical(self) -> dict:
        return {"task": self.task, "config": self.config,
                "epoch_losses": self.epoch_losses, "metrics": self.metrics,
                "bench": self.bench, "checkpoint_hash": self.checkpoint_hash,
                "extra": self.extra}


def emit_report(report: RunReport, out_dir: str) -> dict:
    """Write report.json (canonical), timing.json, CSV tables and a text
    summary. Returns a map of artifact name -> path."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    def _write(name, text):
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write(text)
        paths[name] = path

    _write("report.json", json.dumps(report.canonical(), indent=2,
                                     sort_keys=True) + "\n")
    _write("timing.json", json.dumps({"wall_clock_sec": report.wall_clock},
                                     indent=2) + "\n")
    lines = [f"task: {report.task}", ""]
    if report.metrics.get("registration"):
        rows = [("this run", report.metrics["registration"])]
        if "icp" in report.extra:
            rows.append(("ICP", report.extra["icp"]))
        csv = ",".join(("method",) + METRIC_COLUMNS) + "\n"
        lines.append("  ".join(("method".ljust(10),) + METRIC_COLUMNS))
        for name, m in rows:
            vals = [m[c] for c in METRIC_COLUMNS]
            csv += ",".join([name] + [f"{v:.9g}" for v in vals]) + "\n"
            lines.append("  ".join([name.ljust(10)] + [f"{v:10.6f}" for v in vals]))
        _write("metrics.csv", csv)
    if report.metrics.get("accuracy") is not None:
        acc = report.metrics["accuracy"]
        _write("accuracy.csv", "split,accuracy\n" + "".join(
            f"{k},{v:.6f}\n" for k, v in acc.items()))
        lines += [f"accuracy[{k}] = {v:.4f}" for k, v in acc.items()]
    if report.bench:
        csv = "perturbation,max_dev,rms_dev\n"
        for row in report.bench:
            csv += f"{row['perturbation']},{row['max_dev']:.6g},{row['rms_dev']:.6g}\n"
            lines.append(f"bench {row['perturbation']:>14}: "
                         f"max {row['max_dev']:.3g} rms {row['rms_dev']:.3g}")
        _write("bench.csv", csv)
    if report.epoch_losses:
        _write("losses.csv", "epoch,loss\n" + "".join(
            f"{i},{v:.9g}\n" for i, v in enumerate(report.epoch_losses)))
    if report.checkpoint_hash:
        lines.append(f"checkpoint: {report.checkpoint_hash}")
    _write("summary.txt", "\n".join(lines) + "\n")
    return paths


def read_report(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# registration training and evaluation


def _pair_geometry(cfg: ExperimentConfig, pair: RegistrationPair):
    enc_cfg = cfg.encoder_config()
    return (encoder_geometry(pair.source, enc_cfg),
            encoder_geometry(pair.target, enc_cfg))


def _pair_loss(enc: Encoder, cfg: ExperimentConfig, pair, gsrc, gtgt):
    d_src = enc.forward(gsrc)
    d_tgt = enc.forward(gtgt)
    _, virtual = soft_correspondence_op(d_src, d_tgt, pair.target.points,
                                        cfg.temperature)
    rt = procrustes_op(ad.constant(pair.source.points), virtual)
    return loss_rt_op(rt, pair.transform.R, pair.transform.t)


def predict_transform(enc: Encoder, cfg: ExperimentConfig, pair,
                      gsrc=None, gtgt=None) -> RigidTransform:
    from .registration import procrustes, soft_correspondence

    if gsrc is None or gtgt is None:
        gsrc, gtgt = _pair_geometry(cfg, pair)
    with ad.no_grad():
        d_src = enc.forward(gsrc).data
        d_tgt = enc.forward(gtgt).data
    corr = soft_correspondence(d_src, d_tgt, pair.target.points, cfg.temperature)
    return procrustes(pair.source.points, corr.virtual)


def _nan_abort(out_dir: str, context: dict):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "nan_diagnostic.json")
    with open(path, "w") as fh:
        json.dump(context, fh, indent=2, sort_keys=True)
    raise NumericalError(f"non-finite loss; diagnostics in {path}")


def train_registration(cfg: ExperimentConfig, out_dir: str,
                       log=lambda s: None) -> RunReport:
    """End-to-end training of encoder + registration head; evaluates the
    held-out split and the ICP baseline, saves a checkpoint, emits files."""
    t0 = time.time()
    os.makedirs(out_dir, exist_ok=True)
    store = ParamStore(seed=stream_seed(cfg.seed, "params"))
    enc = Encoder(cfg.encoder_config(), store)
    train_pairs = make_pairs(cfg, "train")
    test_pairs = make_pairs(cfg, "test")
    log(f"caching geometry for {len(train_pairs)} train pairs")
    train_geoms = [_pair_geometry(cfg, p) for p in train_pairs]
    opt = SGD(store, lr=cfg.lr, momentum=cfg.momentum, clip=cfg.clip)
    shuffle = stream_rng(cfg.seed, "shuffle")
    losses = []
    degenerate_skips = 0
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(train_pairs))
        total = 0.0
        used = 0
        pending = 0
        opt.zero_grad()
        for j, idx in enumerate(order):
            pair = train_pairs[idx]
            try:
                loss = _pair_loss(enc, cfg, pair, *train_geoms[idx])
            except DegenerateGeometryError:
                # collapsed correspondences (typical only at bad inits);
                # the pair is skipped, not fatal
                degenerate_skips += 1
                continue
            except np.linalg.LinAlgError:
                # non-finite values reached the SVD: same abort as NaN loss
                _nan_abort(out_dir, {"epoch": epoch, "pair": int(idx),
                                     "name": pair.name, "loss": "non-finite",
                                     "config": cfg.echo()})
            value = loss.item()
            if not math.isfinite(value):
                _nan_abort(out_dir, {"epoch": epoch, "pair": int(idx),
                                     "name": pair.name, "loss": repr(value),
                                     "config": cfg.echo()})
            loss.backward()
            total += value
            used += 1
            pending += 1
            if pending == cfg.batch or j == len(order) - 1:
                opt.step()
                opt.zero_grad()
                pending = 0
        if used == 0:
            _nan_abort(out_dir, {"epoch": epoch, "config": cfg.echo(),
                                 "error": "every pair degenerate"})
        losses.append(total / used)
        log(f"epoch {epoch}: loss {losses[-1]:.6f}")
    metrics, icp_metrics, corr_acc = evaluate_registration(enc, cfg, test_pairs)
    ckpt = os.path.join(out_dir, "checkpoint.txt")
    store.save(ckpt)
    report = RunReport(
        task="register", config=cfg.echo(), epoch_losses=losses,
        metrics={"registration": metrics.as_dict()},
        checkpoint_hash=checkpoint_hash(ckpt),
        extra={"icp": icp_metrics.as_dict(),
               "correspondence_accuracy": corr_acc,
               "degenerate_pair_skips": degenerate_skips,
               "n_train_pairs": len(train_pairs),
               "n_test_pairs": len(test_pairs)},
        wall_clock=time.time() - t0)
    emit_report(report, out_dir)
    return report


def evaluate_registration(enc: Encoder, cfg: ExperimentConfig, pairs):
    """(model metrics, ICP metrics, mean argmax-correspondence accuracy)."""
    from .registration import soft_correspondence

    preds = []
    gts = []
    accs = []
    for pair in pairs:
        gsrc, gtgt = _pair_geometry(cfg, pair)
        with ad.no_grad():
            d_src = enc.forward(gsrc).data
            d_tgt = enc.forward(gtgt).data
        corr = soft_correspondence(d_src, d_tgt, pair.target.points,
                                   cfg.temperature)
        from .registration import procrustes

        preds.append(procrustes(pair.source.points, corr.virtual))
        gts.append(pair.transform)
        accs.append(float(np.mean(np.argmax(corr.weights, axis=1)
                                  == np.arange(len(pair.source)))))
    metrics = compute_metrics(preds, gts)
    icp_preds = [icp_baseline(p.source.points, p.target.points) for p in pairs]
    icp_metrics = compute_metrics(icp_preds, gts)
    return metrics, icp_metrics, float(np.mean(accs))


def eval_registration_run(cfg: ExperimentConfig, out_dir: str,
                          checkpoint: str | None = None) -> RunReport:
    """Evaluation-only run (random weights unless a checkpoint is given)."""
    t0 = time.time()
    store = ParamStore(seed=stream_seed(cfg.seed, "params"))
    enc = Encoder(cfg.encoder_config(), store)
    if checkpoint:
        store.load(checkpoint)
    pairs = make_pairs(cfg, "test")
    metrics, icp_metrics, corr_acc = evaluate_registration(enc, cfg, pairs)
    report = RunReport(
        task="register", config=cfg.echo(),
        metrics={"registration": metrics.as_dict()},
        extra={"icp": icp_metrics.as_dict(),
               "correspondence_accuracy": corr_acc,
               "checkpoint": checkpoint or ""},
        wall_clock=time.time() - t0)
    emit_report(report, out_dir)
    return report


# ---------------------------------------------------------------------------
# classification


def _class_clouds(cfg: ExperimentConfig, split: str):
    """Aligned labeled clouds; classes are the train families for both splits."""
    classes = cfg.train_families
    if len(classes) < 2:
        raise ConfigError("classification needs at least two families")
    if cfg.files:
        raise ConfigError("classification datasets are synthetic families")
    size = cfg.train_size if split == "train" else cfg.test_size
    stream = "train_data" if split == "train" else "test_data"
    out = []
    for i in range(size * len(classes)):
        label = i % len(classes)
        cloud = synthetic_cloud(cfg, classes[label],
                                stream_seed(cfg.seed, stream, 1000 + i))
        out.append((cloud, label))
    return out


def train_classification(cfg: ExperimentConfig, out_dir: str,
                         log=lambda s: None) -> RunReport:
    t0 = time.time()
    os.makedirs(out_dir, exist_ok=True)
    classes = cfg.train_families
    store = ParamStore(seed=stream_seed(cfg.seed, "params"))
    enc_cfg = cfg.encoder_config()
    enc = Encoder(enc_cfg, store)
    head = ClassifierHead(store, len(classes), enc_cfg.descriptor_dim)
    train = _class_clouds(cfg, "train")
    test = _class_clouds(cfg, "test")
    log(f"caching geometry for {len(train)} train clouds")
    train_geoms = [encoder_geometry(c, enc_cfg) for c, _ in train]
    opt = SGD(store, lr=cfg.lr, momentum=cfg.momentum, clip=cfg.clip)
    shuffle = stream_rng(cfg.seed, "shuffle")
    losses = []
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(train))
        total = 0.0
        pending = 0
        opt.zero_grad()
        for j, idx in enumerate(order):
            _, label = train[idx]
            logits = head.forward(enc.forward(train_geoms[idx]))
            loss = cross_entropy_logits(logits, label)
            value = loss.item()
            if not math.isfinite(value):
                _nan_abort(out_dir, {"epoch": epoch, "cloud": int(idx),
                                     "loss": repr(value), "config": cfg.echo()})
            loss.backward()
            total += value
            pending += 1
            if pending == cfg.batch or j == len(order) - 1:
                opt.step()
                opt.zero_grad()
                pending = 0
        losses.append(total / max(1, len(order)))
        log(f"epoch {epoch}: loss {losses[-1]:.6f}")

    def accuracy(clouds_labels):
        hits = 0
        for cloud, label in clouds_labels:
            geom = encoder_geometry(cloud, enc_cfg)
            with ad.no_grad():
                logits = head.forward(enc.forward(geom)).data
            hits += int(np.argmax(logits) == label)
        return hits / len(clouds_labels)

    acc_aligned = accuracy(test)
    rot_rng = stream_rng(cfg.seed, "test_rot")
    rotated = [(apply_rigid(c, random_rotation(180.0, int(rot_rng.integers(2 ** 31)))), l)
               for c, l in test]
    acc_rotated = accuracy(rotated)
    ckpt = os.path.join(out_dir, "checkpoint.txt")
    store.save(ckpt)
    report = RunReport(
        task="classify", config=cfg.echo(), epoch_losses=losses,
        metrics={"accuracy": {"aligned": acc_aligned, "rotated": acc_rotated}},
        checkpoint_hash=checkpoint_hash(ckpt),
        extra={"classes": list(classes)},
        wall_clock=time.time() - t0)
    emit_report(report, out_dir)
    return report


def eval_classification_run(cfg: ExperimentConfig, out_dir: str,
                            checkpoint: str) -> RunReport:
    t0 = time.time()
    classes = cfg.train_families
    store = ParamStore(seed=stream_seed(cfg.seed, "params"))
    enc_cfg = cfg.encoder_config()
    enc = Encoder(enc_cfg, store)
    head = ClassifierHead(store, len(classes), enc_cfg.descriptor_dim)
    store.load(checkpoint)
    test = _class_clouds(cfg, "test")
    hits = 0
    for cloud, label in test:
        geom = encoder_geometry(cloud, enc_cfg)
        with ad.no_grad():
            logits = head.forward(enc.forward(geom)).data
        hits += int(np.argmax(logits) == label)
    report = RunReport(task="classify", config=cfg.echo(),
                       metrics={"accuracy": {"aligned": hits / len(test)}},
                       extra={"checkpoint": checkpoint},
                       wall_clock=time.time() - t0)
    emit_report(report, out_dir)
    return report


# ---------------------------------------------------------------------------
# invariance bench


def _deviation(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    d = np.abs(a - b)
    return float(d.max()), float(np.sqrt(np.mean(d * d)))


def bench_invariance(cfg: ExperimentConfig, out_dir: str | None = None,
                     checkpoint: str | None = None) -> list[dict]:
    """Measure descriptor deviation under the standard perturbation set."""
    enc_cfg = cfg.encoder_config()
    store = ParamStore(seed=stream_seed(cfg.seed, "params"))
    enc = Encoder(enc_cfg, store)
    if checkpoint:
        store.load(checkpoint)
    family = (cfg.test_families or cfg.train_families)[0]
    cloud = synthetic_cloud(cfg, family, stream_seed(cfg.seed, "bench"))
    base = enc.descriptors(encoder_geometry(cloud, enc_cfg))
    rows = []

    def add(name, desc, reference=base):
        mx, rms = _deviation(reference, desc)
        rows.append({"perturbation": name, "max_dev": mx, "rms_dev": rms})

    T = random_rotation(180.0, stream_seed(cfg.seed, "bench", 1))
    add("rotation", enc.descriptors(
        encoder_geometry(apply_rigid(cloud, T), enc_cfg)))

    flipped = PointCloud(cloud.points, -cloud.normals, cloud.labels)
    add("sign_flip", enc.descriptors(encoder_geometry(flipped, enc_cfg)))

    perm = stream_rng(cfg.seed, "bench", 2).permutation(len(cloud))
    shuffled = PointCloud(cloud.points[perm], cloud.normals[perm],
                          None if cloud.labels is None else cloud.labels[perm])
    add("permutation", enc.descriptors(encoder_geometry(shuffled, enc_cfg)),
        reference=base[perm])

    # density x2: insert midpoints toward each point's nearest neighbor
    from .spatial import build_index

    index = build_index(cloud.points)
    ids, _ = index.knn_batch(cloud.points, 2)
    mids = 0.5 * (cloud.points + cloud.points[ids[:, 1]])
    dense = PointCloud(np.vstack([cloud.points, mids]),
                       np.vstack([cloud.normals, cloud.normals]))
    add("density_x2", enc.descriptors(
        encoder_geometry(dense, enc_cfg))[:len(cloud)])

    keep = np.arange(0, len(cloud), 2)
    sparse_cloud = PointCloud(cloud.points[keep], cloud.normals[keep])
    add("density_half", enc.descriptors(
        encoder_geometry(sparse_cloud, enc_cfg)), reference=base[keep])

    lam = 2.0
    scaled_cfg = replace(enc_cfg, sigma=enc_cfg.sigma * lam,
                         global_bandwidth=enc_cfg.global_bandwidth * lam,
                         scales=tuple(s * lam for s in enc_cfg.scales))
    scaled = PointCloud(cloud.points * lam, cloud.normals, cloud.labels)
    add("scale_x2_matched", enc.descriptors(
        encoder_geometry(scaled, scaled_cfg)))

    noise_rng = stream_rng(cfg.seed, "bench", 3)
    for sigma_n in (0.0, 0.005, 0.01, 0.02):
        noisy = PointCloud(
            cloud.points + sigma_n * noise_rng.standard_normal((len(cloud), 3)),
            cloud.normals, cloud.labels)
        add(f"noise_{sigma_n:g}", enc.descriptors(
            encoder_geometry(noisy, enc_cfg)))

    if out_dir is not None:
        report = RunReport(task="bench", config=cfg.echo(), bench=rows)
        emit_report(report, out_dir)
    return rows


# ---------------------------------------------------------------------------
# feature extraction to disk


def extract_run(cfg: ExperimentConfig, out_dir: str) -> RunReport:
    """Write the per-cloud feature grids of the test split as binary records."""
    t0 = time.time()
    os.makedirs(out_dir, exist_ok=True)
    enc_cfg = cfg.encoder_config()
    names = []
    for i, (cloud, name) in enumerate(split_clouds(cfg, "test")):
        geom = encoder_geometry(cloud, enc_cfg)
        path = os.path.join(out_dir, f"grid_{i:03d}.bin")
        with open(path, "wb") as fh:
            write_grid_record(fh, geom.grid.grid)
        names.append({"record": os.path.basename(path), "source": name,
                      "points": len(cloud)})
    report = RunReport(task="extract", config=cfg.echo(),
                       extra={"records": names}, wall_clock=time.time() - t0)
    emit_report(report, out_dir)
    return report
