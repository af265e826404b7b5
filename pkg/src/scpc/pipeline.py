"""Run-directory stages: data generation, training, mining, probes and harnesses.

Every stage reads its inputs from the run directory, writes its outputs
atomically, and records the configuration hash.  Re-running a finished
stage with the same configuration is a no-op; pointing a different
configuration at an existing run directory is refused.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import Adam
from .config import RunConfig, format_value, hash_diff
from .contrastive import ContrastiveModel, loss_log_rows, train_contrastive
from .evaluation import (SegmentationTask, all_point_features, classification_metric,
                         evaluate_segmentation, fine_tune_classifier, global_features,
                         label_fraction_subset, metrics_rows, robustness_sweep,
                         segmentation_metric, train_probe, train_seg_probe)
from .geometry import PART_COUNTS, PointCloud, ShapeSpec, atomic_write_text, generate_shape, read_xyz, write_xyz
from .selfsim import (SimilarityModel, TrainState, make_patches, mining_rows, similarity_table,
                      thresholds_at, train_similarity)

log = logging.getLogger(__name__)

SPLITS = ("pretrain", "cls_train", "cls_test", "seg_train", "seg_test")
METRICS_HEADER = "run_id,task,split,metric,value"


class StageError(RuntimeError):
    """A stage cannot run: missing prerequisite, foreign run directory, bad inputs."""


@dataclass(frozen=True)
class ShapeEntry:
    file: str
    split: str
    kind: str
    label: int
    seed: int


# ---------------------------------------------------------------- run directory

class Run:
    def __init__(self, config: RunConfig):
        self.config = config
        self.dir = Path(config.out_dir)
        self.hash = config.config_hash()
        self.run_id = self.hash[:12]

    def path(self, *parts: str) -> Path:
        return self.dir.joinpath(*parts)

    @property
    def meta(self) -> dict[str, str]:
        return {"config_hash": self.hash}

    def open(self) -> "Run":
        """Claim the run directory, echo the resolved config, start the timestamp log."""
        resolved = self.path("config.resolved")
        if resolved.exists():
            first = resolved.read_text().splitlines()[0] if resolved.read_text() else ""
            if first != f"# config_hash={self.hash}":
                raise StageError(f"{self.dir} holds a run with a different configuration "
                                 f"(see {resolved}); choose another out_dir")
        else:
            atomic_write_text(resolved, "\n".join([f"# config_hash={self.hash}",
                                                   *self.config.to_lines()]) + "\n")
        handler = logging.FileHandler(self.path("run.log"))
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root = logging.getLogger("scpc")
        root.addHandler(handler)
        root.setLevel(logging.INFO)
        self._handler = handler
        return self

    def close(self) -> None:
        handler = getattr(self, "_handler", None)
        if handler is not None:
            logging.getLogger("scpc").removeHandler(handler)
            handler.close()
            self._handler = None

    def __enter__(self):
        return self.open()

    def __exit__(self, *exc):
        self.close()

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise StageError(f"missing {path}; run the '{stage}' stage first")
        return path

    def check_hash(self, path: Path, meta: dict[str, str]) -> None:
        if meta.get("config_hash") != self.hash:
            raise StageError(f"{path} was written under config hash {meta.get('config_hash')}, "
                             f"current is {self.hash}")

    def write_csv(self, name: str, lines: list[str]) -> Path:
        path = self.path(name)
        atomic_write_text(path, "\n".join(lines) + "\n")
        return path


# ---------------------------------------------------------------- datasets

def _shape_seed(config: RunConfig, split: str, index: int) -> int:
    return int(np.random.default_rng([config.seed, SPLITS.index(split), index]).integers(2**31))


def dataset_plan(config: RunConfig) -> list[ShapeEntry]:
    entries = []

    def add(split, kind, label, i):
        name = f"data/{split}/{split}_{i:04d}_{kind}.xyz"
        entries.append(ShapeEntry(name, split, kind, label, _shape_seed(config, split, i)))

    i = 0
    for kind in config.pretrain_kinds:
        for _ in range(config.pretrain_per_kind):
            add("pretrain", kind, -1, i)
            i += 1
    kinds = config.cls_kinds
    for split, n in (("cls_train", config.cls_train), ("cls_test", config.cls_test)):
        for i in range(n):
            add(split, kinds[i % len(kinds)], i % len(kinds), i)
    for split, per_kind in (("seg_train", config.seg_train_per_kind), ("seg_test", config.seg_test_per_kind)):
        i = 0
        for kind in config.seg_kinds:
            for _ in range(per_kind):
                add(split, kind, config.seg_kinds.index(kind), i)
                i += 1
    return entries


def _sigma(config: RunConfig, split: str) -> float:
    return config.seg_noise_sigma if split.startswith("seg") else config.noise_sigma


def cmd_gen(run: Run) -> list[ShapeEntry]:
    """Write every dataset cloud as XYZ plus ``data/manifest.csv``."""
    cfg = run.config
    plan = dataset_plan(cfg)
    manifest = run.path("data", "manifest.csv")
    if manifest.exists():
        log.info("gen: %s exists, skipping", manifest)
        return plan
    for e in plan:
        cloud = generate_shape(ShapeSpec(e.kind, cfg.n_points, _sigma(cfg, e.split), e.seed))
        if not e.split.startswith("seg"):
            cloud = PointCloud(cloud.points)
        write_xyz(cloud, run.path(e.file), (f"config_hash={run.hash}", f"kind={e.kind}", f"seed={e.seed}"))
    lines = ["file,split,kind,label,seed,config_hash"]
    lines += [f"{e.file},{e.split},{e.kind},{e.label},{e.seed},{run.hash}" for e in plan]
    run.write_csv("data/manifest.csv", lines)
    log.info("gen: wrote %d clouds", len(plan))
    return plan


def load_split(run: Run, split: str) -> tuple[list[ShapeEntry], list[PointCloud]]:
    manifest = run.require(run.path("data", "manifest.csv"), "gen")
    with open(manifest, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["split"] == split]
    if rows and rows[0]["config_hash"] != run.hash:
        raise StageError(f"{manifest} was generated under a different configuration")
    entries = [ShapeEntry(r["file"], r["split"], r["kind"], int(r["label"]), int(r["seed"])) for r in rows]
    clouds = [read_xyz(run.require(run.path(e.file), "gen")) for e in entries]
    return entries, clouds


def pretrain_samples(run: Run):
    _, clouds = load_split(run, "pretrain")
    cfg = run.config
    return [(c, make_patches(c, cfg.patches_m, cfg.patch_k, cfg.fps_seed)) for c in clouds]


# ---------------------------------------------------------------- training stages

def _train_stage(run: Run, name: str, store, optimizer_factory, train_fn, rows_fn, total_epochs: int,
                 stop_after: int | None):
    """Shared resume/checkpoint logic for both training stages.

    ``<name>.ckpt`` is written once training is complete; ``<name>.resume.ckpt``
    holds parameters, Adam moments and history after every epoch.
    """
    final = run.path(f"{name}.ckpt")
    if final.exists():
        tensors, meta = checkpoint.load(final)
        run.check_hash(final, meta)
        store.load_state(tensors)
        log.info("%s: %s exists, skipping", name, final)
        return True
    resume = run.path(f"{name}.resume.ckpt")
    state = None
    if resume.exists():
        opt = optimizer_factory()
        _, meta = checkpoint.load(resume)
        run.check_hash(resume, meta)
        epoch, history, _ = checkpoint.load_training(resume, store, opt)
        state = TrainState(epoch, opt, history)
        log.info("%s: resuming at epoch %d", name, epoch)
    else:
        state = TrainState(0, optimizer_factory())

    def on_epoch(st):
        checkpoint.save_training(resume, store, st, run.meta)
        run.write_csv(f"{name}_loss.csv", rows_fn(st.history))

    state = train_fn(state, stop_after, on_epoch)
    if state.epoch < total_epochs:
        log.info("%s: stopped after epoch %d of %d", name, state.epoch, total_epochs)
        return False
    run.write_csv(f"{name}_loss.csv", rows_fn(state.history))
    checkpoint.save(final, store.state(), {**run.meta, "epoch": str(state.epoch)})
    return True


def sim_loss_rows(history: list[dict]) -> list[str]:
    return ["epoch,loss,lr"] + [f"{h['epoch']},{format(h['loss'], '.17g')},{format(h['lr'], '.17g')}"
                                for h in history]


def load_similarity(run: Run) -> SimilarityModel:
    path = run.require(run.path("sim.ckpt"), "train-sim")
    tensors, meta = checkpoint.load(path)
    run.check_hash(path, meta)
    model = SimilarityModel(run.config.e1_config(), run.config.seed)
    model.store.load_state(tensors)
    return model


def cmd_train_sim(run: Run, stop_after: int | None = None) -> bool:
    cfg = run.config
    samples = pretrain_samples(run)
    model = SimilarityModel(cfg.e1_config(), cfg.seed)
    sim_cfg = cfg.similarity_config()
    return _train_stage(
        run, "sim", model.store, lambda: Adam(model.store, sim_cfg.lr.initial_lr),
        lambda st, n, cb: train_similarity(samples, model, sim_cfg, st, n, cb),
        sim_loss_rows, sim_cfg.epochs, stop_after)


def similarity_tables(run: Run, samples) -> list[np.ndarray]:
    model = load_similarity(run)
    return [similarity_table(model, c, p) for c, p in samples]


def cmd_mine(run: Run) -> list[Path]:
    """One mining CSV per pretraining cloud at the thresholds of ``mine_epoch``."""
    cfg = run.config
    entries, _ = load_split(run, "pretrain")
    samples = pretrain_samples(run)
    tables = similarity_tables(run, samples)
    if cfg.mining == "interval":
        b_l, b_u = thresholds_at(cfg.schedule(), cfg.mine_epoch)
    else:
        b_l, b_u = 0.0, 1.0
    paths = []
    for e, table in zip(entries, tables):
        name = Path(e.file).stem
        paths.append(run.write_csv(f"mining/{name}.csv", mining_rows(table, b_l, b_u, cfg.mine_all_pairs)))
    log.info("mine: epoch %d interval [%g, %g], %d files", cfg.mine_epoch, b_l, b_u, len(paths))
    return paths


def load_contrastive(run: Run) -> ContrastiveModel:
    path = run.require(run.path("con.ckpt"), "train-con")
    tensors, meta = checkpoint.load(path)
    run.check_hash(path, meta)
    model = ContrastiveModel(run.config.e2_config(), run.config.seed)
    model.store.load_state(tensors)
    return model


def cmd_train_con(run: Run, stop_after: int | None = None) -> bool:
    cfg = run.config
    samples = pretrain_samples(run)
    tables = similarity_tables(run, samples)
    model = ContrastiveModel(cfg.e2_config(), cfg.seed)
    con_cfg = cfg.contrastive_config()
    return _train_stage(
        run, "con", model.store, lambda: Adam(model.store, con_cfg.lr.initial_lr),
        lambda st, n, cb: train_contrastive(samples, tables, model, con_cfg, st, n, cb),
        loss_log_rows, con_cfg.epochs, stop_after)


# ---------------------------------------------------------------- probes

def _report(run: Run, name: str, title: str, metrics: dict[str, float]) -> None:
    text = [title, f"config_hash {run.hash}"] + [f"{k:<18} {v:.4f}" for k, v in metrics.items()]
    atomic_write_text(run.path(name), "\n".join(text) + "\n")


def classification_probe(run: Run, model: ContrastiveModel):
    """Fit the classification head; returns (head, tuned model, test clouds, test labels, report)."""
    cfg = run.config
    train_e, train_c = load_split(run, "cls_train")
    test_e, test_c = load_split(run, "cls_test")
    y_train = np.array([e.label for e in train_e])
    y_test = np.array([e.label for e in test_e])
    probe_cfg = cfg.probe_config("linear_classifier")
    if cfg.probe_fine_tune:
        model, head = fine_tune_classifier(model, train_c, y_train, probe_cfg, cfg.fine_tune_epochs,
                                           cfg.con_lr)
        acc = float(np.mean(head.predict(global_features(model, test_c)) == y_test))
        train_acc = float(np.mean(head.predict(global_features(model, train_c)) == y_train))
    else:
        head, report = train_probe(global_features(model, train_c), y_train,
                                   global_features(model, test_c), y_test, probe_cfg, run.hash)
        acc, train_acc = report.accuracy, report.train_accuracy
    return head, model, test_c, y_test, {"accuracy": acc, "train_accuracy": train_acc}


def cmd_probe(run: Run) -> dict[str, float]:
    model = load_contrastive(run)
    before = model.store.checksum()
    *_, metrics = classification_probe(run, model)
    if model.store.checksum() != before:
        raise StageError("frozen probe modified encoder parameters")
    run.write_csv("metrics_probe.csv", [METRICS_HEADER,
                                        *metrics_rows(run.run_id, "cls", "test", {"accuracy": metrics["accuracy"]}),
                                        *metrics_rows(run.run_id, "cls", "train",
                                                      {"accuracy": metrics["train_accuracy"]})])
    _report(run, "probe_report.txt", "classification probe", metrics)
    return metrics


def seg_task(config: RunConfig) -> SegmentationTask:
    return SegmentationTask(list(config.seg_kinds), {k: PART_COUNTS[k] for k in config.seg_kinds})


def segmentation_probe(run: Run, model: ContrastiveModel):
    cfg = run.config
    task = seg_task(cfg)
    train_e, train_c = load_split(run, "seg_train")
    test_e, test_c = load_split(run, "seg_test")
    head = train_seg_probe(all_point_features(model, train_c), [c.labels for c in train_c],
                           [e.kind for e in train_e], task, cfg.probe_config("pointwise_head"))
    per_shape, score = evaluate_segmentation(head, all_point_features(model, test_c),
                                             [c.labels for c in test_c], [e.kind for e in test_e], task)
    metrics = {"miou": score}
    for kind in cfg.seg_kinds:
        vals = [s for s, e in zip(per_shape, test_e) if e.kind == kind]
        if vals:
            metrics[f"miou_{kind}"] = float(np.mean(vals))
    return head, task, test_e, test_c, metrics


def cmd_seg_probe(run: Run) -> dict[str, float]:
    model = load_contrastive(run)
    *_, metrics = segmentation_probe(run, model)
    run.write_csv("metrics_seg.csv", [METRICS_HEADER, *metrics_rows(run.run_id, "seg", "test", metrics)])
    _report(run, "seg_report.txt", "segmentation probe", metrics)
    return metrics


def _levels_label(kind: str, level) -> str:
    return f"{kind}={format_value(level)}"


def cmd_sweep(run: Run) -> list[tuple[str, float]]:
    """Robustness or label-fraction sweep; the first row is the clean metric."""
    cfg = run.config
    model = load_contrastive(run)
    rows: list[tuple[str, float]] = []
    metric_name = "accuracy" if cfg.sweep_task == "cls" else "miou"
    if cfg.sweep_kind == "label_fraction":
        rows = label_fraction_sweep(run, model)
    elif cfg.sweep_task == "cls":
        head, model_used, test_c, y_test, metrics = classification_probe(run, model)
        rows.append(("clean", metrics["accuracy"]))
        fn = classification_metric(model_used, head, y_test)
        levels = cfg.noise_levels if cfg.sweep_kind == "noise" else cfg.density_levels
        for level, value in robustness_sweep(fn, test_c, cfg.sweep_kind, levels, cfg.seed):
            rows.append((_levels_label(cfg.sweep_kind, level), value))
    else:
        head, task, test_e, test_c, metrics = segmentation_probe(run, model)
        rows.append(("clean", metrics["miou"]))
        fn = segmentation_metric(model, head, [e.kind for e in test_e], task)
        levels = cfg.noise_levels if cfg.sweep_kind == "noise" else cfg.density_levels
        for level, value in robustness_sweep(fn, test_c, cfg.sweep_kind, levels, cfg.seed):
            rows.append((_levels_label(cfg.sweep_kind, level), value))
    lines = [METRICS_HEADER]
    for split, value in rows:
        lines += metrics_rows(run.run_id, cfg.sweep_task, split, {metric_name: value})
    run.write_csv("sweep.csv", lines)
    return rows


def label_fraction_sweep(run: Run, model: ContrastiveModel) -> list[tuple[str, float]]:
    """Probe trained on class-stratified fractions of the training labels."""
    cfg = run.config
    probe_cfg = cfg.probe_config("pointwise_head" if cfg.sweep_task == "seg" else "linear_classifier")
    rows = []
    if cfg.sweep_task == "cls":
        train_e, train_c = load_split(run, "cls_train")
        test_e, test_c = load_split(run, "cls_test")
        y = np.array([e.label for e in train_e])
        y_test = np.array([e.label for e in test_e])
        x, x_test = global_features(model, train_c), global_features(model, test_c)
        for frac in cfg.label_fractions:
            keep = label_fraction_subset(y, frac, cfg.seed)
            _, report = train_probe(x[keep], y[keep], x_test, y_test, probe_cfg, run.hash)
            rows.append((f"label_fraction={format_value(frac)}", report.accuracy))
        return rows
    task = seg_task(cfg)
    train_e, train_c = load_split(run, "seg_train")
    test_e, test_c = load_split(run, "seg_test")
    feats = all_point_features(model, train_c)
    test_feats = all_point_features(model, test_c)
    kinds = np.array([e.label for e in train_e])
    for frac in cfg.label_fractions:
        keep = label_fraction_subset(kinds, frac, cfg.seed)
        head = train_seg_probe([feats[i] for i in keep], [train_c[i].labels for i in keep],
                               [train_e[i].kind for i in keep], task, probe_cfg)
        _, score = evaluate_segmentation(head, test_feats, [c.labels for c in test_c],
                                         [e.kind for e in test_e], task)
        rows.append((f"label_fraction={format_value(frac)}", score))
    return rows


# ---------------------------------------------------------------- full runs

def run_stages(run: Run, stages: list[str], stop_after: int | None = None) -> dict:
    results = {}
    for stage in stages:
        t0 = time.perf_counter()
        if stage == "gen":
            cmd_gen(run)
        elif stage == "train-sim":
            if not cmd_train_sim(run, stop_after):
                return results
        elif stage == "mine":
            cmd_mine(run)
        elif stage == "train-con":
            if not cmd_train_con(run, stop_after):
                return results
        elif stage == "probe":
            results["probe"] = cmd_probe(run)
        elif stage == "seg-probe":
            results["seg-probe"] = cmd_seg_probe(run)
        elif stage == "sweep":
            results["sweep"] = cmd_sweep(run)
        else:
            raise ValueError(f"unknown stage {stage!r}")
        log.info("stage %s finished in %.1fs", stage, time.perf_counter() - t0)
    return results


PIPELINE_STAGES = ["gen", "train-sim", "mine", "train-con", "probe", "seg-probe", "sweep"]


def cmd_ablate(run: Run) -> tuple[float, float, float]:
    """Two complete runs that differ only in the mining mode; writes ``ablation.csv``."""
    cfg = run.config
    arms = []
    for mode in ("interval", "all"):
        sub = replace(cfg, mining=mode, out_dir=str(run.path(f"ablate_{mode}")))
        arms.append(sub)
    diff = hash_diff(*arms)
    if diff != ["mining"]:
        raise StageError(f"ablation arms differ in {diff}, expected only mining")
    task = cfg.ablate_task
    stage = "probe" if task == "cls" else "seg-probe"
    metric = "accuracy" if task == "cls" else "miou"
    values, ids = [], []
    for arm in arms:
        with Run(arm) as sub:
            res = run_stages(sub, ["gen", "train-sim", "train-con", stage])
            values.append(res[stage][metric])
            ids.append(sub.run_id)
    delta = values[0] - values[1]
    lines = [METRICS_HEADER,
             f"{ids[0]},{task},test:mining=interval,{metric},{format(values[0], '.17g')}",
             f"{ids[1]},{task},test:mining=all,{metric},{format(values[1], '.17g')}",
             f"{run.run_id},{task},test:interval-all,{metric}_delta,{delta:.4f}"]
    run.write_csv("ablation.csv", lines)
    return values[0], values[1], delta
