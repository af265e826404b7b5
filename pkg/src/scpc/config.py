"""Run configuration: a flat key=value map with typed, validated entries."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .autodiff import StepDecay
from .contrastive import MINING_MODES, POSITIVE_MODES, ContrastiveConfig
from .encoders import EncoderConfig
from .evaluation import LOSSES, ProbeConfig
from .geometry import PART_COUNTS, SHAPE_KINDS
from .selfsim import SimilarityConfig, ThresholdSchedule

SWEEP_KINDS = ("noise", "density", "label_fraction")
SWEEP_TASKS = ("cls", "seg")


class ConfigError(ValueError):
    """Raised for unknown keys, unparsable values and failed validation."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    # datasets
    n_points: int = 256
    noise_sigma: float = 0.02
    pretrain_kinds: tuple[str, ...] = SHAPE_KINDS
    pretrain_per_kind: int = 8
    cls_kinds: tuple[str, ...] = ("sphere", "cube", "cylinder")
    cls_train: int = 200
    cls_test: int = 100
    seg_kinds: tuple[str, ...] = ("cylinder", "cross")
    seg_train_per_kind: int = 16
    seg_test_per_kind: int = 8
    seg_noise_sigma: float = 0.0
    # patches
    patches_m: int = 16
    patch_k: int = 16
    dilation: int = 2
    fps_seed: int = 0
    # encoders
    knn_k: int = 8
    dynamic_graph: bool = True
    e1_widths: tuple[int, ...] = (32, 32)
    e1_out: int = 16
    e2_widths: tuple[int, ...] = (32, 32, 32, 32)
    e2_out: int = 64
    e2_concat: bool = True
    # similarity training
    sim_epochs: int = 16
    sim_batch: int = 8
    sim_lr: float = 0.002
    sim_decay: float = 0.8
    sim_decay_every: int = 2
    # contrastive training
    con_epochs: int = 50
    con_batch: int = 8
    con_lr: float = 0.002
    con_decay: float = 0.5
    con_decay_every: int = 5
    tau: float = 0.1
    normalize: bool = False
    mining: str = "interval"
    positive: str = "dilated"
    b_l0: float = 0.0
    b_u0: float = 1.0
    step_l: float = 0.05
    step_u: float = 0.025
    warmup_epochs: int = 30
    interval_epochs: int = 5
    min_gap: float = 0.05
    mine_epoch: int = 0
    mine_all_pairs: bool = False
    # probes
    probe_loss: str = "multinomial_logistic"
    probe_epochs: int = 300
    probe_lr: float = 0.05
    probe_fine_tune: bool = False
    fine_tune_epochs: int = 5
    seg_hidden_layers: int = 0
    # harnesses
    sweep_kind: str = "noise"
    sweep_task: str = "cls"
    noise_levels: tuple[float, ...] = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05)
    density_levels: tuple[int, ...] = (256, 224, 192, 160, 128)
    label_fractions: tuple[float, ...] = (0.01, 0.05, 0.1, 0.2, 0.5, 1.0)
    ablate_task: str = "seg"

    # ------------------------------------------------------------------
    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for name in ("pretrain_kinds", "cls_kinds"):
            for kind in getattr(self, name):
                need(kind in SHAPE_KINDS, f"{name}: unknown shape kind {kind!r} (expected one of {', '.join(SHAPE_KINDS)})")
        for kind in self.seg_kinds:
            need(kind in PART_COUNTS, f"seg_kinds: {kind!r} has no part labels (expected one of {', '.join(PART_COUNTS)})")
        need(len(self.pretrain_kinds) >= 1, "pretrain_kinds must not be empty")
        need(len(set(self.cls_kinds)) >= 2, "cls_kinds needs at least two distinct kinds")
        need(len(self.seg_kinds) >= 1, "seg_kinds must not be empty")
        for name in ("n_points", "pretrain_per_kind", "cls_train", "cls_test", "seg_train_per_kind",
                     "seg_test_per_kind", "patches_m", "patch_k", "dilation", "knn_k", "e1_out", "e2_out",
                     "sim_epochs", "sim_batch", "sim_decay_every", "con_epochs", "con_batch",
                     "con_decay_every", "probe_epochs", "interval_epochs", "fine_tune_epochs"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.cls_train >= len(self.cls_kinds), "cls_train must cover every class")
        for name in ("noise_sigma", "seg_noise_sigma", "warmup_epochs", "mine_epoch", "seg_hidden_layers"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        need(self.patches_m >= 2, "patches_m must be >= 2")
        need(self.patches_m <= self.n_points, "patches_m must not exceed n_points")
        need(self.patch_k * self.dilation <= self.n_points, "patch_k * dilation must not exceed n_points")
        need(self.knn_k < self.n_points, "knn_k must be smaller than n_points")
        need(len(self.e1_widths) >= 1 and len(self.e2_widths) >= 1, "encoder widths must not be empty")
        need(all(w >= 1 for w in self.e1_widths + self.e2_widths), "encoder widths must be >= 1")
        for name in ("sim_lr", "con_lr", "probe_lr", "tau"):
            need(getattr(self, name) > 0, f"{name} must be positive")
        for name in ("sim_decay", "con_decay"):
            need(0 < getattr(self, name) <= 1, f"{name} must be in (0, 1]")
        need(self.mining in MINING_MODES, f"mining must be one of {MINING_MODES}")
        need(self.positive in POSITIVE_MODES, f"positive must be one of {POSITIVE_MODES}")
        need(self.probe_loss in LOSSES, f"probe_loss must be one of {LOSSES}")
        need(self.sweep_kind in SWEEP_KINDS, f"sweep_kind must be one of {SWEEP_KINDS}")
        need(self.sweep_task in SWEEP_TASKS, f"sweep_task must be one of {SWEEP_TASKS}")
        need(self.ablate_task in SWEEP_TASKS, f"ablate_task must be one of {SWEEP_TASKS}")
        need(all(s >= 0 for s in self.noise_levels), "noise_levels must be >= 0")
        need(all(1 <= n <= self.n_points for n in self.density_levels),
             "density_levels must lie in [1, n_points]")
        need(all(0 < f <= 1 for f in self.label_fractions), "label_fractions must lie in (0, 1]")
        try:
            self.schedule()
            self.e1_config()
            self.e2_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    # ------------------------------------------------------------------
    def schedule(self) -> ThresholdSchedule:
        return ThresholdSchedule(self.b_l0, self.b_u0, self.step_l, self.step_u,
                                 self.warmup_epochs, self.interval_epochs, self.min_gap)

    def e1_config(self) -> EncoderConfig:
        return EncoderConfig(len(self.e1_widths), self.e1_widths, self.knn_k, self.dynamic_graph,
                             self.e1_out, False)

    def e2_config(self) -> EncoderConfig:
        return EncoderConfig(len(self.e2_widths), self.e2_widths, self.knn_k, self.dynamic_graph,
                             self.e2_out, self.e2_concat)

    def similarity_config(self) -> SimilarityConfig:
        return SimilarityConfig(self.sim_epochs, self.sim_batch,
                                StepDecay(self.sim_lr, self.sim_decay, self.sim_decay_every),
                                seed=self.seed)

    def contrastive_config(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.tau, self.con_epochs, self.con_batch,
                                 StepDecay(self.con_lr, self.con_decay, self.con_decay_every),
                                 self.schedule(), self.dilation, self.mining, self.positive,
                                 self.normalize, self.seed)

    def probe_config(self, head: str = "linear_classifier") -> ProbeConfig:
        return ProbeConfig(head, self.probe_loss, self.probe_epochs, self.probe_lr,
                           fine_tune=self.probe_fine_tune, hidden_layers=self.seg_hidden_layers,
                           seed=self.seed)

    # ------------------------------------------------------------------
    def to_lines(self) -> list[str]:
        return [f"{f.name}={format_value(getattr(self, f.name))}" for f in fields(self)]

    def config_hash(self) -> str:
        """sha256 over the canonical resolved entries; the output directory is excluded
        so that identical settings written to different places hash the same."""
        lines = [line for line in self.to_lines() if not line.startswith("out_dir=")]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def with_updates(self, updates: dict[str, str]) -> "RunConfig":
        return replace(self, **parse_updates(updates))


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def _parse_scalar(raw: str, kind: type, key: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            value = float(raw)
            if value != value or value in (float("inf"), float("-inf")):
                raise ValueError
            return value
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None
    if not raw:
        raise ConfigError(f"{key}: empty value")
    return raw


def parse_value(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(_DEFAULTS, key)
    if isinstance(default, tuple):
        elem = type(default[0])
        items = [s for s in raw.split(",") if s.strip()]
        if not items:
            raise ConfigError(f"{key}: empty list")
        return tuple(_parse_scalar(s, elem, key) for s in items)
    return _parse_scalar(raw, type(default), key)


def parse_updates(updates: dict[str, str]) -> dict:
    return {k: parse_value(k, v) for k, v in updates.items()}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """key=value lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def resolve(config_path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the config file, then ``--set key=value`` overrides; validated."""
    entries: dict[str, str] = {}
    if config_path is not None:
        try:
            with open(config_path) as fh:
                entries.update(parse_text(fh.read(), config_path))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc.strerror}") from None
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        entries[key.strip()] = value.strip()
    return RunConfig().with_updates(entries).validate()


def hash_diff(a: RunConfig, b: RunConfig) -> list[str]:
    """Names of the entries (other than out_dir) on which two configs disagree."""
    return [f.name for f in fields(RunConfig)
            if f.name != "out_dir" and getattr(a, f.name) != getattr(b, f.name)]
