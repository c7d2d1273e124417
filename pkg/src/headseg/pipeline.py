"""End-to-end orchestration: phantom cohort, preprocessing, rule labels,
per-axis network training, fused segmentation and statistics.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io
from .config import emit_kv, parse_kv
from .forknet import AXES, NetworkConfig, NetworkModel, epoch_means, tissue_groups, train
from .fuse import FusionConfig, build_head_model
from .morpho import subject_record
from .phantom import generate_cohort
from .preprocess import PreprocessConfig, preprocess_pair
from .ruleseg import RuleConfig, run_ruleseg
from .volcore import TISSUES, dice

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """Failure inside a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    grid: int = 48
    seed: int = 7
    n_train: int = 4
    n_eval: int = 2
    noise_sigma: float = 0.02
    bias_amplitude: float = 0.2
    bias_order: int = 2
    levels: int = 3
    widths: tuple[int, ...] = (8, 16, 32)
    group_size: int = 4
    epochs: int = 5
    batch_size: int = 4
    lr: float = 0.003
    fusion: str = "majority"
    tau: float = 0.5
    connectivity: int = 26
    vote_source: str = "directional"
    cleanup: bool = False
    out_dir: str = "headseg_demo"
    rule: RuleConfig = field(default_factory=RuleConfig)

    def to_text(self) -> str:
        base = "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self) if f.name != "rule")
        return base + emit_kv(self.rule, "rule")

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        kw = parse_kv(text, cls, ignore=("rule.",))
        kw["rule"] = RuleConfig(**parse_kv(text, RuleConfig, prefix="rule"))
        return cls(**kw)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.fusion, self.tau, self.connectivity, self.vote_source, self.cleanup,
                            self.rule.cleanup_min_size)

    def network_config(self, axis: str, tracks) -> NetworkConfig:
        return NetworkConfig(slice_edge=self.grid, levels=self.levels, widths=tuple(self.widths),
                             tracks=tuple(tracks), axis=axis, seed=self.seed)


def _fmt(v) -> str:
    return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)


def load_config(path) -> PipelineConfig:
    return PipelineConfig.from_text(Path(path).read_text(encoding="utf-8"))


def model_filename(axis: str, group: int) -> str:
    return f"{axis}_g{group}.bin"


def load_models(directory) -> dict:
    """Read ``<axis>_g<k>.bin`` files into ``{axis: [models]}`` (group order)."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"model directory not found: {d}")
    out = {}
    for axis in AXES:
        files = sorted(d.glob(f"{axis}_g*.bin"), key=lambda p: int(p.stem.split("_g")[-1]))
        out[axis] = [io.load_model(p) for p in files]
    return out


def train_axis_group(subjects, cfg: PipelineConfig, axis: str, group: int):
    """Train one (axis, tissue group) network; returns ``(model, history)``."""
    tracks = tissue_groups(cfg.group_size)[group]
    model = NetworkModel.init(cfg.network_config(axis, tracks))
    return train(model, subjects, epochs=cfg.epochs, batch_size=cfg.batch_size,
                 seed=cfg.seed * 1000 + 10 * AXES.index(axis) + group, lr=cfg.lr)


def write_history(history, n_epochs: int, path) -> None:
    means = epoch_means(history, n_epochs) if n_epochs else []
    per = len(history) // n_epochs if n_epochs else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,batch,loss\n")
        for i, v in enumerate(history):
            fh.write(f"{i // per if per else 0},{i},{v!r}\n")
    log.info("history=%s epochs=%d final_mean=%s", path, n_epochs, means[-1] if len(means) else "nan")


@dataclass
class DemoReport:
    out_dir: Path
    dice: dict = field(default_factory=dict)  # tissue label -> list of per-subject Dice
    tie_fractions: list = field(default_factory=list)
    stats_csv: Path | None = None
    seconds: dict = field(default_factory=dict)

    def dice_table(self) -> str:
        lines = ["tissue,dice_mean," + ",".join(f"subject{i}" for i in range(len(self.tie_fractions)))]
        for t in TISSUES:
            vals = self.dice[t.label]
            lines.append(f"{t.label},{np.mean(vals):.4f}," + ",".join(f"{v:.4f}" for v in vals))
        return "\n".join(lines) + "\n"


def _stage(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (OSError, StageError):
        raise
    except Exception as e:
        raise StageError(name, e) from e


def run_demo(cfg: PipelineConfig = PipelineConfig(), progress=None) -> DemoReport:
    """Run the whole pipeline on a fresh phantom cohort under ``cfg.out_dir``.

    Training targets are the rule-based labels of the training subjects;
    evaluation compares the fused network models with phantom truth.
    """
    say = progress or (lambda msg: None)
    out = Path(cfg.out_dir)
    for sub in ("phantoms", "preprocessed", "ruleseg", "models", "heads"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "pipeline.conf").write_text(cfg.to_text(), encoding="utf-8")
    rep = DemoReport(out)
    n = cfg.n_train + cfg.n_eval

    t0 = time.perf_counter()
    cohort = _stage("phantom", generate_cohort, n, cfg.seed, out / "phantoms", cfg.grid,
                    cfg.noise_sigma, cfg.bias_amplitude)
    rep.seconds["phantom"] = time.perf_counter() - t0
    say(f"phantom: {n} subjects in {out / 'phantoms'}")

    t0 = time.perf_counter()
    pcfg = PreprocessConfig(edge=cfg.grid, bias_order=cfg.bias_order)
    prepped = []
    entries = []
    for e in cohort.entries:
        t1, t2, truth = (io.read_nifti(p) for p in (e.t1, e.t2, e.labels))
        n1, n2, _, lab, reports = _stage("preprocess", preprocess_pair, t1, t2, pcfg, truth)
        p1 = out / "preprocessed" / f"{e.id}_t1.nii.gz"
        p2 = out / "preprocessed" / f"{e.id}_t2.nii.gz"
        pt = out / "preprocessed" / f"{e.id}_truth.nii.gz"
        io.write_nifti(n1, p1)
        io.write_nifti(n2, p2)
        io.write_nifti(lab, pt)
        (out / "preprocessed" / f"{e.id}_report.txt").write_text(
            "".join(r.to_text() for r in reports), encoding="utf-8")
        prepped.append((e, n1, n2, lab))
    rep.seconds["preprocess"] = time.perf_counter() - t0
    say("preprocess: done")

    t0 = time.perf_counter()
    rule_labels = []
    for e, n1, n2, _ in prepped:
        lab, rrep = _stage("ruleseg", run_ruleseg, n1, n2, cfg.rule)
        path = out / "ruleseg" / f"{e.id}_labels.nii.gz"
        io.write_nifti(lab, path)
        (out / "ruleseg" / f"{e.id}_report.txt").write_text(rrep.to_text(), encoding="utf-8")
        rule_labels.append(lab)
        entries.append(io.SubjectEntry(e.id, out / "preprocessed" / f"{e.id}_t1.nii.gz",
                                       out / "preprocessed" / f"{e.id}_t2.nii.gz", path,
                                       e.age, e.sex, e.height_m, e.weight_kg))
    io.write_manifest(entries[:cfg.n_train], out / "train_manifest.csv")
    io.write_manifest(entries[cfg.n_train:], out / "eval_manifest.csv")
    rep.seconds["ruleseg"] = time.perf_counter() - t0
    say("ruleseg: done")

    t0 = time.perf_counter()
    subjects = [(p[1].data, p[2].data, r.labels) for p, r in zip(prepped[:cfg.n_train], rule_labels)]
    models = {}
    for axis in AXES:
        models[axis] = []
        for g in range(len(tissue_groups(cfg.group_size))):
            model, hist = _stage("train", train_axis_group, subjects, cfg, axis, g)
            io.save_model(model, out / "models" / model_filename(axis, g))
            write_history(hist, cfg.epochs, out / "models" / f"{axis}_g{g}_loss.csv")
            models[axis].append(model)
            say(f"train: {axis} group {g} done")
    rep.seconds["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    records = []
    fcfg = cfg.fusion_config()
    for e, n1, n2, truth in prepped[cfg.n_train:]:
        head, qc, _ = _stage("segment", build_head_model, n1, n2, models, fcfg)
        io.write_nifti(head, out / "heads" / f"{e.id}_model.nii.gz")
        (out / "heads" / f"{e.id}_qc.txt").write_text(qc.to_text(), encoding="utf-8")
        rep.tie_fractions.append(qc.tie_fraction)
        for t in TISSUES:
            rep.dice.setdefault(t.label, []).append(dice(head.labels == t, truth.labels == t))
        records.append(subject_record(head, e.id, e.age, e.sex, e.height_m, e.weight_kg))
    rep.seconds["segment"] = time.perf_counter() - t0

    rep.stats_csv = out / "stats.csv"
    io.write_stats_csv(records, rep.stats_csv)
    (out / "dice.csv").write_text(rep.dice_table(), encoding="utf-8")
    say(f"stats: {rep.stats_csv}")
    return rep


def demo_config(**overrides) -> PipelineConfig:
    return replace(PipelineConfig(), **overrides)
