"""Synthetic cross-modal task, training runs, ablation protocols and reports."""

from __future__ import annotations

import csv
import io
import json
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .backbone import build_model, make_optimizer, train_step
from .errors import ConfigurationError
from .experts import ExpertKind
from .layer import (
    HmmoeConfig,
    RoutingDecision,
    UtilizationRow,
    count_parameters,
    utilization_csv,
    utilization_stats,
)
from .params import derive_rng
from .tensor import cross_entropy

if TYPE_CHECKING:
    from .config import RunConfig

FUSION_RULES = ("xor_latent", "agreement")
ABLATION_KINDS = ("expert_type", "rank", "expert_count", "heterogeneous")
METRIC_COLUMNS = ("step", "split", "loss", "accuracy")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    seq_v: int = 6
    seq_a: int = 4
    dim: int = 32
    classes: int = 2
    fusion_rule: str = "xor_latent"
    noise_std: float = 0.1
    seed: int = 0
    n_train: int = 4096
    n_test: int = 2000

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigurationError("task needs at least two classes", "model.C")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be non-negative", "task.noise_std")
        if self.fusion_rule not in FUSION_RULES:
            raise ConfigurationError(
                f"fusion_rule must be one of {FUSION_RULES}, got {self.fusion_rule!r}",
                "task.fusion_rule")
        for name in ("seq_v", "seq_a", "dim", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive", f"task.{name}")


@dataclass
class Dataset:
    v: np.ndarray       # [N, S_V, D]
    a: np.ndarray       # [N, S_A, D]
    y: np.ndarray       # [N]
    z_v: np.ndarray     # [N] latent carried by the visual stream
    z_a: np.ndarray     # [N] latent carried by the audio stream

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.v[idx], self.a[idx], self.y[idx], self.z_v[idx], self.z_a[idx])

    def zero_modality(self, modality: str | None) -> "Dataset":
        if modality is None:
            return self
        if modality == "v":
            return replace(self, v=np.zeros_like(self.v))
        if modality == "a":
            return replace(self, a=np.zeros_like(self.a))
        raise ConfigurationError(f"unknown modality {modality!r}", "training.zero_modality")


def fuse_labels(rule: str, z_v: np.ndarray, z_a: np.ndarray, classes: int) -> np.ndarray:
    if rule == "xor_latent":
        # for two classes this is z_v XOR z_a; each latent alone is independent of it
        return (z_v + z_a) % classes
    if rule == "agreement":
        return (z_v == z_a).astype(np.int64)
    raise ConfigurationError(f"unknown fusion rule {rule!r}", "task.fusion_rule")


def _split(spec: SyntheticTaskSpec, n: int, name: str, dirs_v, dirs_a) -> Dataset:
    rng = derive_rng(spec.seed, "task", name)
    z_v = rng.integers(0, spec.classes, n)
    z_a = rng.integers(0, spec.classes, n)
    v = dirs_v[z_v][:, None, :] + spec.noise_std * rng.standard_normal((n, spec.seq_v, spec.dim))
    a = dirs_a[z_a][:, None, :] + spec.noise_std * rng.standard_normal((n, spec.seq_a, spec.dim))
    return Dataset(v, a, fuse_labels(spec.fusion_rule, z_v, z_a, spec.classes), z_v, z_a)


def generate_task(spec: SyntheticTaskSpec) -> tuple[Dataset, Dataset]:
    """Train and test sets of ``(v_tokens, a_tokens, label)``.

    Every token of a stream carries its latent's direction (fixed per latent
    value and modality) plus Gaussian noise. The two splits use separate
    random streams.
    """
    rng = derive_rng(spec.seed, "task", "directions")
    dirs_v = rng.standard_normal((spec.classes, spec.dim))
    dirs_a = rng.standard_normal((spec.classes, spec.dim))
    return (_split(spec, spec.n_train, "train", dirs_v, dirs_a),
            _split(spec, spec.n_test, "test", dirs_v, dirs_a))


@dataclass(frozen=True)
class TrainingSpec:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_every: int = 100
    zero_modality: str | None = None


@dataclass
class RunResult:
    seed: int
    test_accuracy: float
    metrics: list[tuple[int, str, float, float]]
    ledger: dict
    utilization: list[UtilizationRow]

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for step, split, loss, acc in self.metrics:
            w.writerow([step, split, repr(loss), repr(acc)])
        return buf.getvalue()


def evaluate(model, data: Dataset, batch: int = 1000,
             decisions: list[RoutingDecision] | None = None) -> tuple[float, float]:
    """Mean loss and accuracy over ``data`` without recording a tape."""
    total_loss, correct = 0.0, 0
    for start in range(0, len(data), batch):
        part = data.subset(slice(start, start + batch))
        logits = model.forward(part.v, part.a, decisions=decisions)
        total_loss += cross_entropy(logits, part.y).item() * len(part)
        correct += int((logits.data.argmax(axis=1) == part.y).sum())
    return total_loss / len(data), correct / len(data)


def _mix_seed(base: int, seed: int) -> int:
    return int(derive_rng(base, "task-seed", seed).integers(0, 2**62))


def train_run(layers: int, dim: int, classes: int, hmmoe: HmmoeConfig | None,
              task: SyntheticTaskSpec, training: TrainingSpec, seed: int) -> RunResult:
    """Train one fresh model for ``training.steps`` steps and evaluate it."""
    if task.dim != dim or task.classes != classes:
        task = replace(task, dim=dim, classes=classes)
    train, test = generate_task(replace(task, seed=_mix_seed(task.seed, seed)))
    train = train.zero_modality(training.zero_modality)
    test = test.zero_modality(training.zero_modality)
    model = build_model(layers, dim, hmmoe, classes, seed=seed)
    opt = make_optimizer(training.optimizer, training.lr)
    order_rng = derive_rng(seed, "batches")
    monitor = train.subset(slice(0, min(len(train), 1024)))

    metrics: list[tuple[int, str, float, float]] = []
    perm, pos = order_rng.permutation(len(train)), 0
    for step in range(1, training.steps + 1):
        if pos + training.batch_size > len(perm):
            perm, pos = order_rng.permutation(len(train)), 0
        idx = perm[pos:pos + training.batch_size]
        pos += training.batch_size
        train_step(model, train.v[idx], train.a[idx], train.y[idx], opt)
        if step % training.eval_every == 0 or step == training.steps:
            for split, data in (("train", monitor), ("test", test)):
                loss, acc = evaluate(model, data)
                metrics.append((step, split, loss, acc))

    decisions: list[RoutingDecision] = []
    _, test_acc = evaluate(model, test, decisions=decisions)
    util = utilization_stats(decisions, layers) if hmmoe is not None else []
    return RunResult(seed, test_acc, metrics, count_parameters(model).to_dict(), util)


# -- ablations ----------------------------------------------------------------


@dataclass
class ArmResult:
    name: str
    config: dict
    seeds: list[int]
    accuracies: list[float]
    ledger: dict
    runs: list[RunResult] = field(default_factory=list, repr=False, compare=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def to_dict(self) -> dict:
        return {"name": self.name, "config": self.config, "seeds": self.seeds,
                "accuracies": self.accuracies, "mean": self.mean, "std": self.std,
                "ledger": self.ledger}


@dataclass
class AblationReport:
    kind: str
    base: dict
    arms: list[ArmResult]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "base": self.base, "arms": [a.to_dict() for a in self.arms]}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationReport":
        arms = [ArmResult(a["name"], a["config"], list(a["seeds"]), list(a["accuracies"]),
                          a["ledger"]) for a in d["arms"]]
        return cls(d["kind"], d["base"], arms)

    def arm(self, name: str) -> ArmResult:
        for a in self.arms:
            if a.name == name:
                return a
        raise KeyError(name)


def ablation_arms(kind: str, base: HmmoeConfig, grid: Sequence) -> list[tuple[str, HmmoeConfig]]:
    """Named adapter configurations for one ablation protocol."""
    if kind not in ABLATION_KINDS:
        raise ConfigurationError(f"unknown ablation kind {kind!r}", "ablation.kind")
    if not grid:
        raise ConfigurationError(f"empty grid for ablation {kind!r}", f"ablation.{kind}")
    m = base.groups[0][1]
    kinds = [k for k, _ in base.groups]
    specs: list[tuple[str, dict]] = []
    for entry in grid:
        if kind == "expert_type":
            types = [ExpertKind.parse(t) for t in entry]
            specs.append(("+".join(t.value for t in types),
                          dict(groups=tuple((t, m) for t in types), k=min(base.k, m))))
        elif kind == "rank":
            specs.append((f"r={entry}", dict(rank=int(entry))))
        elif kind == "expert_count":
            n = int(entry)
            specs.append((f"M={n}", dict(groups=tuple((t, n) for t in kinds), k=min(base.k, n))))
        else:
            n = int(entry)
            k = min(base.k, n)
            specs.append((f"{3 * n}xSingle", dict(groups=((ExpertKind.SINGLE, n),) * 3, k=k)))
            specs.append((f"{n}+{n}+{n}", dict(groups=((ExpertKind.SINGLE, n),
                                                       (ExpertKind.CROSS, n),
                                                       (ExpertKind.CHANNEL, n)), k=k)))
    arms = []
    for name, changes in specs:
        try:
            arms.append((name, replace(base, **changes)))
        except ConfigurationError as e:
            raise ConfigurationError(f"ablation arm {name!r}: {e}", e.field) from e
    return arms


def _run_job(args) -> RunResult:
    return train_run(*args)


def run_ablation(kind: str, config: "RunConfig", grid: Sequence | None = None,
                 seeds: Sequence[int] | None = None, workers: int = 1) -> AblationReport:
    """Train a fresh model per (arm, seed) and aggregate test accuracies."""
    if grid is None:
        grid = config.ablation_grid(kind)
    seeds = list(seeds if seeds is not None else config.training.seeds)
    if len(seeds) < 3:
        raise ConfigurationError("ablations need at least three seeds", "training.seeds")
    arms = ablation_arms(kind, config.hmmoe, grid)
    m = config.model
    jobs = [(m.layers, m.dim, m.classes, cfg, config.task, config.training, s)
            for _, cfg in arms for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    out = []
    for i, (name, cfg) in enumerate(arms):
        runs = results[i * len(seeds):(i + 1) * len(seeds)]
        out.append(ArmResult(name, cfg.to_dict(), seeds, [r.test_accuracy for r in runs],
                             runs[0].ledger, runs))
    return AblationReport(kind, config.to_dict(), out)


# -- report emission ------------------------------------------------------------


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _aggregate(accs: list[float]) -> dict:
    return {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "n": len(accs)}


def run_report_files(config: "RunConfig", runs: list[RunResult]) -> dict[str, str]:
    """File name -> contents for a training job (first run's curves and routing)."""
    first = runs[0]
    report = {
        "config": config.to_dict(),
        "runs": [{"seed": r.seed, "test_accuracy": r.test_accuracy} for r in runs],
        "aggregate": _aggregate([r.test_accuracy for r in runs]),
    }
    return {
        "metrics.csv": first.metrics_csv(),
        "utilization.csv": utilization_csv(first.utilization),
        "ledger.json": _dump_json(first.ledger),
        "report.json": _dump_json(report),
    }


def ablation_report_files(report: AblationReport) -> dict[str, str]:
    files = {
        "report.json": _dump_json(report.to_dict()),
        "ledger.json": _dump_json({a.name: a.ledger for a in report.arms}),
    }
    for arm in report.arms:
        for run in arm.runs:
            base = f"arms/{arm.name}/seed{run.seed}"
            files[f"{base}/metrics.csv"] = run.metrics_csv()
            files[f"{base}/utilization.csv"] = utilization_csv(run.utilization)
    return files


def emit_reports(out_dir: str | os.PathLike, files: dict[str, str]) -> list[Path]:
    """Write ``files`` under ``out_dir`` all-or-nothing.

    Everything is written to a sibling temporary directory first and moved
    into place only once every file has been written.
    """
    out = Path(out_dir)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    except OSError as e:
        raise OSError(f"cannot write reports to {out}: {e.strerror or e}") from e
    try:
        for rel, text in files.items():
            p = tmp / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(text)
        written = []
        out.mkdir(parents=True, exist_ok=True)
        for rel in files:
            dest = out / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(tmp / rel, dest)
            written.append(dest)
        return written
    except OSError as e:
        raise OSError(f"cannot write reports to {out}: {e.strerror or e}") from e
    finally:
        shutil.rmtree(tmp, ignore_errors=True)

