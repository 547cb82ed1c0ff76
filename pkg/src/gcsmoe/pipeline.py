"""Two-phase multi-expert classifier: training stages and end-to-end runs.

Stages, in order:

1. ``baseline``  flat classifier over all N classes
2. ``deps``      dependency sets from the baseline's rankings
3. ``partition`` GCS (or seeded random) split into M super-classes
4. ``experts``   one trunk per super-class, pretrained on that block only
5. ``fam``       super-class scorer feeding the S-hot mask
6. ``head``      fused classifier on the masked concatenation of trunk features
7. ``eval``      mAP / head-tail report for the ensemble and the baseline

Every stage reads and writes files in a run directory so any stage can be
rerun on its own.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataset as ds
from . import dependency as dep
from . import gcs
from . import metrics
from .gating import SuperClassScorer, masks_direct, train_fam
from .nn import (
    MlpModel,
    TrainConfig,
    Trunk,
    cross_entropy,
    init_mlp,
    load_model,
    save_model,
    sgd_fit,
    stack_backward,
    stack_forward,
    train_classifier,
)

log = logging.getLogger(__name__)

STAGES = ("baseline", "deps", "partition", "experts", "fam", "head", "eval")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    M: int = 4
    S: int = 2
    # F, output width of every expert trunk; (64,) + F=32 mirrors the baseline's (64, 32) trunk
    feature_dim: int = 32
    expert_hidden: tuple[int, ...] = (64,)
    baseline_hidden: tuple[int, ...] = (64, 32)
    fam_hidden: tuple[int, ...] = (64, 32)
    head_hidden: tuple[int, ...] = ()
    # lr 0.05 lets the flat baseline drift as epochs grow; 0.01 converges steadily
    baseline: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60, learning_rate=0.01))
    expert: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60, learning_rate=0.01))
    fam: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60, learning_rate=0.01))
    # a linear head over wide fused features is unstable at the trunk rate
    head: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60, learning_rate=0.005))
    fine_tune: bool = False
    fine_tune_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5, learning_rate=0.01))
    division: str = "gcs"
    cgc: bool = True
    balance: str = gcs.CLASS_COUNT
    tau: float = 2.0
    pair_errors: bool = False
    pair: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20))
    pair_hidden: tuple[int, ...] = (16,)
    seed: int = 0

    def validate(self) -> None:
        if self.M < 2:
            raise ValueError(f"M must be >= 2, got {self.M}")
        if not 1 <= self.S <= self.M:
            raise ValueError(f"S must satisfy 1 <= S <= M={self.M}, got {self.S}")
        if self.division not in ("gcs", "random"):
            raise ValueError(f"division must be gcs or random, got {self.division!r}")
        if self.balance not in gcs.BALANCE_MODES:
            raise ValueError(f"unknown balance mode {self.balance!r}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        for cfg in (self.baseline, self.expert, self.fam, self.head, self.fine_tune_train, self.pair):
            cfg.validate()


_STAGE_TAGS = {name: i for i, name in enumerate(STAGES + ("fine_tune", "pair", "random"))}


def stage_seed(seed: int, stage: str, *extra: int) -> int:
    """Seed for one stage (and sub-index) derived from the run seed."""
    return int(np.random.SeedSequence([seed, _STAGE_TAGS[stage], *extra]).generate_state(1)[0])


def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)


# ---------------------------------------------------------------------------
# ensemble


@dataclass
class ExpertEnsemble:
    trunks: list[Trunk]
    fam: SuperClassScorer
    head: MlpModel | None
    partition: gcs.Partition
    S: int
    cgc: bool = True

    def __post_init__(self):
        if len(self.trunks) != self.partition.M:
            raise ValueError(f"{len(self.trunks)} trunks for M={self.partition.M} super-classes")
        if self.head is not None and self.head.input_dim != self.fused_dim:
            raise ValueError(f"head expects {self.head.input_dim} inputs, fused width is {self.fused_dim}")

    @property
    def M(self) -> int:
        return self.partition.M

    @property
    def fused_dim(self) -> int:
        return sum(t.feature_dim for t in self.trunks)

    def masks(self, X: np.ndarray, S: int | None = None) -> np.ndarray:
        if not self.cgc:
            return np.ones((len(X), self.M), dtype=np.int64)
        return masks_direct(self.fam.predict_proba(X), self.S if S is None else S)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return predict(self, X)


def fused_features(ensemble: ExpertEnsemble, X: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Concatenated trunk features with block ``q`` zeroed where ``mask[q] == 0``."""
    X = np.atleast_2d(X)
    masks = np.atleast_2d(masks)
    if masks.shape[1] != ensemble.M:
        raise ValueError(f"mask width {masks.shape[1]} != M={ensemble.M}")
    blocks = [t.features(X) * masks[:, q:q + 1] for q, t in enumerate(ensemble.trunks)]
    return np.concatenate(blocks, axis=1)


def predict(ensemble: ExpertEnsemble, X: np.ndarray, S: int | None = None) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    fused = fused_features(ensemble, X, ensemble.masks(X, S))
    return ensemble.head.predict_proba(fused)


def ensemble_loss_and_grads(ensemble: ExpertEnsemble, X: np.ndarray, y: np.ndarray, masks: np.ndarray):
    """Loss plus gradients for head params and every trunk's params.

    Returns ``(loss, head_grads, trunk_grads)``; gradients follow the
    ``params()`` ordering of each model. A trunk whose block is masked out
    for every sample gets identically zero gradients.
    """
    trunk_acts = [stack_forward(t.weights, t.biases, X, relu_last=True) for t in ensemble.trunks]
    blocks = [acts[-1] * masks[:, q:q + 1] for q, acts in enumerate(trunk_acts)]
    fused = np.concatenate(blocks, axis=1)
    head = ensemble.head
    head_acts = stack_forward(head.weights, head.biases, fused, relu_last=False)
    loss, dlogits = cross_entropy(head_acts[-1], y)
    gW, gb, dfused = stack_backward(head.weights, head_acts, dlogits, relu_last=False)
    head_grads = [g for pair in zip(gW, gb) for g in pair]
    trunk_grads = []
    offset = 0
    for q, (t, acts) in enumerate(zip(ensemble.trunks, trunk_acts)):
        width = t.feature_dim
        dblock = dfused[:, offset:offset + width] * masks[:, q:q + 1]
        offset += width
        tW, tb, _ = stack_backward(t.weights, acts, dblock, relu_last=True)
        trunk_grads.append([g for pair in zip(tW, tb) for g in pair])
    return loss, head_grads, trunk_grads


# ---------------------------------------------------------------------------
# stages as functions over in-memory objects


def train_baseline(train: ds.LabeledDataset, config: PipelineConfig) -> MlpModel:
    cfg = _seeded(config.baseline, stage_seed(config.seed, "baseline"))
    model, _ = train_classifier(train.features, train.labels, train.num_classes, config.baseline_hidden, cfg)
    return model


def make_partition(
    deps: dep.DependencySets,
    config: PipelineConfig,
    counts: Sequence[int] | None = None,
) -> gcs.Partition:
    n = deps.num_classes
    if config.division == "random":
        return gcs.random_partition(
            n, config.M, stage_seed(config.seed, "random"), config.balance, config.tau, counts
        )
    return gcs.gcs_partition(deps, config.M, config.balance, config.tau, counts)


def train_expert(
    train: ds.LabeledDataset,
    classes: Sequence[int],
    config: PipelineConfig,
    seed: int,
) -> MlpModel:
    """Classifier over ``classes`` only, trained on those classes' samples."""
    classes = list(classes)
    if len(classes) < 2:
        raise ValueError(f"an expert needs at least 2 classes, block has {classes}")
    local = {c: i for i, c in enumerate(classes)}
    keep = np.isin(train.labels, classes)
    X = train.features[keep]
    y = np.array([local[int(c)] for c in train.labels[keep]], dtype=np.int64)
    hidden = (*config.expert_hidden, config.feature_dim)
    model, _ = train_classifier(X, y, len(classes), hidden, _seeded(config.expert, seed))
    return model


def pretrain_experts(
    train: ds.LabeledDataset,
    partition: gcs.Partition,
    config: PipelineConfig,
    access_log: list | None = None,
) -> list[Trunk]:
    """One trunk per block; the temporary classification layer is dropped.

    If ``access_log`` is given, ``(q, sample_indices)`` is appended for every
    expert so callers can audit which samples each expert saw.
    """
    trunks = []
    for q, classes in enumerate(partition.blocks()):
        if len(classes) < 2:
            raise ValueError(f"super-class {q} has {len(classes)} class(es); experts need at least 2")
        if access_log is not None:
            access_log.append((q, np.flatnonzero(np.isin(train.labels, classes))))
        model = train_expert(train, classes, config, stage_seed(config.seed, "experts", q))
        trunks.append(model.trunk())
    return trunks


def train_head(
    trunks: list[Trunk],
    fam: SuperClassScorer,
    train: ds.LabeledDataset,
    partition: gcs.Partition,
    config: PipelineConfig,
) -> ExpertEnsemble:
    """Fit the fused head; trunks stay frozen unless ``config.fine_tune``.

    Masks are recomputed from the FAM for every minibatch.
    """
    if config.fine_tune:
        trunks = [t.copy() for t in trunks]
    ensemble = ExpertEnsemble(trunks, fam, None, partition, config.S, config.cgc)
    X, y = train.features, train.labels
    head = init_mlp(
        [ensemble.fused_dim, *config.head_hidden, train.num_classes],
        seed=stage_seed(config.seed, "head"),
    )
    ensemble.head = head
    # frozen trunks: their features are fixed, only the masks need the FAM
    feats = np.concatenate([t.features(X) for t in trunks], axis=1)
    widths = [t.feature_dim for t in trunks]
    cfg = _seeded(config.head, stage_seed(config.seed, "head", 1))

    def head_step(idx):
        m = ensemble.masks(X[idx])
        fused = feats[idx] * np.repeat(m, widths, axis=1)
        acts = stack_forward(head.weights, head.biases, fused, relu_last=False)
        loss, dlogits = cross_entropy(acts[-1], y[idx])
        gW, gb, _ = stack_backward(head.weights, acts, dlogits, relu_last=False)
        return loss, [g for pair in zip(gW, gb) for g in pair]

    sgd_fit(head.params(), head_step, len(X), cfg)
    if config.fine_tune:
        fine_tune(ensemble, train, config)
    return ensemble


def fine_tune(ensemble: ExpertEnsemble, train: ds.LabeledDataset, config: PipelineConfig) -> None:
    """Joint pass over head and trunks, in place."""
    X, y = train.features, train.labels
    params = ensemble.head.params() + [p for t in ensemble.trunks for p in t.params()]
    cfg = _seeded(config.fine_tune_train, stage_seed(config.seed, "fine_tune"))

    def step(idx):
        loss, hg, tg = ensemble_loss_and_grads(ensemble, X[idx], y[idx], ensemble.masks(X[idx]))
        return loss, hg + [g for grads in tg for g in grads]

    sgd_fit(params, step, len(X), cfg)


def build_ensemble(train: ds.LabeledDataset, partition: gcs.Partition, config: PipelineConfig) -> ExpertEnsemble:
    trunks = pretrain_experts(train, partition, config)
    fam = train_fam(train, partition, _seeded(config.fam, stage_seed(config.seed, "fam")), config.fam_hidden)
    return train_head(trunks, fam, train, partition, config)


# ---------------------------------------------------------------------------
# file-backed stages

FILES = {
    "train": "train.txt",
    "test": "test.txt",
    "baseline": "baseline.mlp",
    "deps": "deps.txt",
    "partition": "partition.txt",
    "fam": "fam.mlp",
    "head": "head.mlp",
    "metrics": "metrics.txt",
    "baseline_metrics": "baseline_metrics.txt",
    "pr_points": "pr_points.txt",
    "manifest": "manifest.txt",
}


def expert_file(q: int) -> str:
    return f"expert_{q}.trunk"


def _train_counts(train: ds.LabeledDataset) -> list[int]:
    return [ds.class_counts(train)[c] for c in range(train.num_classes)]


def _load_info(run_dir: Path) -> dict[str, str]:
    path = run_dir / "ensemble.txt"
    if not path.exists():
        raise FileNotFoundError(f"{path}: missing (run the 'train-head' stage first)")
    return dict(line.split(" ", 1) for line in path.read_text().splitlines() if line.strip())


def run_stage(stage: str, run_dir, config: PipelineConfig) -> list[str]:
    """Run one stage inside ``run_dir``; returns the artifact names written."""
    run_dir = Path(run_dir)
    try:
        return _STAGE_FUNCS[stage](run_dir, config)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc


def _need(run_dir: Path, key: str) -> Path:
    path = run_dir / (FILES[key] if key in FILES else key)
    if not path.exists():
        raise FileNotFoundError(f"required artifact {path} does not exist")
    return path


def _stage_baseline(run_dir: Path, config: PipelineConfig) -> list[str]:
    train = ds.load(_need(run_dir, "train"))
    save_model(train_baseline(train, config), run_dir / FILES["baseline"])
    return [FILES["baseline"]]


def _stage_deps(run_dir: Path, config: PipelineConfig) -> list[str]:
    train = ds.load(_need(run_dir, "train"))
    model = load_model(_need(run_dir, "baseline"))
    dep.save(dep.compute_dependencies(model, train), run_dir / FILES["deps"])
    return [FILES["deps"]]


def _stage_partition(run_dir: Path, config: PipelineConfig) -> list[str]:
    deps = dep.load(_need(run_dir, "deps"))
    counts = None
    if config.balance == gcs.SAMPLE_COUNT:
        counts = _train_counts(ds.load(_need(run_dir, "train")))
    partition = make_partition(deps, config, counts)
    gcs.save(partition, run_dir / FILES["partition"], gcs.census(deps))
    return [FILES["partition"]]


def _load_partition(run_dir: Path, train: ds.LabeledDataset) -> gcs.Partition:
    return gcs.load(_need(run_dir, "partition"), _train_counts(train))


def _stage_experts(run_dir: Path, config: PipelineConfig) -> list[str]:
    train = ds.load(_need(run_dir, "train"))
    partition = _load_partition(run_dir, train)
    if partition.M != config.M:
        raise ValueError(f"partition file has M={partition.M}, config says M={config.M}")
    names = []
    for q, trunk in enumerate(pretrain_experts(train, partition, config)):
        save_model(trunk, run_dir / expert_file(q))
        names.append(expert_file(q))
    return names


def _stage_fam(run_dir: Path, config: PipelineConfig) -> list[str]:
    train = ds.load(_need(run_dir, "train"))
    partition = _load_partition(run_dir, train)
    fam = train_fam(train, partition, _seeded(config.fam, stage_seed(config.seed, "fam")), config.fam_hidden)
    save_model(fam.model, run_dir / FILES["fam"])
    return [FILES["fam"]]


def _stage_head(run_dir: Path, config: PipelineConfig) -> list[str]:
    train = ds.load(_need(run_dir, "train"))
    partition = _load_partition(run_dir, train)
    trunks = [load_model(_need(run_dir, expert_file(q))) for q in range(partition.M)]
    fam = SuperClassScorer(load_model(_need(run_dir, "fam")))
    ensemble = train_head(trunks, fam, train, partition, config)
    save_model(ensemble.head, run_dir / FILES["head"])
    names = [FILES["head"]]
    if config.fine_tune:
        for q, t in enumerate(ensemble.trunks):
            save_model(t, run_dir / f"expert_{q}.tuned.trunk")
            names.append(f"expert_{q}.tuned.trunk")
    (run_dir / "ensemble.txt").write_text(
        f"S {config.S}\ncgc {'on' if config.cgc else 'off'}\nfine_tune {int(config.fine_tune)}\n"
    )
    return names + ["ensemble.txt"]


def load_ensemble(run_dir) -> ExpertEnsemble:
    run_dir = Path(run_dir)
    info = _load_info(run_dir)
    train = ds.load(_need(run_dir, "train"))
    partition = _load_partition(run_dir, train)
    suffix = ".tuned.trunk" if info.get("fine_tune") == "1" else ".trunk"
    trunks = [load_model(_need(run_dir, f"expert_{q}{suffix}")) for q in range(partition.M)]
    fam = SuperClassScorer(load_model(_need(run_dir, "fam")))
    head = load_model(_need(run_dir, "head"))
    return ExpertEnsemble(trunks, fam, head, partition, int(info["S"]), info["cgc"] == "on")


def config_echo(config: PipelineConfig) -> dict[str, str]:
    return {
        "M": str(config.M),
        "S": str(config.S),
        "cgc": "on" if config.cgc else "off",
        "division": config.division,
        "balance": config.balance,
        "seed": str(config.seed),
    }


def _stage_eval(run_dir: Path, config: PipelineConfig) -> list[str]:
    train = ds.load(_need(run_dir, "train"))
    test = ds.load(_need(run_dir, "test"))
    counts = ds.class_counts(train)
    ensemble = load_ensemble(run_dir)
    echo = config_echo(config) | {"S": str(ensemble.S), "cgc": "on" if ensemble.cgc else "off"}
    report = metrics.map_report(ensemble, test, counts, echo)
    if config.pair_errors:
        deps = dep.load(_need(run_dir, "deps"))
        report.pair_errors = metrics.similarity_error_table(
            gcs.census(deps),
            train,
            _seeded(config.pair, stage_seed(config.seed, "pair")),
            metrics.default_pair_factory(config.pair_hidden),
        )
    metrics.save_report(report, run_dir / FILES["metrics"])
    baseline = load_model(_need(run_dir, "baseline"))
    base_report = metrics.map_report(baseline, test, counts, {"model": "baseline", "seed": str(config.seed)})
    metrics.save_report(base_report, run_dir / FILES["baseline_metrics"])
    (run_dir / FILES["pr_points"]).write_text(metrics.dumps_pr_points(ensemble, test))
    return [FILES["metrics"], FILES["baseline_metrics"], FILES["pr_points"]]


_STAGE_FUNCS = {
    "baseline": _stage_baseline,
    "deps": _stage_deps,
    "partition": _stage_partition,
    "experts": _stage_experts,
    "fam": _stage_fam,
    "head": _stage_head,
    "eval": _stage_eval,
}


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_all(
    config: PipelineConfig,
    train_path,
    test_path,
    out_dir,
    config_lines: Sequence[str] = (),
    out_override: str | None = None,
) -> Path:
    """Run every stage and write ``manifest.txt``; returns the manifest path.

    The manifest lists each stage with its artifacts and SHA-256 digests, so
    two runs with identical inputs produce identical manifests.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for key, src in (("train", train_path), ("test", test_path)):
        dst = out / FILES[key]
        if Path(src).resolve() != dst.resolve():
            dst.write_bytes(Path(src).read_bytes())
    lines = ["# gcsmoe run manifest v1", f"seed {config.seed}", f"division {config.division}"]
    lines.append(f"out_dir_override {out_override if out_override else '-'}")
    lines += [f"config {line}" for line in config_lines]
    for key in ("train", "test"):
        lines.append(f"input {key} {FILES[key]} {digest(out / FILES[key])}")
    for stage in STAGES:
        log.info("stage %s", stage)
        for name in run_stage(stage, out, config):
            lines.append(f"stage {stage} {name} {digest(out / name)}")
    summary = metrics.loads_summary((out / FILES["metrics"]).read_text())
    base = metrics.loads_summary((out / FILES["baseline_metrics"]).read_text())
    for key in ("mAP", "accuracy", "head_mAP", "tail_mAP"):
        lines.append(f"result {key} {metrics._f(summary.get(key, math.nan))}")
        lines.append(f"result baseline_{key} {metrics._f(base.get(key, math.nan))}")
    manifest = out / FILES["manifest"]
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> dict:
    stages, results, meta = {}, {}, {}
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        kind, rest = line.split(" ", 1)
        if kind == "stage":
            stage, name, dig = rest.split()
            stages.setdefault(stage, []).append((name, dig))
        elif kind == "result":
            key, value = rest.split()
            results[key] = float(value)
        else:
            meta.setdefault(kind, []).append(rest)
    return {"stages": stages, "results": results, "meta": meta}


# ---------------------------------------------------------------------------
# M x S ablation grid


@dataclass
class AblationGrid:
    Ms: tuple[int, ...]
    Ss: tuple[int, ...]
    seeds: tuple[int, ...]
    division: str
    # cells[(M, S)] / cgc_off[M] / baseline: one mAP per seed
    cells: dict[tuple[int, int], list[float]]
    cgc_off: dict[int, list[float]]
    baseline: list[float]

    def mean(self, values: Sequence[float]) -> float:
        return float(np.mean(values))


def ablation_grid(
    data_for_seed,
    config: PipelineConfig,
    seeds: Sequence[int],
    Ms: Sequence[int] = (3, 4, 5),
    Ss: Sequence[int] = (1, 2, 3),
) -> AblationGrid:
    """mAP over an M x S grid plus one unmasked (cgc off) run per M.

    ``data_for_seed(seed)`` returns ``(train, test)``. Every cell of a seed
    shares that seed's baseline, dependencies and, per M, the partition,
    expert trunks and FAM; only the head differs between S values.
    """
    cells = {(M, S): [] for M in Ms for S in Ss if S <= M}
    off = {M: [] for M in Ms}
    base_maps = []
    for seed in seeds:
        train, test = data_for_seed(seed)
        cfg = replace(config, seed=seed)
        counts = ds.class_counts(train)
        baseline = train_baseline(train, cfg)
        base_maps.append(metrics.map_report(baseline, test, counts).mAP)
        deps = dep.compute_dependencies(baseline, train)
        count_list = [counts[c] for c in range(train.num_classes)]
        for M in Ms:
            mcfg = replace(cfg, M=M, S=min(cfg.S, M))
            partition = make_partition(deps, mcfg, count_list)
            trunks = pretrain_experts(train, partition, mcfg)
            fam = train_fam(train, partition, _seeded(mcfg.fam, stage_seed(seed, "fam")), mcfg.fam_hidden)
            for S in Ss:
                if S > M:
                    continue
                ens = train_head(trunks, fam, train, partition, replace(mcfg, S=S, cgc=True))
                cells[(M, S)].append(metrics.map_report(ens, test, counts).mAP)
            ens = train_head(trunks, fam, train, partition, replace(mcfg, cgc=False))
            off[M].append(metrics.map_report(ens, test, counts).mAP)
    return AblationGrid(tuple(Ms), tuple(Ss), tuple(seeds), config.division, cells, off, base_maps)


def dumps_grid(grid: AblationGrid) -> str:
    f = metrics._f
    lines = [
        "# gcsmoe ablation grid v1",
        f"# seeds {' '.join(map(str, grid.seeds))}",
        f"# division {grid.division}",
        "# cell M S mean_mAP per_seed...",
    ]
    for (M, S), vals in sorted(grid.cells.items()):
        lines.append(f"cell {M} {S} {f(grid.mean(vals))} " + " ".join(f(v) for v in vals))
    for M, vals in sorted(grid.cgc_off.items()):
        lines.append(f"cgc_off {M} {f(grid.mean(vals))} " + " ".join(f(v) for v in vals))
    lines.append(f"baseline {f(grid.mean(grid.baseline))} " + " ".join(f(v) for v in grid.baseline))
    return "\n".join(lines) + "\n"
