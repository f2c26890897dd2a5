"""Experiment orchestration: generate, train, eval, ablate, compare-fusion, gradcheck.

Every report written here embeds the resolved config and the package
version and contains no timestamps, so re-running a command with the same
config reproduces the files byte for byte.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import NUM_CLASSES, __version__
from . import data as D
from . import metrics as M
from . import optim as O
from . import preprocess as P
from . import tensor as T
from . import thoam as H

log = logging.getLogger(__name__)

GRADCHECK_TOL = 1e-4


class ConfigError(ValueError):
    """Experiment config failed validation."""


@dataclass
class ExperimentConfig:
    dataset: str = "data/synth"
    out: str = "runs/default"
    seed: int = 0
    # split
    split_ratio: float = 0.6
    split_seed: int = 0
    # model
    channels: int = 64
    tokens: int = 8
    d_tok: int = 8
    vocab: int = 4096
    modalities: str = "VTL"
    fusion: str = "thoam"
    # optimization
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-5
    momentum: float = 0.0
    milestones: list = field(default_factory=lambda: [30, 60, 90])
    factor: float = 0.3
    epochs: int = 100
    batch_size: int = 32
    # augmentation (visual only)
    augment_flip: bool = True
    augment_rot90: bool = True
    # preprocessing
    fit_policy: str = "train-only"
    # synthetic data (used by `generate`)
    synth_seed: int = 7
    n_per_class: int = 50
    image_size: int = 32
    noise: float = 0.08
    overlap: float = 0.0
    ambiguity: float = 0.0
    distractor: float = 0.0
    obscured: float = 0.0
    concordance: float = 0.0
    tabular_spread: float = 1.0
    max_slices: int = 5

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        types = {f.name: f.type for f in dataclasses.fields(self)}
        for name, typ in types.items():
            v = getattr(self, name)
            if typ == "int":
                need(isinstance(v, int) and not isinstance(v, bool), f"{name}: expected an integer, got {v!r}")
            elif typ == "float":
                need(isinstance(v, (int, float)) and not isinstance(v, bool), f"{name}: expected a number, got {v!r}")
            elif typ == "bool":
                need(isinstance(v, bool), f"{name}: expected true/false, got {v!r}")
            elif typ == "str":
                need(isinstance(v, str), f"{name}: expected a string, got {v!r}")
        need(0 < self.split_ratio < 1, "split_ratio must lie in (0, 1)")
        need(self.tokens >= 2, "tokens must be >= 2")
        need(self.tokens * self.d_tok == self.channels, "tokens * d_tok must equal channels")
        need(self.vocab >= 1, "vocab must be positive")
        need(self.modalities != "" and set(self.modalities) <= set("VTL")
             and len(set(self.modalities)) == len(self.modalities), f"modalities must be a subset of 'VTL', got {self.modalities!r}")
        need(self.fusion in H.FUSION_KINDS, f"fusion must be one of {H.FUSION_KINDS}")
        need(self.fusion == "thoam" or len(self.modalities) == 3, "concat fusion needs all three modalities")
        need(self.optimizer in ("sgd", "adamw"), "optimizer must be 'sgd' or 'adamw'")
        need(self.lr > 0, "lr must be positive")
        need(self.weight_decay >= 0, "weight_decay must be >= 0")
        need(isinstance(self.milestones, list) and all(isinstance(m, int) and m > 0 for m in self.milestones),
             "milestones must be a list of positive integers")
        need(0 < self.factor <= 1, "factor must lie in (0, 1]")
        need(self.epochs >= 1, "epochs must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.fit_policy in P.POLICIES, f"fit_policy must be one of {P.POLICIES}")
        try:
            self.synth_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @property
    def present(self) -> tuple:
        return H.canonical_subset(self.modalities)

    def synth_config(self) -> D.SynthConfig:
        return D.SynthConfig(seed=self.synth_seed, n_per_class=self.n_per_class, image_size=self.image_size,
                             noise=self.noise, overlap=self.overlap, ambiguity=self.ambiguity,
                             distractor=self.distractor, obscured=self.obscured, concordance=self.concordance,
                             tabular_spread=self.tabular_spread, max_slices=self.max_slices)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes).validate()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)


HARDENED_OVERRIDES = dict(D.HARDENED)


def hardened(cfg: ExperimentConfig) -> ExperimentConfig:
    return cfg.replace(**HARDENED_OVERRIDES)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _envelope(cfg: ExperimentConfig, payload: dict) -> dict:
    return {"version": __version__, "config": cfg.to_json(), **payload}


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig) -> Path:
    manifest = D.synth_generate(cfg.dataset, cfg.synth_config())
    log.info("wrote %s", manifest)
    return manifest


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def augment(batch: np.ndarray, rng: np.random.Generator, flip: bool, rot90: bool) -> np.ndarray:
    """Random horizontal/vertical flips and 90-degree rotations, per sample."""
    out = np.empty_like(batch)
    for i, img in enumerate(batch[:, 0]):
        if flip and rng.random() < 0.5:
            img = img[:, ::-1]
        if flip and rng.random() < 0.5:
            img = img[::-1, :]
        if rot90:
            img = np.rot90(img, int(rng.integers(4)))
        out[i, 0] = img
    return out


@dataclass
class Prepared:
    records: list
    split: D.SplitSpec
    stats: P.PreprocessStats
    root: Path

    def subset(self, ids) -> list:
        wanted = set(ids)
        return [r for r in self.records if r.id in wanted]


def prepare(cfg: ExperimentConfig) -> Prepared:
    manifest = Path(cfg.dataset) / D.MANIFEST_NAME
    if not manifest.is_file():
        raise ConfigError(f"no manifest at {manifest}; run `vitalnet generate` first")
    records = D.load_manifest(manifest)
    if not records:
        raise ConfigError(f"{manifest} contains no cases")
    split = D.split_by_patient(records, cfg.split_ratio, cfg.split_seed)
    train_ids = set(split.train)
    fit_pop = [r for r in records if r.id in train_ids] if cfg.fit_policy == "train-only" else records
    stats = P.fit([r.tabular for r in fit_pop], cfg.fit_policy)
    return Prepared(records, split, stats, manifest.parent)


def _batch_inputs(model: H.ThoamModel, arrays: D.CaseArrays, idx: np.ndarray, images=None):
    ci = arrays.slice_case[idx]
    return dict(
        images=(arrays.slices[idx] if images is None else images) if "V" in model.present else None,
        tabular=arrays.tabular[ci] if "T" in model.present else None,
        token_lists=[arrays.tokens[c] for c in ci] if "L" in model.present else None,
    )


@dataclass
class TrainResult:
    model: H.ThoamModel
    log: list
    prepared: Prepared
    best_epoch: int


def train(cfg: ExperimentConfig, prepared: Prepared | None = None, out_dir=None) -> TrainResult:
    """Train one model; write checkpoints and the per-epoch log if ``out_dir`` is given."""
    cfg.validate()
    prep = prepared or prepare(cfg)
    arrays = D.case_arrays(prep.subset(prep.split.train), prep.root, prep.stats, cfg.vocab)
    model = H.ThoamModel.init(cfg.seed, cfg.channels, cfg.tokens, cfg.vocab, cfg.present, cfg.fusion)
    params = model.parameters()
    state = O.OptimState(cfg.optimizer, lr=cfg.lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 1])
    n = arrays.slice_case.size
    rows = []
    best = (np.inf, -1, None)
    for epoch in range(cfg.epochs):
        state.lr = O.steplr(epoch, cfg.lr, cfg.milestones, cfg.factor)
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images = None
            if "V" in model.present:
                images = augment(arrays.slices[idx], rng, cfg.augment_flip, cfg.augment_rot90)
            labels = arrays.labels[arrays.slice_case[idx]]
            logits = model.logits(**_batch_inputs(model, arrays, idx, images))
            loss = T.cross_entropy(logits, labels)
            T.zero_grad(params)
            T.backward(loss)
            O.step(params, state)
            total_loss += loss.item() * idx.size
            correct += int(np.count_nonzero(np.argmax(logits.data, axis=1) == labels))
        row = {"epoch": epoch, "lr": state.lr, "train_loss": total_loss / n, "train_acc": correct / n}
        rows.append(row)
        log.info("epoch %3d lr %.2e loss %.4f acc %.4f", epoch, row["lr"], row["train_loss"], row["train_acc"])
        if row["train_loss"] < best[0]:
            best = (row["train_loss"], epoch, {k: t.data.copy() for k, t in model.named().items()})

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        extra = {"stats": prep.stats.to_json(), "config": cfg.to_json(), "version": __version__}
        model.save(out / "checkpoint_final.ckpt", extra={**extra, "epoch": cfg.epochs - 1})
        H.save_checkpoint(out / "checkpoint_best.ckpt", best[2], {**model.meta(), **extra, "epoch": best[1]})
        write_json(out / "config.json", cfg.to_json())
        prep.stats.save(out / "stats.json")
        prep.split.save(out / "split.json")
        write_json(out / "train_log.json", _envelope(cfg, {"log": rows, "best_epoch": best[1]}))
        with open(out / "train_log.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss", "train_acc"], lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return TrainResult(model, rows, prep, best[1])


def cmd_train(cfg: ExperimentConfig) -> TrainResult:
    return train(cfg, out_dir=cfg.out)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def case_probabilities(model: H.ThoamModel, arrays: D.CaseArrays, batch_size: int = 64) -> np.ndarray:
    """Mean of slice-level softmax probabilities per case."""
    n = arrays.slice_case.size
    probs = np.zeros((n, NUM_CLASSES))
    with T.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(n, start + batch_size))
            probs[idx] = H.predict(model.logits(**_batch_inputs(model, arrays, idx)))[1]
    n_cases = len(arrays.case_ids)
    sums = np.zeros((n_cases, NUM_CLASSES))
    np.add.at(sums, arrays.slice_case, probs)
    counts = np.bincount(arrays.slice_case, minlength=n_cases)[:, None]
    return sums / counts


def evaluate_model(model: H.ThoamModel, prep: Prepared, split: str, vocab: int) -> M.EvalReport:
    ids = prep.split.test if split == "test" else prep.split.train
    if not ids:
        raise ConfigError(f"{split} split is empty")
    arrays = D.case_arrays(prep.subset(ids), prep.root, prep.stats, vocab)
    return M.evaluate(case_probabilities(model, arrays), arrays.labels)


def write_eval(out_dir, cfg: ExperimentConfig, report: M.EvalReport, split: str, extra: dict | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = _envelope(cfg, {"split": split, "fit_policy": cfg.fit_policy, "report": report.to_json(), **(extra or {})})
    write_json(out / f"report_{split}.json", doc)
    report.write_roc_csv(out / f"roc_{split}.csv")
    report.write_confusion_csv(out / f"confusion_{split}.csv")
    report.write_confusion_csv(out / f"confusion_normalized_{split}.csv", normalized=True)
    return doc


def cmd_eval(cfg: ExperimentConfig, checkpoint=None, split: str = "test") -> M.EvalReport:
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    ckpt = Path(checkpoint) if checkpoint else Path(cfg.out) / "checkpoint_final.ckpt"
    model, meta = H.ThoamModel.load(ckpt)
    for key, want in (("channels", cfg.channels), ("tokens", cfg.tokens), ("vocab", cfg.vocab),
                      ("present", "".join(cfg.present)), ("fusion", cfg.fusion)):
        if meta[key] != want:
            raise H.CheckpointError(f"checkpoint {key}={meta[key]!r} but config has {want!r}")
    prep = prepare(cfg)
    prep.stats = P.PreprocessStats.from_json(meta["stats"])
    report = evaluate_model(model, prep, split, cfg.vocab)
    write_eval(cfg.out, cfg, report, split)
    return report


# ---------------------------------------------------------------------------
# ablation / fusion comparison
# ---------------------------------------------------------------------------

def _run(cfg: ExperimentConfig, prep: Prepared, out_dir=None) -> dict:
    result = train(cfg, prep, out_dir)
    report = evaluate_model(result.model, prep, "test", cfg.vocab)
    if out_dir is not None:
        write_eval(out_dir, cfg, report, "test")
    return {"accuracy": report.accuracy, "macro_auc": report.macro_auc, "report": report}


def _write_table(out: Path, name: str, cfg: ExperimentConfig, columns: list, rows: list) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    doc = _envelope(cfg, {"rows": rows})
    write_json(out / f"{name}.json", doc)
    with open(out / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return doc


def cmd_ablate(cfg: ExperimentConfig, write_runs: bool = True) -> list:
    """Train and test every non-empty modality subset with a shared seed and schedule."""
    prep = prepare(cfg)
    out = Path(cfg.out)
    rows = []
    for subset in H.SUBSETS:
        name = "".join(subset)
        sub_cfg = cfg.replace(modalities=name, fusion="thoam")
        res = _run(sub_cfg, prep, out / f"subset_{name}" if write_runs else None)
        rows.append({"subset": name, "visual": "V" in subset, "tabular": "T" in subset,
                     "linguistic": "L" in subset, "accuracy": res["accuracy"], "macro_auc": res["macro_auc"]})
        log.info("subset %-3s acc %.4f auc %s", name, res["accuracy"], res["macro_auc"])
    _write_table(out, "ablation", cfg, ["subset", "visual", "tabular", "linguistic", "accuracy", "macro_auc"], rows)
    return rows


def cmd_compare_fusion(cfg: ExperimentConfig, write_runs: bool = True) -> list:
    """Concatenation baseline vs attention fusion, same data, seed and schedule."""
    prep = prepare(cfg)
    out = Path(cfg.out)
    rows = []
    for kind in ("concat", "thoam"):
        sub_cfg = cfg.replace(modalities="VTL", fusion=kind)
        res = _run(sub_cfg, prep, out / f"fusion_{kind}" if write_runs else None)
        rows.append({"fusion": kind, "accuracy": res["accuracy"], "macro_auc": res["macro_auc"]})
        log.info("fusion %-6s acc %.4f auc %s", kind, res["accuracy"], res["macro_auc"])
    _write_table(out, "compare_fusion", cfg, ["fusion", "accuracy", "macro_auc"], rows)
    return rows


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def gradcheck_pipeline(seed: int = 0, channels: int = 8, tokens: int = 2, n: int = 3,
                       image_size: int = 8, vocab: int = 16, eps: float = 1e-5) -> float:
    """Max relative error of backprop vs central differences over encoders + THOAM + loss.

    Every parameter coordinate is checked.
    """
    rng = np.random.default_rng(seed)
    model = H.ThoamModel.init(seed, channels, tokens, vocab)
    images = rng.uniform(0, 1, (n, 1, image_size, image_size))
    tab = rng.normal(size=(n, 10))
    toks = [list(map(int, rng.integers(0, vocab, int(rng.integers(1, 6))))) for _ in range(n)]
    labels = rng.integers(0, NUM_CLASSES, n)

    def f(_):
        return T.cross_entropy(model.logits(images, tab, toks), labels)

    return T.grad_check(f, model.parameters(), eps=eps, max_coords=None)


def cmd_gradcheck(cfg: ExperimentConfig | None = None) -> tuple[bool, float]:
    seed = 0 if cfg is None else cfg.seed
    err = float(gradcheck_pipeline(seed))
    ok = bool(err < GRADCHECK_TOL)
    if cfg is not None:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        write_json(Path(cfg.out) / "gradcheck.json",
                   _envelope(cfg, {"max_relative_error": err, "tolerance": GRADCHECK_TOL, "passed": ok}))
    return ok, err
