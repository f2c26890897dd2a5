"""Case records, JSON Lines manifests, the synthetic generator and patient-level splits."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import CLASSES, NUM_CLASSES
from .encoders import ImageSlice, read_pgm, write_pgm
from .preprocess import SchemaError, TabularRecord

MANIFEST_NAME = "manifest.jsonl"
GENERATOR_NAME = "synth_config.json"
CASE_FIELDS = ("id", "label", "images", "tabular", "report")


class ManifestError(ValueError):
    """A manifest line violates the case schema."""


@dataclass(frozen=True)
class CaseRecord:
    id: str
    label: str
    images: tuple  # paths relative to the manifest directory
    tabular: TabularRecord
    report: str

    @property
    def label_index(self) -> int:
        return CLASSES.index(self.label)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "images": list(self.images),
            "tabular": self.tabular.to_dict(),
            "report": self.report,
        }


def _parse_case(obj, lineno: int) -> CaseRecord:
    def fail(fld, msg):
        raise ManifestError(f"line {lineno}: field '{fld}': {msg}")

    if not isinstance(obj, dict):
        fail("<record>", "expected a JSON object")
    missing = [f for f in CASE_FIELDS if f not in obj]
    if missing:
        fail(missing[0], "missing")
    extra = sorted(set(obj) - set(CASE_FIELDS))
    if extra:
        fail(extra[0], "unexpected field")
    if not isinstance(obj["id"], str) or not obj["id"]:
        fail("id", "expected a non-empty string")
    if obj["label"] not in CLASSES:
        fail("label", f"{obj['label']!r} is not one of {CLASSES}")
    images = obj["images"]
    if not isinstance(images, list) or not images or not all(isinstance(p, str) for p in images):
        fail("images", "expected a non-empty list of file paths")
    if not isinstance(obj["report"], str):
        fail("report", "expected a string")
    if not isinstance(obj["tabular"], dict):
        fail("tabular", "expected an object")
    try:
        tab = TabularRecord.from_dict(obj["tabular"])
    except SchemaError as exc:
        fail("tabular", str(exc))
    return CaseRecord(obj["id"], obj["label"], tuple(images), tab, obj["report"])


def load_manifest(path, check_images: bool = True) -> list[CaseRecord]:
    path = Path(path)
    root = path.parent
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            rec = _parse_case(obj, lineno)
            if rec.id in seen:
                raise ManifestError(f"line {lineno}: field 'id': duplicate id {rec.id!r}")
            seen.add(rec.id)
            if check_images:
                for ref in rec.images:
                    if not (root / ref).is_file():
                        raise ManifestError(f"line {lineno}: field 'images': missing file {ref}")
            records.append(rec)
    return records


def save_manifest(path, records) -> None:
    lines = [json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_slice(root, ref: str) -> ImageSlice:
    return read_pgm(Path(root) / ref)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    train: list
    test: list
    seed: int
    ratio: float

    def to_json(self) -> dict:
        return {"train": list(self.train), "test": list(self.test), "seed": self.seed, "ratio": self.ratio}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SplitSpec":
        d = json.loads(Path(path).read_text())
        return cls(d["train"], d["test"], d["seed"], d["ratio"])


def split_by_patient(records, ratio: float, seed: int) -> SplitSpec:
    """Stratified, case-atomic train/test split.

    Within each class the case ids are sorted, shuffled with ``seed`` and the
    first ``floor(ratio * n + 0.5)`` (clamped to [1, n-1]) go to train.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    by_class = {c: [] for c in CLASSES}
    for r in records:
        by_class[r.label].append(r.id)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in CLASSES:
        ids = sorted(by_class[c])
        if not ids:
            continue
        if len(ids) < 2:
            raise ValueError(f"class {c!r} has {len(ids)} case(s); need at least 2 to split")
        order = rng.permutation(len(ids))
        n_train = min(max(int(math.floor(ratio * len(ids) + 0.5)), 1), len(ids) - 1)
        train += [ids[i] for i in order[:n_train]]
        test += [ids[i] for i in order[n_train:]]
    return SplitSpec(train, test, seed, ratio)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

# Per modality, each class has a look-alike partner. Under ``ambiguity`` a
# modality renders the partner instead of the true class. The three pairings
# share no pair, so any two modalities together pin down the class.
PARTNERS = {
    "V": {0: 4, 4: 0, 1: 3, 3: 1, 2: 5, 5: 2},
    "T": {0: 1, 1: 0, 2: 3, 3: 2, 4: 5, 5: 4},
    "L": {0: 5, 5: 0, 1: 2, 2: 1, 3: 4, 4: 3},
}

# Look-alike pairs used by concordance coding and obscured slices: solid
# masses, cysts with internal echoes, and predominantly cystic lesions.
CONCORDANCE_PAIRS = ((0, 4), (1, 3), (2, 5))
OBSCURED_LEVEL = {0: 0.65, 4: 0.65, 1: 0.45, 3: 0.45, 2: 0.1, 5: 0.1}

# (mean, sd) for normal fields, (median, log-sd) for lognormal markers, probabilities for flags
TABULAR_PROFILES = {
    #          age        bmi         pain  bloat  ca125        cea         ca199        afp         ca153       diameter
    0: dict(age=(28, 8), bmi=(21, 2.5), pain=0.2, bloat=0.15, ca125=(18, 0.5), cea=(1.5, 0.4), ca199=(45, 0.5), afp=(6.0, 0.3), ca153=(12, 0.3), diam=(6.0, 1.5)),
    1: dict(age=(35, 6), bmi=(21, 2.5), pain=0.6, bloat=0.25, ca125=(70, 0.5), cea=(1.5, 0.4), ca199=(20, 0.5), afp=(2.5, 0.3), ca153=(13, 0.3), diam=(5.5, 1.5)),
    2: dict(age=(45, 9), bmi=(23, 2.5), pain=0.1, bloat=0.2, ca125=(15, 0.5), cea=(1.5, 0.4), ca199=(10, 0.5), afp=(2.5, 0.3), ca153=(12, 0.3), diam=(7.0, 1.5)),
    3: dict(age=(42, 9), bmi=(23, 2.5), pain=0.2, bloat=0.5, ca125=(20, 0.5), cea=(6.0, 0.4), ca199=(80, 0.5), afp=(2.5, 0.3), ca153=(14, 0.3), diam=(12.0, 2.0)),
    4: dict(age=(56, 8), bmi=(25, 2.5), pain=0.15, bloat=0.3, ca125=(25, 0.5), cea=(1.5, 0.4), ca199=(12, 0.5), afp=(2.5, 0.3), ca153=(15, 0.3), diam=(8.0, 1.5)),
    5: dict(age=(58, 7), bmi=(24, 2.5), pain=0.8, bloat=0.7, ca125=(600, 0.6), cea=(2.5, 0.4), ca199=(25, 0.5), afp=(2.5, 0.3), ca153=(40, 0.3), diam=(10.0, 2.0)),
}

REPORT_SENTENCES = {
    0: ["mixed echogenic mass with a hyperechoic dermoid plug",
        "posterior acoustic shadowing is seen",
        "echogenic lines and dots suggest hair and fat",
        "a fat fluid level is present"],
    1: ["round cyst with homogeneous ground glass echoes",
        "low level internal echoes fill the cyst",
        "thick wall without papillary projections",
        "no internal vascular flow on doppler"],
    2: ["unilocular anechoic cyst with a thin smooth wall",
        "posterior acoustic enhancement is noted",
        "no septations or solid components",
        "clear fluid content"],
    3: ["large multilocular cyst with numerous thin septations",
        "loculi of varying echogenicity",
        "honeycomb appearance of the septa",
        "mucoid content with fine echoes"],
    4: ["solid hypoechoic mass with stripy shadowing",
        "well defined oval solid lesion",
        "minimal vascularity on doppler",
        "homogeneous solid echotexture"],
    5: ["complex solid cystic mass with irregular thick septa",
        "papillary projections and marked vascularity",
        "ascites is present in the pouch",
        "irregular margins with heterogeneous echoes"],
}

SIZE_SENTENCE = "the {side} ovary shows a lesion measuring {size} cm"
GENERIC_SENTENCES = [
    "the uterus is normal in size",
    "the contralateral ovary appears unremarkable",
    "examination performed transvaginally",
]


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs.

    noise: std of additive pixel noise (images in [0, 1]) and scale of
        tabular jitter
    overlap: per-modality probability of rendering a uniformly random other class
    ambiguity: per-modality probability of rendering the class's look-alike partner
    distractor: probability of adding one sentence from another class to a report
    obscured: per-slice probability of a poor acoustic window. The slice then
        shows a featureless blob whose brightness is shared by both members of
        the class's look-alike pair (see CONCORDANCE_PAIRS)
    concordance: probability that a case is concordance-coded. The
        examination record then follows either member of the class's
        concordance pair at random, and the report describes the same member
        for the first class of the pair and the other member for the second.
        Record and report are each uninformative within the pair; only their
        agreement is. The maximum diameter (and so the lesion size in the
        image) still follows the true class, and the image shows the true
        class or, under ``ambiguity``, the other pair member.
    tabular_spread: multiplier on the within-class spread of every numeric
        tabular field except max_diameter
    """

    seed: int = 7
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

    def __post_init__(self):
        if self.n_per_class < 2:
            raise ValueError(f"n_per_class must be >= 2, got {self.n_per_class}")
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if not 1 <= self.max_slices <= 5:
            raise ValueError(f"max_slices must lie in [1, 5], got {self.max_slices}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if self.tabular_spread <= 0:
            raise ValueError(f"tabular_spread must be > 0, got {self.tabular_spread}")
        for name in ("overlap", "ambiguity", "distractor", "obscured", "concordance"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def to_json(self) -> dict:
        return asdict(self)


HARDENED = dict(noise=0.08, overlap=0.0, ambiguity=0.0, distractor=0.0, obscured=0.7, concordance=1.0,
                tabular_spread=0.2)


def _rendered_class(rng, true_cls: int, partner: int, cfg: SynthConfig) -> int:
    u = rng.random()
    if u < cfg.overlap:
        others = [c for c in range(NUM_CLASSES) if c != true_cls]
        return int(others[rng.integers(len(others))])
    if u < cfg.overlap + (1 - cfg.overlap) * cfg.ambiguity:
        return partner
    return true_cls


def _pair_of(cls: int) -> tuple[int, int]:
    return next(p for p in CONCORDANCE_PAIRS if cls in p)


def _concordance_coded(rng, true_cls: int) -> tuple[int, int]:
    """(record class, report class) for a concordance-coded case."""
    a, b = _pair_of(true_cls)
    shown = a if rng.random() < 0.5 else b
    return shown, (shown if true_cls == a else a + b - shown)


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2


def lesion_scale(diameter: float) -> float:
    """Relative lesion size in the image for a given maximum diameter (cm)."""
    return min(1.15, max(0.85, 0.9 + 0.02 * (diameter - 5.0)))


def render_image(rng, cls: int, size: int, noise: float, scale: float = 1.0,
                 obscured: bool = False) -> np.ndarray:
    """Grayscale uint8 image of a class-specific lesion pattern on speckle."""
    s = size / 32.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), 0.25)
    cy = size / 2 + rng.uniform(-3, 3) * s
    cx = size / 2 + rng.uniform(-3, 3) * s
    k = rng.uniform(0.95, 1.05) * scale * s
    if obscured:
        img[_ellipse(yy, xx, cy, cx, 8 * k, 8 * k) < 1] = OBSCURED_LEVEL[cls]
    elif cls == 0:  # bright solid mass with brighter plug
        d = _ellipse(yy, xx, cy, cx, 8 * k, 8 * k)
        img[d < 1] = 0.75
        img[_ellipse(yy, xx, cy - 2 * k, cx + 2 * k, 3 * k, 3 * k) < 1] = 1.0
    elif cls == 1:  # round cyst, mid-gray ground-glass interior, thick wall
        d = _ellipse(yy, xx, cy, cx, 9 * k, 9 * k)
        img[d < 1.25] = 0.7
        img[d < 1] = 0.5
    elif cls == 2:  # anechoic cyst, thin bright wall
        d = _ellipse(yy, xx, cy, cx, 9 * k, 9 * k)
        img[d < 1.1] = 0.9
        img[d < 1] = 0.02
    elif cls == 3:  # multilocular: several small dark loculi
        for dy, dx in ((-5, -5), (-5, 5), (5, -5), (5, 5)):
            d = _ellipse(yy, xx, cy + dy * k, cx + dx * k, 4 * k, 4 * k)
            img[d < 1.3] = 0.8
            img[d < 1] = 0.05
    elif cls == 4:  # elongated hypoechoic solid mass with stripy shadowing
        d = _ellipse(yy, xx, cy, cx, 5 * k, 11 * k)
        stripes = 0.1 + 0.3 * (np.sin(xx * 1.2 / s) > 0)
        img = np.where(d < 1, stripes, img)
    else:  # mixed: solid bright part next to dark part, irregular
        d1 = _ellipse(yy, xx, cy, cx - 4 * k, 6 * k, 5 * k)
        d2 = _ellipse(yy, xx, cy + 2 * k, cx + 5 * k, 5 * k, 6 * k)
        img[d2 < 1] = 0.05
        img[d1 < 1] = 0.85
    if rng.random() < 0.5:
        img = img.T
    img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _draw_tabular(rng, cls: int, noise: float, diameter_cls: int | None = None,
                  spread: float = 1.0) -> TabularRecord:
    p = TABULAR_PROFILES[cls]
    jitter = 1.0 + noise

    def normal(key, lo, prof=p, f=spread):
        mu, sd = prof[key]
        return round(max(lo, rng.normal(mu, sd * f * jitter)), 2)

    def lognormal(key):
        med, lsd = p[key]
        return round(float(med * math.exp(rng.normal(0.0, lsd * spread * jitter))), 2)

    return TabularRecord(
        age=normal("age", 6.0),
        bmi=normal("bmi", 14.0),
        abdominal_pain="yes" if rng.random() < p["pain"] else "no",
        abdominal_bloating="yes" if rng.random() < p["bloat"] else "no",
        ca125=lognormal("ca125"),
        cea=lognormal("cea"),
        ca199=lognormal("ca199"),
        afp=lognormal("afp"),
        ca153=lognormal("ca153"),
        max_diameter=normal("diam", 0.5, TABULAR_PROFILES[cls if diameter_cls is None else diameter_cls], 1.0),
    )


def _draw_report(rng, cls: int, cfg: SynthConfig, diameter: float) -> str:
    pool = REPORT_SENTENCES[cls]
    chosen = [pool[i] for i in sorted(rng.choice(len(pool), size=3, replace=False))]
    side = "left" if rng.random() < 0.5 else "right"
    chosen.insert(0, SIZE_SENTENCE.format(side=side, size=f"{diameter:.1f}"))
    if rng.random() < 0.5:
        chosen.append(GENERIC_SENTENCES[int(rng.integers(len(GENERIC_SENTENCES)))])
    if rng.random() < cfg.distractor:
        other = int(rng.choice([c for c in range(NUM_CLASSES) if c != cls]))
        chosen.append(REPORT_SENTENCES[other][int(rng.integers(4))])
    return ". ".join(s[0].upper() + s[1:] for s in chosen) + "."


def synth_case(rng, cls: int, cfg: SynthConfig):
    """(images, tabular, report) for one case of class ``cls``."""
    if rng.random() < cfg.concordance:
        r_v = _rendered_class(rng, cls, sum(_pair_of(cls)) - cls, cfg)
        r_t, r_l = _concordance_coded(rng, cls)
        tab = _draw_tabular(rng, r_t, cfg.noise, diameter_cls=cls, spread=cfg.tabular_spread)
    else:
        r_v = _rendered_class(rng, cls, PARTNERS["V"][cls], cfg)
        tab = _draw_tabular(rng, _rendered_class(rng, cls, PARTNERS["T"][cls], cfg), cfg.noise,
                            spread=cfg.tabular_spread)
        r_l = _rendered_class(rng, cls, PARTNERS["L"][cls], cfg)
    report = _draw_report(rng, r_l, cfg, tab.max_diameter)
    scale = lesion_scale(tab.max_diameter)
    n_slices = int(rng.integers(1, cfg.max_slices + 1))
    images = [render_image(rng, r_v, cfg.image_size, cfg.noise, scale, obscured=rng.random() < cfg.obscured)
              for _ in range(n_slices)]
    return images, tab, report


def synth_generate(out_dir, cfg: SynthConfig) -> Path:
    """Write images/, manifest.jsonl and synth_config.json under ``out_dir``.

    Output is a pure function of ``cfg``: one generator drives every draw in
    a fixed order (class-major, then case).
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    records = []
    for cls in range(NUM_CLASSES):
        for i in range(cfg.n_per_class):
            case_id = f"c{cls}_{i:04d}"
            images, tab, report = synth_case(rng, cls, cfg)
            refs = []
            for k, img in enumerate(images):
                ref = f"images/{case_id}_{k}.pgm"
                write_pgm(out / ref, ImageSlice.from_array(img))
                refs.append(ref)
            records.append(CaseRecord(case_id, CLASSES[cls], tuple(refs), tab, report))
    manifest = out / MANIFEST_NAME
    save_manifest(manifest, records)
    (out / GENERATOR_NAME).write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class CaseArrays:
    """Model-ready arrays for a list of cases (one row per image slice)."""

    case_ids: list
    labels: np.ndarray          # per case
    slices: np.ndarray          # (S, 1, H, W) in [0, 1]
    slice_case: np.ndarray      # (S,) index into cases
    tabular: np.ndarray         # (cases, 10) normalized
    tokens: list = field(default_factory=list)  # per case token ids


def case_arrays(records, root, stats, vocab: int) -> CaseArrays:
    from .encoders import tokenize
    from .preprocess import transform

    slices, owner = [], []
    for ci, r in enumerate(records):
        for ref in r.images:
            slices.append(load_slice(root, ref).to_array())
            owner.append(ci)
    sizes = {s.shape for s in slices}
    if len(sizes) > 1:
        raise ManifestError(f"dataset mixes image sizes {sorted(sizes)}")
    return CaseArrays(
        case_ids=[r.id for r in records],
        labels=np.array([r.label_index for r in records], dtype=np.int64),
        slices=np.stack(slices)[:, None, :, :] if slices else np.zeros((0, 1, 8, 8)),
        slice_case=np.array(owner, dtype=np.int64),
        tabular=np.stack([transform(r.tabular, stats) for r in records]) if records else np.zeros((0, 10)),
        tokens=[tokenize(r.report, vocab) for r in records],
    )
