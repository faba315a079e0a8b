"""Staged speaker-verification pipeline with a flat-text config and a hash manifest.

Stages run in a fixed dependency order and each writes its artifacts under
``paths.work_dir``:

    features    features/<utt>.fmat
    ubm         ubm.json
    stats       stats/<utt>.npy        (G, 1 + d): zeroth order, centered first order
    tv          tv.json
    ivectors    ivectors.fmat (+ .ids)
    projection  projection.json
    whiten      whitener.json
    plda        plda.json
    score       trials.txt, scores.txt
    evaluate    det.txt, results.json

Speakers are split by ``split.train_fraction`` (sorted speaker ids, first
part trains). UBM, TV, projection, whitening and PLDA are trained on the
training speakers only; trials come from the held-out speakers unless
``paths.trials`` names a trial list.
"""

from concurrent.futures import ThreadPoolExecutor
import dataclasses
from dataclasses import dataclass, field
import hashlib
import json
import logging
from pathlib import Path
import typing

import numpy as np

from . import io, metrics
from .alignment import DiagonalGmm, gmm_from_posteriors, gmm_posteriors, load_external_posteriors, train_gmm_em
from .backend import PldaModel, Whitener, fit_whitener, length_normalize, plda_score_pairs, train_plda_em
from .compare import all_pairs_trials
from .discriminant import LabeledVectors, NdaConfig, Projection, apply_projection, fit_lda, fit_nda
from .features import DEFAULT_SAD_MARGIN, MfccConfig, extract_features
from .ivector import SuffStats, TotalVariabilityModel, accumulate_stats, center_stats, extract_ivectors, train_tv_em

logger = logging.getLogger(__name__)

STAGES = ("features", "ubm", "stats", "tv", "ivectors", "projection", "whiten", "plda", "score", "evaluate")
MANIFEST = "manifest.jsonl"


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    work_dir: str = "work"
    posteriors_dir: str | None = None
    trials: str | None = None


@dataclass(frozen=True)
class SadConfig:
    margin: float = DEFAULT_SAD_MARGIN


@dataclass(frozen=True)
class UbmConfig:
    components: int = 32
    iters: int = 10
    split_iters: int = 3
    subsample: float | None = None
    seed: int = 0


@dataclass(frozen=True)
class TvConfig:
    rank: int = 20
    iters: int = 5
    seed: int = 0


@dataclass(frozen=True)
class ProjectionConfig:
    method: str = "nda"
    dim: int = 4
    K: int = 5
    alpha: float = 1.0
    metric: str = "cosine"
    one_vs_rest: bool = True

    def nda_config(self):
        return NdaConfig(K=self.K, alpha=self.alpha, metric=self.metric, one_vs_rest=self.one_vs_rest)


@dataclass(frozen=True)
class PldaConfig:
    iters: int = 10
    seed: int = 0


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    n_jobs: int = 1


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    mfcc: MfccConfig = field(default_factory=MfccConfig)
    sad: SadConfig = field(default_factory=SadConfig)
    ubm: UbmConfig = field(default_factory=UbmConfig)
    tv: TvConfig = field(default_factory=TvConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    plda: PldaConfig = field(default_factory=PldaConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        G = self.ubm.components
        if G < 1 or G & (G - 1):
            raise ValueError(f"ubm.components must be a power of two, got {G}")
        if self.tv.rank < 1:
            raise ValueError("tv.rank must be >= 1")
        if not 1 <= self.projection.dim <= self.tv.rank:
            raise ValueError(
                f"projection.dim ({self.projection.dim}) must be in [1, tv.rank = {self.tv.rank}]"
            )
        if self.projection.method not in ("lda", "nda"):
            raise ValueError(f"projection.method must be 'lda' or 'nda', got {self.projection.method!r}")
        self.projection.nda_config()
        if not 0 < self.split.train_fraction < 1:
            raise ValueError("split.train_fraction must be in (0, 1)")
        if self.run.n_jobs < 1:
            raise ValueError("run.n_jobs must be >= 1")
        for name in ("ubm", "tv", "plda"):
            if getattr(self, name).iters < 0:
                raise ValueError(f"{name}.iters must be >= 0")

    @property
    def work(self):
        return Path(self.paths.work_dir)

    @property
    def data(self):
        return Path(self.paths.data_dir)


def _sections():
    return {f.name: f.default_factory for f in dataclasses.fields(PipelineConfig)}


def config_keys():
    """All ``section.key`` names with their declared types and defaults."""
    out = {}
    for section, factory in _sections().items():
        hints = typing.get_type_hints(type(factory()))
        for f in dataclasses.fields(factory()):
            out[f"{section}.{f.name}"] = (hints[f.name], getattr(factory(), f.name))
    return out


def _coerce(text, tp, key):
    text = text.strip()
    args = typing.get_args(tp)
    if type(None) in args:
        if text.lower() in ("none", ""):
            return None
        tp = next(a for a in args if a is not type(None))
    try:
        if tp is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except ValueError:
        raise ValueError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None


def build_config(values):
    """PipelineConfig from a {"section.key": str or value} mapping."""
    keys = config_keys()
    per_section = {}
    for key, raw in values.items():
        if key not in keys:
            raise ValueError(f"unknown config key {key!r}")
        tp = keys[key][0]
        value = _coerce(raw, tp, key) if isinstance(raw, str) else raw
        section, name = key.split(".", 1)
        per_section.setdefault(section, {})[name] = value
    kwargs = {s: type(f())(**per_section[s]) for s, f in _sections().items() if s in per_section}
    return PipelineConfig(**kwargs)


def parse_config_text(text, source="<config>"):
    """Parses ``section.key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ValueError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path, overrides=None):
    values = parse_config_text(Path(path).read_text(), str(path))
    values.update(overrides or {})
    return build_config(values)


def format_config(cfg):
    lines = []
    for section in _sections():
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            lines.append(f"{section}.{f.name} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


# which config sections each stage's outputs depend on (run.n_jobs never does)
_STAGE_SECTIONS = {
    "features": ("mfcc", "sad"),
    "ubm": ("ubm", "split"),
    "stats": (),
    "tv": ("tv", "split"),
    "ivectors": (),
    "projection": ("projection", "split"),
    "whiten": ("split",),
    "plda": ("plda", "split"),
    "score": (),
    "evaluate": (),
}


def stage_config_hash(cfg, stage):
    parts = {s: dataclasses.asdict(getattr(cfg, s)) for s in _STAGE_SECTIONS[stage]}
    if stage in ("ubm", "stats"):
        parts["posteriors"] = cfg.paths.posteriors_dir is not None
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Run:
    """State shared by the stages of one pipeline invocation."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.work = cfg.work
        self.inputs = []
        self.outputs = []

    def need(self, path, producer):
        path = Path(path)
        if not path.exists():
            raise PipelineError(f"missing upstream artifact {path} (produced by stage '{producer}')")
        self.inputs.append(path)
        return path

    def wrote(self, path):
        self.outputs.append(Path(path))

    def map(self, fn, items):
        if self.cfg.run.n_jobs == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.cfg.run.n_jobs) as ex:
            return list(ex.map(fn, items))

    # -- data listing -------------------------------------------------------

    def utt2spk(self):
        return io.read_utt2spk(self.need(self.cfg.data / "utt2spk", "data"))

    def utterances(self):
        return sorted(self.utt2spk())

    def train_utterances(self):
        u2s = self.utt2spk()
        speakers = sorted(set(u2s.values()))
        n_train = int(round(self.cfg.split.train_fraction * len(speakers)))
        if not 2 <= n_train < len(speakers):
            raise PipelineError(
                f"split.train_fraction={self.cfg.split.train_fraction} leaves no usable split of {len(speakers)} speakers"
            )
        train = set(speakers[:n_train])
        return [u for u in sorted(u2s) if u2s[u] in train]

    def eval_utterances(self):
        train = set(self.train_utterances())
        return [u for u in self.utterances() if u not in train]

    def feature_path(self, utt):
        return self.work / "features" / f"{utt}.fmat"

    def stats_path(self, utt):
        return self.work / "stats" / f"{utt}.npy"

    def read_features(self, utts):
        paths = [self.need(self.feature_path(u), "features") for u in utts]
        return [io.read_fmat(p) for p in paths]

    def read_posteriors(self, utts):
        root = Path(self.cfg.paths.posteriors_dir)
        paths = [self.need(root / f"{u}.fmat", "external posteriors") for u in utts]
        return [load_external_posteriors(p) for p in paths]

    def read_ivectors(self, utts=None):
        path = self.need(self.work / "ivectors.fmat", "ivectors")
        self.need(str(path) + ".ids", "ivectors")
        ids, X = io.read_ivectors(path)
        if utts is None:
            return ids, X
        row = {u: i for i, u in enumerate(ids)}
        missing = [u for u in utts if u not in row]
        if missing:
            raise PipelineError(f"no i-vector for utterance {missing[0]}")
        return list(utts), X[[row[u] for u in utts]]

    def train_vectors(self):
        u2s = self.utt2spk()
        utts, X = self.read_ivectors(self.train_utterances())
        return LabeledVectors(X, np.array([u2s[u] for u in utts]))

    def projection(self):
        return Projection.load(self.need(self.work / "projection.json", "projection"))

    def whitener(self):
        return Whitener.load(self.need(self.work / "whitener.json", "whiten"))


def _stage_features(r):
    cfg = r.cfg
    utts = r.utterances()
    wavs = [r.need(cfg.data / "wav" / f"{u}.wav", "data") for u in utts]
    (r.work / "features").mkdir(parents=True, exist_ok=True)

    def one(args):
        utt, wav = args
        samples, rate = io.read_wav(wav)
        feat = extract_features(samples, rate, cfg.mfcc, cfg.sad.margin)
        io.write_fmat(r.feature_path(utt), feat)
        return r.feature_path(utt)

    for path in r.map(one, list(zip(utts, wavs))):
        r.wrote(path)


def _stage_ubm(r):
    cfg = r.cfg
    utts = r.train_utterances()
    feats = r.read_features(utts)
    if cfg.paths.posteriors_dir is not None:
        ubm = gmm_from_posteriors(feats, r.read_posteriors(utts), n_jobs=cfg.run.n_jobs)
        if ubm.num_components != cfg.ubm.components:
            raise PipelineError(
                f"external posteriors have {ubm.num_components} classes, ubm.components = {cfg.ubm.components}"
            )
    else:
        ubm = train_gmm_em(
            feats,
            cfg.ubm.components,
            iters=cfg.ubm.iters,
            seed=cfg.ubm.seed,
            split_iters=cfg.ubm.split_iters,
            subsample=cfg.ubm.subsample,
            n_jobs=cfg.run.n_jobs,
        )
    ubm.save(r.work / "ubm.json")
    r.wrote(r.work / "ubm.json")


def _stage_stats(r):
    cfg = r.cfg
    ubm = DiagonalGmm.load(r.need(r.work / "ubm.json", "ubm"))
    utts = r.utterances()
    feats = r.read_features(utts)
    posts = r.read_posteriors(utts) if cfg.paths.posteriors_dir is not None else None
    (r.work / "stats").mkdir(parents=True, exist_ok=True)

    def one(i):
        post = posts[i] if posts is not None else gmm_posteriors(ubm, feats[i])
        stats = center_stats(accumulate_stats(post, feats[i]), ubm.means)
        np.save(r.stats_path(utts[i]), stats.to_array())
        return r.stats_path(utts[i])

    for path in r.map(one, range(len(utts))):
        r.wrote(path)


def _read_stats(r, utts):
    paths = [r.need(r.stats_path(u), "stats") for u in utts]
    return [SuffStats.from_array(np.load(p)) for p in paths]


def _stage_tv(r):
    cfg = r.cfg
    ubm = DiagonalGmm.load(r.need(r.work / "ubm.json", "ubm"))
    stats = _read_stats(r, r.train_utterances())
    model = train_tv_em(stats, ubm, cfg.tv.rank, iters=cfg.tv.iters, seed=cfg.tv.seed)
    model.save(r.work / "tv.json")
    r.wrote(r.work / "tv.json")


def _stage_ivectors(r):
    model = TotalVariabilityModel.load(r.need(r.work / "tv.json", "tv"))
    utts = r.utterances()
    X = extract_ivectors(model, _read_stats(r, utts))
    path = r.work / "ivectors.fmat"
    io.write_ivectors(path, utts, X)
    r.wrote(path)
    r.wrote(str(path) + ".ids")


def _stage_projection(r):
    cfg = r.cfg
    train = r.train_vectors()
    if cfg.projection.method == "lda":
        proj = fit_lda(train, cfg.projection.dim)
    else:
        proj = fit_nda(train, cfg.projection.dim, cfg.projection.nda_config())
    proj.save(r.work / "projection.json")
    r.wrote(r.work / "projection.json")


def _stage_whiten(r):
    proj = r.projection()
    train = r.train_vectors()
    fit_whitener(apply_projection(proj, train.X)).save(r.work / "whitener.json")
    r.wrote(r.work / "whitener.json")


def _backend_transform(r, X):
    return length_normalize(r.whitener()(apply_projection(r.projection(), X)))


def _stage_plda(r):
    cfg = r.cfg
    train = r.train_vectors()
    Z = _backend_transform(r, train.X)
    model = train_plda_em(LabeledVectors(Z, train.labels), cfg.plda.iters, cfg.plda.seed)
    model.save(r.work / "plda.json")
    r.wrote(r.work / "plda.json")


def _trial_list(r):
    if r.cfg.paths.trials is not None:
        return io.read_trials(r.need(r.cfg.paths.trials, "trials"))
    u2s = r.utt2spk()
    utts = r.eval_utterances()
    e, t, y = all_pairs_trials([u2s[u] for u in utts])
    return [(utts[i], utts[j], bool(k)) for i, j, k in zip(e, t, y)]


def _stage_score(r):
    plda = PldaModel.load(r.need(r.work / "plda.json", "plda"))
    trials = _trial_list(r)
    if not trials:
        raise PipelineError("empty trial list")
    ids, X = r.read_ivectors()
    row = {u: i for i, u in enumerate(ids)}
    for e, t, _ in trials:
        for u in (e, t):
            if u not in row:
                raise PipelineError(f"trial references unknown utterance {u}")
    Z = _backend_transform(r, X)
    E = Z[[row[e] for e, _, _ in trials]]
    T = Z[[row[t] for _, t, _ in trials]]
    scores = plda_score_pairs(plda, E, T)
    io.write_trials(r.work / "trials.txt", trials)
    io.write_scores(r.work / "scores.txt", [e for e, _, _ in trials], [t for _, t, _ in trials], scores)
    r.wrote(r.work / "trials.txt")
    r.wrote(r.work / "scores.txt")


def _stage_evaluate(r):
    trials = io.read_trials(r.need(r.work / "trials.txt", "score"))
    enroll, test, scores = io.read_scores(r.need(r.work / "scores.txt", "score"))
    if [(e, t) for e, t, _ in trials] != list(zip(enroll, test)):
        raise PipelineError("scores.txt does not match trials.txt")
    is_target = np.array([y for _, _, y in trials])
    det = metrics.compute_det(scores, is_target)
    det.write(r.work / "det.txt")
    results = {
        "eer": metrics.eer(det),
        "min_dcf08": metrics.min_dcf(det, metrics.DCF08),
        "min_dcf10": metrics.min_dcf(det, metrics.DCF10),
        "n_target": int(is_target.sum()),
        "n_nontarget": int((~is_target).sum()),
    }
    (r.work / "results.json").write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    r.wrote(r.work / "det.txt")
    r.wrote(r.work / "results.json")


_STAGE_FUNCS = {
    "features": _stage_features,
    "ubm": _stage_ubm,
    "stats": _stage_stats,
    "tv": _stage_tv,
    "ivectors": _stage_ivectors,
    "projection": _stage_projection,
    "whiten": _stage_whiten,
    "plda": _stage_plda,
    "score": _stage_score,
    "evaluate": _stage_evaluate,
}

_STAGE_SEEDS = {"ubm": ("ubm", "seed"), "tv": ("tv", "seed"), "plda": ("plda", "seed")}


def _rel(path, cfg):
    """Manifest key: path relative to the work dir, or ``$data/...``."""
    path = Path(path).resolve()
    for root, prefix in ((cfg.work, ""), (cfg.data, "$data/")):
        try:
            return prefix + path.relative_to(root.resolve()).as_posix()
        except ValueError:
            pass
    return str(path)


def _update_manifest(work, entry):
    path = work / MANIFEST
    entries = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                obj = json.loads(line)
                entries[obj["stage"]] = obj
    entries[entry["stage"]] = entry
    ordered = [entries[s] for s in STAGES if s in entries]
    path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in ordered))


def read_manifest(work_dir):
    path = Path(work_dir) / MANIFEST
    return {json.loads(l)["stage"]: json.loads(l) for l in path.read_text().splitlines() if l.strip()}


def run_stage(cfg, stage):
    if stage not in _STAGE_FUNCS:
        raise PipelineError(f"unknown stage {stage!r}; stages are {', '.join(STAGES)}")
    cfg.work.mkdir(parents=True, exist_ok=True)
    r = _Run(cfg)
    logger.info("stage %s", stage)
    try:
        _STAGE_FUNCS[stage](r)
    except io.FormatError as e:
        raise PipelineError(f"stage '{stage}': {e}") from e
    except PipelineError as e:
        raise PipelineError(f"stage '{stage}': {e}") from e
    seed = None
    if stage in _STAGE_SEEDS:
        section, key = _STAGE_SEEDS[stage]
        seed = getattr(getattr(cfg, section), key)
    entry = {
        "stage": stage,
        "config": stage_config_hash(cfg, stage),
        "seed": seed,
        "inputs": {_rel(p, cfg): file_hash(p) for p in sorted(set(r.inputs), key=str)},
        "outputs": {_rel(p, cfg): file_hash(p) for p in r.outputs},
    }
    _update_manifest(cfg.work, entry)
    return entry


def run_pipeline(cfg, stages=STAGES):
    """Runs the given stages (a subsequence of ``STAGES``) in order."""
    stages = list(stages)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise PipelineError(f"unknown stage {unknown[0]!r}; stages are {', '.join(STAGES)}")
    positions = [STAGES.index(s) for s in stages]
    if positions != sorted(set(positions)):
        raise PipelineError(f"stages must be distinct and in dependency order: {', '.join(STAGES)}")
    for stage in stages:
        run_stage(cfg, stage)
    results = cfg.work / "results.json"
    return json.loads(results.read_text()) if "evaluate" in stages else None
