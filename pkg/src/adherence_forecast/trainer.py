"""Training loop, cross-validation harness, random search and ablation runners."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .adherence import ORIGINAL, AdherenceDefinition, label
from .features import (
    MAX_LEN,
    MIN_LEN,
    FeatureSequence,
    Scaler,
    daily_features,
    fit_scaler,
    DailyFeatures,
)
from .metrics import mann_whitney_u, run_day_matrix
from .model import HyperParams, ModelParameters, OptimizerState, adamw_step, backward, forward, init_model
from .sessions import Cohort

log = logging.getLogger(__name__)

ALL_DAYS = tuple(range(MIN_LEN, MAX_LEN + 1))

# sub-seed purposes
_FOLDS, _TRAIN, _SEARCH, _CANDIDATE = 0, 1, 2, 3


class SingleClassTraining(ValueError):
    pass


class OverlapError(ValueError):
    pass


def derive_seed(master: int, *key: int) -> int:
    """Deterministic sub-seed for (purpose, run, fold, ...) under a master seed."""
    return int(np.random.SeedSequence([int(master), *map(int, key)]).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001306
    batch_size: int = 64
    max_epochs: int = 500
    early_stop_patience: int = 20
    anneal_factor: float = 5.0
    anneal_patience: int = 10
    val_fraction: float = 0.10
    class_weighting: bool = True
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.early_stop_patience < 1 or self.anneal_patience < 1:
            raise ValueError("patience values must be >= 1")


# -- loss -------------------------------------------------------------------

def class_weights(labels: Sequence[bool]) -> np.ndarray:
    """[w_adherent, w_dropout] with w = 1 / (# examples of the class)."""
    y = np.asarray(labels, dtype=bool)
    counts = np.array([np.sum(~y), np.sum(y)], dtype=np.float64)
    if (counts == 0).any():
        raise SingleClassTraining("training data must contain both classes")
    return 1.0 / counts


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                           weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Class-weighted softmax cross-entropy, normalized by the applied weights.

    Returns ``(loss, dloss/dlogits)``. ``weights=None`` is plain mean CE.
    """
    y = np.asarray(labels).astype(np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    rows = np.arange(len(y))
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64)[y]
    total = w.sum()
    loss = float(-(w * logp[rows, y]).sum() / total)
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad *= (w / total)[:, None]
    return loss, grad


# -- plateau control --------------------------------------------------------

class PlateauControl:
    """Early stopping and learning-rate annealing driven by validation loss."""

    def __init__(self, lr: float, stop_patience: int, anneal_patience: int, factor: float):
        self.lr = lr
        self.stop_patience = stop_patience
        self.anneal_patience = anneal_patience
        self.factor = factor
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self._since_anneal = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; True when it is the new best."""
        if val_loss < self.best:
            self.best, self.best_epoch = val_loss, epoch
            self.bad_epochs = self._since_anneal = 0
            return True
        self.bad_epochs += 1
        self._since_anneal += 1
        if self._since_anneal >= self.anneal_patience:
            self.lr /= self.factor
            self._since_anneal = 0
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.stop_patience


# -- single training run ----------------------------------------------------

@dataclass
class TrainedModel:
    params: ModelParameters
    best_epoch: int
    epochs_run: int
    train_loss: list[float]
    val_loss: list[float]
    lr_history: list[float]


def _pack(sequences: Sequence[FeatureSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t_max = max(s.length for s in sequences)
    values = np.zeros((len(sequences), 2, t_max))
    lengths = np.empty(len(sequences), dtype=np.int64)
    for i, s in enumerate(sequences):
        values[i, :, : s.length] = s.values
        lengths[i] = s.length
    labels = np.array([s.label for s in sequences], dtype=bool)
    return values, lengths, labels


def _slice(values, lengths, idx):
    t = int(lengths[idx].max())
    mask = np.arange(t)[None, :] < lengths[idx][:, None]
    return np.ascontiguousarray(values[idx, :, :t]), mask


def _eval_loss(params, values, lengths, labels, weights, chunk=512) -> float:
    num = den = 0.0
    for start in range(0, len(labels), chunk):
        idx = np.arange(start, min(start + chunk, len(labels)))
        v, m = _slice(values, lengths, idx)
        logits, _ = forward(params, v, m)
        loss, _ = weighted_cross_entropy(logits, labels[idx], weights)
        w = np.ones(len(idx)) if weights is None else weights[labels[idx].astype(int)]
        num += loss * w.sum()
        den += w.sum()
    return num / den


def split_validation(patient_ids: Iterable[str], fraction: float,
                     rng: np.random.Generator) -> set[str]:
    ids = sorted(set(patient_ids))
    if len(ids) < 2:
        raise ValueError("need at least two patients to hold out a validation set")
    n_val = min(len(ids) - 1, max(1, int(round(fraction * len(ids)))))
    return set(rng.permutation(ids)[:n_val].tolist())


def train(dataset: Sequence[FeatureSequence], config: TrainConfig,
          hp: HyperParams | None = None,
          on_epoch: Callable[[int, float, float], None] | None = None) -> TrainedModel:
    """Train on prefix sequences with a patient-level validation holdout.

    Returns the parameters of the best validation epoch.
    """
    hp = hp or HyperParams()
    if not dataset:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    val_ids = split_validation((s.patient_id for s in dataset), config.val_fraction, rng)
    train_seqs = [s for s in dataset if s.patient_id not in val_ids]
    val_seqs = [s for s in dataset if s.patient_id in val_ids]
    weights = class_weights([s.label for s in train_seqs]) if config.class_weighting else None
    if not config.class_weighting:
        class_weights([s.label for s in dataset])  # still reject single-class data

    tv, tl, ty = _pack(train_seqs)
    vv, vl, vy = _pack(val_seqs)
    params = init_model(hp, seed=int(rng.integers(2**31)))
    state = OptimizerState.for_params(params, config.lr, weight_decay=config.weight_decay)
    control = PlateauControl(config.lr, config.early_stop_patience, config.anneal_patience,
                             config.anneal_factor)
    best = params
    train_hist, val_hist, lr_hist = [], [], []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        state.lr = control.lr
        order = rng.permutation(len(ty))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            v, m = _slice(tv, tl, idx)
            logits, trace = forward(params, v, m, train=True, rng=rng)
            loss, dlogits = weighted_cross_entropy(logits, ty[idx], weights)
            grads = backward(params, trace, dlogits)
            params, state = adamw_step(params, grads, state)
            losses.append(loss)
        val_loss = _eval_loss(params, vv, vl, vy, weights)
        train_hist.append(float(np.mean(losses)))
        val_hist.append(val_loss)
        lr_hist.append(state.lr)
        if control.update(epoch, val_loss):
            best = params
        if on_epoch is not None:
            on_epoch(epoch, train_hist[-1], val_loss)
        if control.should_stop:
            break
    return TrainedModel(best, control.best_epoch, epoch, train_hist, val_hist, lr_hist)


# -- patients, features and folds -------------------------------------------

@dataclass(frozen=True)
class PatientData:
    patient_id: str
    raw: np.ndarray  # (2, MAX_LEN) unscaled daily features
    dropout: bool    # True = non-adherent


def prepare(cohort: Cohort, definition: AdherenceDefinition = ORIGINAL,
            horizon: int = MAX_LEN) -> list[PatientData]:
    out = []
    for rec in cohort:
        feats = daily_features(rec, horizon)
        out.append(PatientData(rec.patient_id, feats.matrix(), not label(rec, definition).adherent))
    return out


def sequences_for(patients: Sequence[PatientData], scaler: Scaler,
                  lengths: Sequence[int] = ALL_DAYS) -> list[FeatureSequence]:
    seqs = []
    for p in patients:
        scaled = scaler.transform(p.raw)
        seqs.extend(FeatureSequence(scaled[:, :t].copy(), p.dropout, p.patient_id) for t in lengths)
    return seqs


def fit_scaler_on(patients: Sequence[PatientData]) -> Scaler:
    return fit_scaler([DailyFeatures(p.raw[0], p.raw[1]) for p in patients])


def predict_days(params: ModelParameters, scaler: Scaler, patients: Sequence[PatientData],
                 days: Sequence[int] = ALL_DAYS) -> np.ndarray:
    """(n_patients, n_days) probability of non-adherence from each day's prefix."""
    scaled = np.stack([scaler.transform(p.raw) for p in patients])
    out = np.empty((len(patients), len(days)))
    for j, d in enumerate(days):
        logits, _ = forward(params, np.ascontiguousarray(scaled[:, :, :d]),
                            np.ones((len(patients), d), dtype=bool))
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        out[:, j] = e[:, 1] / e.sum(axis=1)
    return out


@dataclass
class FoldResult:
    run: int
    fold: int
    patient_ids: list[str]
    truth: np.ndarray
    days: tuple[int, ...]
    scores: np.ndarray
    best_epoch: int
    epochs_run: int
    train_loss: list[float] = field(repr=False)
    val_loss: list[float] = field(repr=False)
    train_ids: list[str] = field(repr=False, default_factory=list)
    params: ModelParameters | None = field(repr=False, default=None)
    scaler: Scaler | None = field(repr=False, default=None)

    @property
    def predictions(self) -> np.ndarray:
        return self.scores >= 0.5


def fit_and_predict(train_patients: Sequence[PatientData], test_patients: Sequence[PatientData],
                    config: TrainConfig, hp: HyperParams,
                    train_lengths: Sequence[int] = ALL_DAYS,
                    eval_days: Sequence[int] = ALL_DAYS) -> tuple[TrainedModel, Scaler, np.ndarray]:
    scaler = fit_scaler_on(train_patients)
    model = train(sequences_for(train_patients, scaler, train_lengths), config, hp)
    return model, scaler, predict_days(model.params, scaler, test_patients, eval_days)


def fold_assignment(n: int, n_folds: int, rng: np.random.Generator) -> list[np.ndarray]:
    if not 2 <= n_folds <= n:
        raise ValueError(f"need 2 <= n_folds <= {n}")
    return [np.sort(f) for f in np.array_split(rng.permutation(n), n_folds)]


def _fold_job(args) -> FoldResult:
    (run, fold, train_p, test_p, config, hp, train_lengths, eval_days, keep) = args
    model, scaler, scores = fit_and_predict(train_p, test_p, config, hp, train_lengths, eval_days)
    log.info("run %d fold %d: best epoch %d of %d", run, fold, model.best_epoch, model.epochs_run)
    return FoldResult(run, fold, [p.patient_id for p in test_p],
                      np.array([p.dropout for p in test_p]), tuple(eval_days), scores,
                      model.best_epoch, model.epochs_run, model.train_loss, model.val_loss,
                      [p.patient_id for p in train_p],
                      model.params if keep else None, scaler if keep else None)


def _run_jobs(jobs: list, n_workers: int) -> list[FoldResult]:
    if n_workers <= 1 or len(jobs) <= 1:
        return [_fold_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_fold_job, jobs))


def cross_validate(main: Sequence[PatientData], exploration: Sequence[PatientData],
                   config: TrainConfig, hp: HyperParams | None = None, *,
                   n_runs: int = 20, n_folds: int = 10, reseed_folds: bool = True,
                   train_lengths: Sequence[int] = ALL_DAYS,
                   eval_days: Sequence[int] = ALL_DAYS,
                   jobs: int = 1, keep_models: bool = False) -> list[FoldResult]:
    """Repeated k-fold CV over ``main``; ``exploration`` joins every training set
    but is never tested. Results are ordered by (run, fold)."""
    hp = hp or HyperParams()
    main = list(main)
    exploration = list(exploration)
    shared = {p.patient_id for p in main} & {p.patient_id for p in exploration}
    if shared:
        raise OverlapError(f"{len(shared)} patients are in both cohorts")
    work = []
    for run in range(n_runs):
        fold_rng = np.random.default_rng(derive_seed(config.seed, _FOLDS, run if reseed_folds else 0))
        for fold, test_idx in enumerate(fold_assignment(len(main), n_folds, fold_rng)):
            test_set = set(test_idx.tolist())
            test_p = [main[i] for i in test_idx]
            train_p = [p for i, p in enumerate(main) if i not in test_set] + exploration
            cfg = replace(config, seed=derive_seed(config.seed, _TRAIN, run, fold))
            work.append((run, fold, train_p, test_p, cfg, hp, tuple(train_lengths),
                         tuple(eval_days), keep_models))
    return _run_jobs(work, jobs)


# -- random search ----------------------------------------------------------

POW2 = (1, 2, 4, 8, 16, 32, 64, 128)


@dataclass(frozen=True)
class SearchSpace:
    lr_range: tuple[float, float] = (1e-5, 1e0)
    d_model: tuple[int, ...] = POW2
    n_heads: tuple[int, ...] = (1, 2, 4, 8)
    ffn_hidden: tuple[int, ...] = POW2
    dropout_rate: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    n_layers: tuple[int, ...] = (1, 2, 3)
    n_candidates: int = 100

    def sample_lr(self, rng: np.random.Generator, size=None):
        lo, hi = np.log10(self.lr_range[0]), np.log10(self.lr_range[1])
        return 10.0 ** rng.uniform(lo, hi, size=size)

    def sample(self, rng: np.random.Generator) -> tuple[HyperParams, float]:
        lr = float(self.sample_lr(rng))
        while True:
            d = int(rng.choice(self.d_model))
            h = int(rng.choice(self.n_heads))
            if d % h == 0:
                break
        hp = HyperParams(d_model=d, n_heads=h,
                         ffn_hidden=int(rng.choice(self.ffn_hidden)),
                         dropout_rate=float(rng.choice(self.dropout_rate)),
                         n_layers=int(rng.choice(self.n_layers)))
        return hp, lr


@dataclass
class SearchResult:
    best_hp: HyperParams
    best_lr: float
    leaderboard: list[dict]


def candidates(space: SearchSpace, seed: int) -> list[tuple[HyperParams, float]]:
    rng = np.random.default_rng(derive_seed(seed, _SEARCH))
    return [space.sample(rng) for _ in range(space.n_candidates)]


def score_candidate(patients: Sequence[PatientData], hp: HyperParams, config: TrainConfig,
                    n_folds: int = 5, train_lengths: Sequence[int] = ALL_DAYS,
                    eval_days: Sequence[int] = ALL_DAYS) -> float:
    """Mean over days of the fold-pooled balanced accuracy from k-fold CV."""
    folds = cross_validate(patients, [], config, hp, n_runs=1, n_folds=n_folds,
                           train_lengths=train_lengths, eval_days=eval_days)
    _, matrix = run_day_matrix(folds, list(eval_days), "first")
    return float(np.nanmean(matrix))


def random_search(exploration: Sequence[PatientData], space: SearchSpace | None = None,
                  seed: int = 0, config: TrainConfig | None = None, n_folds: int = 5,
                  train_lengths: Sequence[int] = ALL_DAYS,
                  eval_days: Sequence[int] = ALL_DAYS,
                  on_candidate: Callable[[dict], None] | None = None) -> SearchResult:
    """Score each sampled candidate by CV on the exploration cohort; best mean wins."""
    space = space or SearchSpace()
    config = config or TrainConfig()
    if not exploration:
        raise ValueError("exploration cohort is empty")
    board = []
    for i, (hp, lr) in enumerate(candidates(space, seed)):
        cfg = replace(config, lr=lr, seed=derive_seed(seed, _CANDIDATE, i))
        score = score_candidate(exploration, hp, cfg, n_folds, train_lengths, eval_days)
        row = {"rank": None, "candidate": i, "lr": lr, **hp.to_dict(), "score": score}
        board.append(row)
        if on_candidate is not None:
            on_candidate(row)
    order = sorted(range(len(board)), key=lambda k: (-np.nan_to_num(board[k]["score"], nan=-1.0), k))
    for rank, k in enumerate(order, start=1):
        board[k]["rank"] = rank
    top = board[order[0]]
    best_hp = HyperParams(**{k: top[k] for k in HyperParams().to_dict()})
    return SearchResult(best_hp, top["lr"], sorted(board, key=lambda r: r["rank"]))


# -- ablations --------------------------------------------------------------

@dataclass
class AblationResult:
    kind: str
    days: list[int]
    arms: dict[str, np.ndarray]  # arm -> (n_runs, n_days) balanced accuracies
    folds: dict[str, list[FoldResult]] = field(repr=False)

    def mann_whitney(self) -> dict[int, dict]:
        a, b = list(self.arms)
        out = {}
        for j, d in enumerate(self.days):
            res = mann_whitney_u(self.arms[a][:, j], self.arms[b][:, j])
            out[d] = {"day": d, "arm_a": a, "arm_b": b, "u": res.u, "p_value": res.p_value}
        return out


def run_ablation(kind: str, main: Cohort, exploration: Cohort, config: TrainConfig,
                 hp: HyperParams | None = None, *,
                 definition: AdherenceDefinition = ORIGINAL,
                 alt_definition: AdherenceDefinition | None = None,
                 length: int | None = None,
                 fixed_hp: HyperParams | None = None, fixed_lr: float | None = None,
                 n_runs: int = 20, n_folds: int = 10, reseed_folds: bool = True,
                 pool: str = "first", jobs: int = 1) -> AblationResult:
    """Run the two arms of an ablation with identical seeds.

    kind: ``weighting`` (class weighting on vs off), ``fixed_length`` (all
    prefix lengths vs only ``length``, both evaluated at ``length``), or
    ``adherence_def`` (``definition`` vs ``alt_definition`` labels).
    """
    hp = hp or HyperParams()
    kw = dict(n_runs=n_runs, n_folds=n_folds, reseed_folds=reseed_folds, jobs=jobs)
    arms_spec: list[tuple[str, list, list, TrainConfig, HyperParams, tuple, tuple]] = []
    m, e = prepare(main, definition), prepare(exploration, definition)
    if kind == "weighting":
        days = ALL_DAYS
        arms_spec.append(("weighted", m, e, replace(config, class_weighting=True), hp, ALL_DAYS, days))
        arms_spec.append(("unweighted", m, e, replace(config, class_weighting=False), hp, ALL_DAYS, days))
    elif kind == "fixed_length":
        if length is None or not MIN_LEN <= length <= MAX_LEN:
            raise ValueError(f"fixed_length needs a length in [{MIN_LEN}, {MAX_LEN}]")
        days = (length,)
        fcfg = replace(config, lr=fixed_lr) if fixed_lr is not None else config
        arms_spec.append(("all_lengths", m, e, config, hp, ALL_DAYS, days))
        arms_spec.append((f"fixed_{length}", m, e, fcfg, fixed_hp or hp, days, days))
    elif kind == "adherence_def":
        if alt_definition is None:
            raise ValueError("adherence_def ablation needs alt_definition")
        days = ALL_DAYS
        ma, ea = prepare(main, alt_definition), prepare(exploration, alt_definition)
        arms_spec.append(("reference", m, e, config, hp, ALL_DAYS, days))
        arms_spec.append(("alternative", ma, ea, config, hp, ALL_DAYS, days))
    else:
        raise ValueError(f"unknown ablation kind {kind!r}")
    arms, folds = {}, {}
    for name, mm, ee, cfg, h, lengths, ev in arms_spec:
        res = cross_validate(mm, ee, cfg, h, train_lengths=lengths, eval_days=ev, **kw)
        _, arms[name] = run_day_matrix(res, list(ev), pool)
        folds[name] = res
    return AblationResult(kind, list(days), arms, folds)
