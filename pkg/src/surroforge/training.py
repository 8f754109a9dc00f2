"""Adam, the epoch loop with difficulty schedules, patient-level k-fold CV, grid search."""

import itertools
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .errors import DivergenceError, InvalidDataset, InvalidParameter, ShapeError, SurroforgeError
from .evaluation import predict_full, preprocess_windows
from .models import ModelSpec, build
from .rng import CounterRNG
from .signal_core import safe_pearson_r, window_signal

STRATEGIES = ("none", "finetune_difficult", "interleave", "curriculum")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 100
    window_len: int = None  # defaults to the model's window
    stride: int = None  # defaults to window_len
    preprocessing: str = "none"  # "none" | "smooth:K" | "z_normalize"
    seed: int = 0
    determinism: bool = True
    finetune_epochs: int = None  # defaults to epochs
    finetune_lr_factor: float = 1.0 / 3.0

    def validate(self):
        if not self.lr >= 0:
            raise InvalidParameter("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidParameter("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidParameter("batch_size must be >= 1 and epochs >= 0")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParameter(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class DifficultyPlan:
    strategy: str = "none"
    difficult: frozenset = frozenset()

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidParameter(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")

    @classmethod
    def from_cohort(cls, strategy, records):
        return cls(strategy, frozenset(r.patient_id for r in records if r.difficult))


# -- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, t, cfg):
    """One bias-corrected Adam update; returns new parameter arrays and updates ``state``."""
    if t < 1:
        raise InvalidParameter("Adam step count starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"adam_step: gradient {np.shape(g)} vs parameter {np.shape(p)} for {name}")
        m = state.m.get(name, 0.0)
        v = state.v.get(name, 0.0)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        out[name] = p - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
    state.t = t
    return out


class Adam:
    """Applies :func:`adam_step` to a model's parameter tensors in place."""

    def __init__(self, model, cfg):
        self.model = model
        self.cfg = cfg
        self.state = AdamState()

    def step(self):
        params = {n: p.data for n, p in self.model.params.items()}
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for n, p in self.model.params.items()}
        new = adam_step(params, grads, self.state, self.state.t + 1, self.cfg)
        for n, p in self.model.params.items():
            p.data = new[n]


# -- datasets ------------------------------------------------------------------

@dataclass
class WindowDataset:
    inputs: np.ndarray  # (n, L), preprocessed
    targets: np.ndarray  # (n, L)
    patient_ids: np.ndarray  # (n,) object
    difficult: np.ndarray  # (n,) bool
    score: np.ndarray  # (n,) per-window difficulty score of its patient

    def __len__(self):
        return len(self.inputs)

    def subset(self, mask):
        return WindowDataset(self.inputs[mask], self.targets[mask], self.patient_ids[mask],
                             self.difficult[mask], self.score[mask])


def difficulty_scores(records):
    """Rank of breathing cycles plus rank of (1 - baseline R); larger is harder."""
    cycles = rankdata([r.breathing_cycles for r in records])
    weak = rankdata([1.0 - r.baseline_r for r in records])
    return {r.patient_id: float(c + w) for r, c, w in zip(records, cycles, weak)}


def make_windows(records, window_len, stride=None, preprocessing="none", difficult=None):
    """Paired (COM -> EMT) training windows; trailing remainders are dropped."""
    if not records:
        raise InvalidDataset("no records to window")
    stride = stride or window_len
    scores = difficulty_scores(records)
    hard = {r.patient_id for r in records if r.difficult} if difficult is None else set(difficult)
    xs, ys, pids = [], [], []
    for rec in records:
        xw = window_signal(rec.com_combined, window_len, stride, "drop")
        yw = window_signal(rec.emt, window_len, stride, "drop")
        xs.append(preprocess_windows(xw.windows, preprocessing))
        ys.append(yw.windows)
        pids += [rec.patient_id] * len(xw)
    pids = np.array(pids, dtype=object)
    return WindowDataset(np.concatenate(xs), np.concatenate(ys), pids,
                         np.array([p in hard for p in pids], dtype=bool),
                         np.array([scores[p] for p in pids]))


# -- schedules -----------------------------------------------------------------

def _chunks(idx, size):
    return [idx[i:i + size] for i in range(0, len(idx), size)]


def batch_schedule(dataset, cfg, strategy, epoch, cursor=None):
    """Ordered ``(pool, indices)`` batches for one epoch (1-based).

    ``pool`` is ``"all"``, ``"regular"`` or ``"difficult"``. ``cursor`` is a
    one-element list holding the interleave position in the cycling difficult
    pool, carried across epochs.
    """
    n = len(dataset)
    rng = CounterRNG(cfg.seed).child(f"epoch{epoch}")
    if strategy == "curriculum" and epoch == 1:
        order = np.argsort(dataset.score, kind="stable")
        return [("all", b) for b in _chunks(order, cfg.batch_size)]
    if strategy != "interleave":
        return [("all", b) for b in _chunks(rng.permutation(n), cfg.batch_size)]

    hard_idx = np.flatnonzero(dataset.difficult)
    easy_idx = np.flatnonzero(~dataset.difficult)
    if hard_idx.size == 0 or easy_idx.size == 0:
        return [("all", b) for b in _chunks(rng.permutation(n), cfg.batch_size)]
    easy = _chunks(easy_idx[rng.child("regular").permutation(easy_idx.size)], cfg.batch_size)
    # The difficult pool has a fixed order per run so the cursor can cycle through it.
    hard_order = hard_idx[CounterRNG(cfg.seed).child("difficult-pool").permutation(hard_idx.size)]
    hard = _chunks(hard_order, cfg.batch_size)
    cursor = cursor if cursor is not None else [0]
    out = []
    for b in easy:
        out.append(("regular", b))
        out.append(("difficult", hard[cursor[0] % len(hard)]))
        cursor[0] += 1
    return out


# -- training loop ---------------------------------------------------------------

@dataclass
class History:
    rows: list = field(default_factory=list)  # (epoch, train_mse, val_r)
    best_epoch: int = 0
    best_val_r: float = math.nan
    best_params: dict = None

    def csv(self):
        lines = ["epoch,train_mse,val_r"]
        for e, mse, r in self.rows:
            lines.append(f"{e},{mse:.17g}," + ("undefined" if math.isnan(r) else f"{r:.17g}"))
        return "\n".join(lines) + "\n"


def dataset_mse(model, dataset, batch_size=256):
    pred = model.predict(dataset.inputs, batch_size)
    diff = pred - dataset.targets
    return float(np.mean(diff * diff))


def validation_r(model, records, window_len, preprocessing):
    if not records:
        return math.nan
    rs = [safe_pearson_r(predict_full(model, r.com_combined, window_len, preprocessing), r.emt) for r in records]
    rs = [r for r in rs if not math.isnan(r)]
    return float(np.mean(rs)) if rs else math.nan


def _run_epochs(model, dataset, cfg, strategy, epochs, history, val_records, first_epoch):
    opt = Adam(model, cfg)
    cursor = [0]
    window_len = model.spec.window_len
    for e in range(first_epoch, first_epoch + epochs):
        local_epoch = e - first_epoch + 1
        for b, (_, idx) in enumerate(batch_schedule(dataset, cfg, strategy, local_epoch, cursor)):
            model.zero_grad()
            loss = T.mse_loss(model(dataset.inputs[idx]), dataset.targets[idx])
            if not np.isfinite(loss.data):
                raise DivergenceError(e, b)
            T.backward(loss)
            opt.step()
        _log_epoch(model, dataset, cfg, history, val_records, e, window_len)


def _log_epoch(model, dataset, cfg, history, val_records, epoch, window_len):
    val_r = validation_r(model, val_records, window_len, cfg.preprocessing)
    history.rows.append((epoch, dataset_mse(model, dataset), val_r))
    if not math.isnan(val_r) and (math.isnan(history.best_val_r) or val_r > history.best_val_r):
        history.best_epoch, history.best_val_r = epoch, val_r
        history.best_params = {n: p.data.copy() for n, p in model.params.items()}


def train(model, dataset, cfg, plan=None, val_records=None):
    """Train ``model`` in place with MSE + Adam; returns ``(model, history)``.

    History row 0 is the untrained model. Training runs a fixed number of
    epochs; the best-validation parameters are kept on the history only.
    """
    cfg.validate()
    plan = plan or DifficultyPlan()
    if dataset is None or len(dataset) == 0:
        raise InvalidDataset("training dataset is empty")
    if dataset.inputs.shape[1] != model.spec.window_len:
        raise InvalidDataset(f"window length {dataset.inputs.shape[1]} != model window {model.spec.window_len}")
    if plan.difficult:
        dataset.difficult = np.array([p in plan.difficult for p in dataset.patient_ids], dtype=bool)
    history = History()
    _log_epoch(model, dataset, cfg, history, val_records, 0, model.spec.window_len)

    base = "none" if plan.strategy == "finetune_difficult" else plan.strategy
    _run_epochs(model, dataset, cfg, base, cfg.epochs, history, val_records, 1)
    if plan.strategy == "finetune_difficult" and dataset.difficult.any():
        tuned = replace(cfg, lr=cfg.lr * cfg.finetune_lr_factor)
        n_ft = cfg.epochs if cfg.finetune_epochs is None else cfg.finetune_epochs
        _run_epochs(model, dataset.subset(dataset.difficult), tuned, "none", n_ft, history,
                    val_records, cfg.epochs + 1)
    if history.best_params is None:
        history.best_epoch = history.rows[-1][0]
        history.best_params = {n: p.data.copy() for n, p in model.params.items()}
    return model, history


# -- cross-validation --------------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    assignment: dict  # patient_id -> fold

    def val_ids(self, fold):
        return sorted(p for p, f in self.assignment.items() if f == fold)

    def train_ids(self, fold):
        return sorted(p for p, f in self.assignment.items() if f != fold)

    def sizes(self):
        return [sum(1 for f in self.assignment.values() if f == i) for i in range(self.k)]

    def assert_disjoint(self, fold, train_patient_ids):
        leaked = {p for p in train_patient_ids if self.assignment.get(p) == fold}
        if leaked:
            raise InvalidDataset(f"validation patients leaked into fold {fold} training: {sorted(leaked)}")

    def to_dict(self):
        return {"k": self.k, "assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["k"]), {str(p): int(f) for p, f in d["assignment"].items()})


def kfold_split(patient_ids, k=5, seed=0):
    """Seeded shuffle then round-robin fold assignment."""
    ids = list(patient_ids)
    if k < 1 or k > len(ids):
        raise InvalidParameter(f"cannot split {len(ids)} patients into {k} folds")
    perm = CounterRNG(seed).child("kfold").permutation(len(ids))
    return FoldPlan(k, {ids[j]: pos % k for pos, j in enumerate(perm)})


@dataclass
class FoldResult:
    fold: int
    model: object
    history: History
    train_r: float
    val_r: float


def train_fold(records, spec, cfg, fold_plan, fold, strategy="none"):
    by_id = {r.patient_id: r for r in records}
    train_recs = [by_id[p] for p in fold_plan.train_ids(fold)]
    val_recs = [by_id[p] for p in fold_plan.val_ids(fold)]
    window_len = cfg.window_len or spec.window_len
    data = make_windows(train_recs, window_len, cfg.stride, cfg.preprocessing)
    fold_plan.assert_disjoint(fold, set(data.patient_ids))
    model = build(spec, cfg.seed)
    plan = DifficultyPlan.from_cohort(strategy, train_recs)
    model, hist = train(model, data, cfg, plan, val_recs)
    return FoldResult(fold, model, hist,
                      validation_r(model, train_recs, window_len, cfg.preprocessing),
                      validation_r(model, val_recs, window_len, cfg.preprocessing))


def cross_validate(records, spec, cfg, fold_plan, strategy="none", jobs=1):
    """Train one model per fold; results come back ordered by fold index."""
    folds = range(fold_plan.k)
    if jobs <= 1:
        return [train_fold(records, spec, cfg, fold_plan, f, strategy) for f in folds]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = {f: pool.submit(train_fold, records, spec, cfg, fold_plan, f, strategy) for f in folds}
        return [futures[f].result() for f in folds]


# -- grid search -------------------------------------------------------------------

GRID_KEYS = ("hidden_units", "layers", "lr", "preprocessing", "window_len")


@dataclass
class GridResult:
    config: dict
    val_r: float
    train_r: float
    n_params: int
    error: str = None
    overfit_flag: bool = False

    @property
    def gap(self):
        return self.train_r - self.val_r


def grid_search(space, records, k=5, base_cfg=None, seed=0):
    """Cross-validate every cell of a fully connected hyper-parameter grid.

    Results are ranked by mean validation R (descending), ties broken by fewer
    parameters then lower learning rate. Failing cells are kept with ``error``
    set and rank last. The cell with the largest train-minus-validation gap
    carries ``overfit_flag``.
    """
    if not space or any(len(v) == 0 for v in space.values()):
        raise InvalidParameter("grid search space must be non-empty")
    unknown = set(space) - set(GRID_KEYS)
    if unknown:
        raise InvalidParameter(f"unknown grid keys {sorted(unknown)}")
    base_cfg = base_cfg or TrainConfig(seed=seed)
    defaults = {"hidden_units": 20, "layers": 1, "lr": base_cfg.lr,
                "preprocessing": base_cfg.preprocessing, "window_len": 50}
    keys = [k_ for k_ in GRID_KEYS if k_ in space]
    plan = kfold_split([r.patient_id for r in records], k, seed)
    results = []
    for values in itertools.product(*(space[k_] for k_ in keys)):
        cell = dict(defaults, **dict(zip(keys, values)))
        spec = ModelSpec("fully_connected", cell["window_len"], cell["hidden_units"], cell["layers"])
        cfg = replace(base_cfg, lr=cell["lr"], preprocessing=cell["preprocessing"], window_len=cell["window_len"])
        try:
            spec.validate()
            folds = cross_validate(records, spec, cfg, plan)
            results.append(GridResult(cell, float(np.mean([f.val_r for f in folds])),
                                      float(np.mean([f.train_r for f in folds])), build(spec).n_params))
        except (SurroforgeError, ValueError, ArithmeticError) as exc:
            results.append(GridResult(cell, math.nan, math.nan, 0, f"{type(exc).__name__}: {exc}"))
    ok = [r for r in results if r.error is None and not math.isnan(r.gap)]
    if ok:
        max(ok, key=lambda r: r.gap).overfit_flag = True
    return sorted(results, key=lambda r: (r.error is not None or math.isnan(r.val_r),
                                          -(r.val_r if not math.isnan(r.val_r) else -math.inf),
                                          r.n_params, r.config["lr"]))


def config_to_dict(cfg):
    return asdict(cfg)
