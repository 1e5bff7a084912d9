"""Step-supervised imitation training on teacher traces, plus evaluation.

Each trace transition is a supervised example: the model receives the teacher
state at step t (teacher forcing, probability configurable) and is scored
against step t+1 with a three-part loss (masked distance MSE, predecessor
cross-entropy, reached/reach BCE).  Graphs are processed individually and
gradients averaged, so mixed sizes batch without padding.

Evaluation always runs free rollouts: the model's own hardened predictions
feed the next step, and the final step is compared to the teacher's output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .graphs import FAMILY_KINDS, GraphFamily, ensure_source_reaches, generate
from .optim import Adam
from .reasoner import (
    GraphStructure,
    ReasonerConfig,
    ReasonerParams,
    SoftHintStep,
    init_reasoner_params,
    rollout,
    step_model,
)
from .rng import substream
from .teachers import (
    BELLMAN_FORD,
    BFS,
    TEACHER_NAMES,
    AbstractInput,
    HintStep,
    Trace,
    bellman_ford_trace,
    bfs_trace,
    check_postcondition,
)
from .tensor import NumericsError, Tensor

_TRACE_FNS = {BELLMAN_FORD: bellman_ford_trace, BFS: bfs_trace}


class DivergenceError(RuntimeError):
    """Training hit non-finite numbers; carries the last good checkpoint."""

    def __init__(self, message: str, params: ReasonerParams, metrics: "Metrics"):
        super().__init__(message)
        self.params = params
        self.metrics = metrics


@dataclass(frozen=True)
class TrainConfig:
    train_size: int = 1000
    val_size: int = 200
    n_lo: int = 8
    n_hi: int = 16
    epochs: int = 12
    batch_size: int = 8
    lr: float = 3e-3
    lr_decay: float = 1.0  # per-epoch factor; 1.0 keeps the rate constant
    seed: int = 0
    tf_prob: float = 1.0  # probability of feeding the teacher state at each step
    w_dist: float = 1.0
    w_pred: float = 1.0
    w_reach: float = 1.0
    family: str = "erdos_renyi"
    reasoner: ReasonerConfig = field(default_factory=ReasonerConfig)

    def __post_init__(self):
        if self.train_size < 1 or self.val_size < 1:
            raise ValueError("dataset sizes must be positive")
        if not 1 <= self.n_lo <= self.n_hi:
            raise ValueError(f"bad graph size range [{self.n_lo}, {self.n_hi}]")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1, lr > 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if not 0.0 <= self.tf_prob <= 1.0:
            raise ValueError(f"teacher-forcing probability {self.tf_prob} outside [0, 1]")
        if self.family not in FAMILY_KINDS:
            raise ValueError(f"unknown graph family {self.family!r}")


@dataclass
class Metrics:
    teacher: str
    count: int = 0
    pred_accuracy: float = 0.0
    reached_accuracy: float = 0.0
    reach_accuracy: float = 0.0
    dist_mae: float = 0.0
    exact_match_rate: float = 0.0
    postcondition_rate: float = 0.0
    train_loss_curve: list = field(default_factory=list)
    val_accuracy_curve: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "teacher": self.teacher,
            "count": self.count,
            "pred_accuracy": self.pred_accuracy,
            "reached_accuracy": self.reached_accuracy,
            "reach_accuracy": self.reach_accuracy,
            "dist_mae": self.dist_mae,
            "exact_match_rate": self.exact_match_rate,
            "postcondition_rate": self.postcondition_rate,
            "train_loss_curve": list(self.train_loss_curve),
            "val_accuracy_curve": list(self.val_accuracy_curve),
        }


def selection_metric(teacher: str, metrics: Metrics) -> float:
    """Validation quantity driving best-checkpoint selection."""
    return metrics.pred_accuracy if teacher == BELLMAN_FORD else metrics.reach_accuracy


# -- datasets --------------------------------------------------------------------


def make_trace_dataset(
    teacher: str,
    count: int,
    n_lo: int,
    n_hi: int,
    family: str,
    rng: np.random.Generator,
) -> list[Trace]:
    """Seeded training/eval inputs: near-connected graphs, covered sources."""
    if teacher not in TEACHER_NAMES:
        raise ValueError(f"unknown teacher {teacher!r}")
    fam = GraphFamily(family)
    traces = []
    for _ in range(count):
        n = int(rng.integers(n_lo, n_hi + 1))
        g = generate(fam, n, rng)
        source = int(rng.integers(n))
        g = ensure_source_reaches(g, source, fam, rng)
        traces.append(_TRACE_FNS[teacher](AbstractInput(graph=g, source=source)))
    return traces


# -- loss -------------------------------------------------------------------------


def step_loss(
    soft: SoftHintStep,
    target: HintStep,
    structure: GraphStructure,
    w_dist: float = 1.0,
    w_pred: float = 1.0,
    w_reach: float = 1.0,
) -> Tensor:
    """Per-node-averaged supervised loss of one predicted step.

    Distance MSE is masked to the target's reached nodes (standardized units);
    predecessor cross-entropy runs over each node's candidate set; BCE covers
    both binary heads.  Linear in the three weights.
    """
    n = structure.n
    reached = target.reached.astype(np.float64).reshape(-1, 1)
    k = float(reached.sum())  # >= 1: the source is always reached

    tgt = Tensor(target.dist.reshape(-1, 1) / structure.scale)
    diff = T.add(soft.dist, T.neg(tgt))
    mse = T.mul(T.reduce_sum(T.mul(T.mul(diff, diff), Tensor(reached))), Tensor(1.0 / k))

    cols = structure.target_columns(target.pred)
    ce_rows = T.softmax_cross_entropy_rows(soft.pred_scores, cols, structure.cand_mask)
    ce = T.mul(T.reduce_sum(ce_rows), Tensor(1.0 / n))

    bce = T.add(
        T.reduce_sum(T.bce_with_logits(soft.reached_logits, reached)),
        T.reduce_sum(
            T.bce_with_logits(soft.reach_logits, target.reach.astype(np.float64).reshape(-1, 1))
        ),
    )
    bce = T.mul(bce, Tensor(1.0 / (2 * n)))

    return T.add(
        T.add(T.mul(Tensor(float(w_dist)), mse), T.mul(Tensor(float(w_pred)), ce)),
        T.mul(Tensor(float(w_reach)), bce),
    )


def trace_loss(
    params: ReasonerParams,
    trace: Trace,
    structure: GraphStructure,
    config: TrainConfig,
    forcing_rng: np.random.Generator | None = None,
) -> Tensor:
    """Sum of step losses over every transition of one trace."""
    total = None
    current = trace.steps[0]
    for t in range(len(trace.steps) - 1):
        soft = step_model(params, structure, current)
        term = step_loss(soft, trace.steps[t + 1], structure,
                         config.w_dist, config.w_pred, config.w_reach)
        total = term if total is None else T.add(total, term)
        if config.tf_prob >= 1.0 or forcing_rng is None:
            current = trace.steps[t + 1]
        elif forcing_rng.random() < config.tf_prob:
            current = trace.steps[t + 1]
        else:
            current = soft.harden()  # feedback is non-differentiable by design
    return total


# -- evaluation --------------------------------------------------------------------


def _sorted_mean(values: np.ndarray) -> float:
    # value-sorted sum: identical result for any presentation order
    if values.size == 0:
        return 0.0
    return float(np.sort(values, kind="stable").sum() / values.size)


def evaluate(
    params: ReasonerParams | None,
    teacher: str,
    dataset: list[Trace],
    step_budget: int | None = None,
    oracle: bool = False,
) -> Metrics:
    """Free-rollout comparison against teacher outputs (no forcing).

    oracle=True replays the teacher's own final step as the prediction, which
    pins the metric ceiling (all accuracies 1.0, MAE 0).
    """
    if not dataset:
        raise ValueError("evaluate needs a non-empty dataset")
    if teacher not in TEACHER_NAMES:
        raise ValueError(f"unknown teacher {teacher!r}")
    node_total = 0
    pred_hits = 0
    reached_hits = 0
    reach_hits = 0
    exact = 0
    post_ok = 0
    abs_errors = []
    for trace in dataset:
        want = trace.output
        if oracle:
            got = want
        else:
            structure = GraphStructure.build(trace.input)
            budget = step_budget if step_budget is not None else structure.n
            got = rollout(params, trace.input, step_budget=budget, structure=structure).output
        n = trace.input.graph.n
        node_total += n
        pred_hits += int((got.pred == want.pred).sum())
        reached_hits += int((got.reached == want.reached).sum())
        reach_hits += int((got.reach == want.reach).sum())
        abs_errors.append(np.abs(got.dist - want.dist))
        discrete_match = (
            (got.pred == want.pred).all()
            and (got.reached == want.reached).all()
            and (got.reach == want.reach).all()
        )
        exact += int(discrete_match)
        post_ok += int(bool(check_postcondition(teacher, trace.input, got)))
    return Metrics(
        teacher=teacher,
        count=len(dataset),
        pred_accuracy=pred_hits / node_total,
        reached_accuracy=reached_hits / node_total,
        reach_accuracy=reach_hits / node_total,
        dist_mae=_sorted_mean(np.concatenate(abs_errors)),
        exact_match_rate=exact / len(dataset),
        postcondition_rate=post_ok / len(dataset),
    )


def chance_pred_accuracy(dataset: list[Trace]) -> float:
    """Expected per-node predecessor accuracy of a uniform guess over
    {incoming neighbors, self}, computed from the evaluation dataset."""
    inv = []
    for trace in dataset:
        g = trace.input.graph
        indeg = np.bincount(g.edges[:, 1], minlength=g.n) if g.num_edges else np.zeros(g.n)
        inv.append(1.0 / (indeg + 1.0))
    return _sorted_mean(np.concatenate(inv))


# -- training ----------------------------------------------------------------------


def _named_params(params: ReasonerParams, prefix: str = "") -> dict[str, Tensor]:
    return {prefix + k: v for k, v in params.tensors.items()}


def _train_on_batches(
    optimizer: Adam,
    params_by_teacher: dict[str, ReasonerParams],
    batches: list[tuple[str, list[tuple[Trace, GraphStructure]]]],
    config: TrainConfig,
    forcing_rng: np.random.Generator | None,
) -> dict[str, float]:
    """One epoch of alternating per-teacher batches; returns mean batch loss."""
    sums = {t: 0.0 for t in params_by_teacher}
    counts = {t: 0 for t in params_by_teacher}
    for teacher, batch in batches:
        params = params_by_teacher[teacher]
        optimizer.zero_grad()
        share = 1.0 / len(batch)
        batch_value = 0.0
        for trace, structure in batch:
            loss = trace_loss(params, trace, structure, config, forcing_rng)
            T.mul(loss, Tensor(share)).backward()
            batch_value += loss.data.item() * share
        if not np.isfinite(batch_value):
            raise NumericsError(f"non-finite training loss on teacher {teacher}")
        optimizer.step()
        sums[teacher] += batch_value
        counts[teacher] += 1
    return {t: (sums[t] / counts[t] if counts[t] else 0.0) for t in sums}


def _epoch_batches(order: np.ndarray, prepared: list, batch_size: int):
    return [
        [prepared[i] for i in order[k : k + batch_size]]
        for k in range(0, len(order), batch_size)
    ]


def train(
    teacher: str,
    config: TrainConfig,
    train_traces: list[Trace] | None = None,
    val_traces: list[Trace] | None = None,
) -> tuple[ReasonerParams, Metrics]:
    """Teacher-forced imitation training; returns best-validation parameters.

    Everything is derived from config.seed through named substreams, so a
    rerun reproduces metrics and checkpoints bit for bit.  Non-finite losses
    or gradients raise DivergenceError carrying the best checkpoint so far.
    """
    if teacher not in TEACHER_NAMES:
        raise ValueError(f"unknown teacher {teacher!r}")
    if train_traces is None:
        train_traces = make_trace_dataset(
            teacher, config.train_size, config.n_lo, config.n_hi,
            config.family, substream(config.seed, "data", teacher, "train"),
        )
    if val_traces is None:
        val_traces = make_trace_dataset(
            teacher, config.val_size, config.n_lo, config.n_hi,
            config.family, substream(config.seed, "data", teacher, "val"),
        )
    params = init_reasoner_params(config.reasoner, substream(config.seed, "init", teacher))
    optimizer = Adam(_named_params(params), lr=config.lr)
    shuffle_rng = substream(config.seed, "shuffle", teacher)
    forcing_rng = substream(config.seed, "forcing", teacher) if config.tf_prob < 1.0 else None
    prepared = [(tr, GraphStructure.build(tr.input)) for tr in train_traces]

    best_params = params.copy()
    best_metrics = evaluate(params, teacher, val_traces)
    best_sel = selection_metric(teacher, best_metrics)
    loss_curve: list[float] = []
    val_curve: list[float] = [best_sel]

    for epoch in range(config.epochs):
        optimizer.lr = config.lr * config.lr_decay**epoch
        order = shuffle_rng.permutation(len(prepared))
        batches = [
            (teacher, b) for b in _epoch_batches(order, prepared, config.batch_size)
        ]
        try:
            losses = _train_on_batches(
                optimizer, {teacher: params}, batches, config, forcing_rng
            )
            metrics = evaluate(params, teacher, val_traces)
        except NumericsError as exc:
            best_metrics.train_loss_curve = loss_curve
            best_metrics.val_accuracy_curve = val_curve
            raise DivergenceError(str(exc), best_params, best_metrics) from exc
        loss_curve.append(losses[teacher])
        sel = selection_metric(teacher, metrics)
        val_curve.append(sel)
        if sel > best_sel:
            best_sel = sel
            best_params = params.copy()
            best_metrics = metrics

    best_metrics.train_loss_curve = loss_curve
    best_metrics.val_accuracy_curve = val_curve
    return best_params, best_metrics


@dataclass
class MultitaskResult:
    params: dict[str, ReasonerParams]  # per teacher; processor values identical
    metrics: dict[str, Metrics]


def train_multitask(
    teachers: list[str],
    config: TrainConfig,
    datasets: dict[str, tuple[list[Trace], list[Trace]]] | None = None,
) -> MultitaskResult:
    """One shared processor, per-teacher encoders/decoders, alternating batches."""
    names = list(teachers)
    if len(set(names)) < 2:
        raise ValueError("multitask training needs at least 2 distinct teachers")
    for t in names:
        if t not in TEACHER_NAMES:
            raise ValueError(f"unknown teacher {t!r}")

    if datasets is None:
        datasets = {}
        for t in names:
            datasets[t] = (
                make_trace_dataset(t, config.train_size, config.n_lo, config.n_hi,
                                   config.family, substream(config.seed, "data", t, "train")),
                make_trace_dataset(t, config.val_size, config.n_lo, config.n_hi,
                                   config.family, substream(config.seed, "data", t, "val")),
            )

    shared = init_reasoner_params(config.reasoner, substream(config.seed, "init", "processor"))
    params_by_teacher: dict[str, ReasonerParams] = {}
    opt_params: dict[str, Tensor] = {k: v for k, v in shared.subset("processor.").items()}
    for t in names:
        own = init_reasoner_params(config.reasoner, substream(config.seed, "init", t))
        for k in shared.subset("processor."):
            own.tensors[k] = shared.tensors[k]  # same objects: sharing by construction
        params_by_teacher[t] = own
        for k, v in own.tensors.items():
            if not k.startswith("processor."):
                opt_params[f"{t}.{k}"] = v

    optimizer = Adam(opt_params, lr=config.lr)
    shuffle_rngs = {t: substream(config.seed, "shuffle", t) for t in names}
    forcing_rng = substream(config.seed, "forcing", "multitask") if config.tf_prob < 1.0 else None
    prepared = {
        t: [(tr, GraphStructure.build(tr.input)) for tr in datasets[t][0]] for t in names
    }

    def snapshot() -> dict[str, ReasonerParams]:
        return {t: params_by_teacher[t].copy() for t in names}

    def validate() -> dict[str, Metrics]:
        return {t: evaluate(params_by_teacher[t], t, datasets[t][1]) for t in names}

    best_params = snapshot()
    best_metrics = validate()
    best_sel = float(np.mean([selection_metric(t, best_metrics[t]) for t in names]))
    loss_curves: dict[str, list[float]] = {t: [] for t in names}
    val_curves: dict[str, list[float]] = {
        t: [selection_metric(t, best_metrics[t])] for t in names
    }

    for epoch in range(config.epochs):
        optimizer.lr = config.lr * config.lr_decay**epoch
        per_teacher = {
            t: _epoch_batches(shuffle_rngs[t].permutation(len(prepared[t])),
                              prepared[t], config.batch_size)
            for t in names
        }
        interleaved = []
        for k in range(max(len(b) for b in per_teacher.values())):
            for t in names:
                if k < len(per_teacher[t]):
                    interleaved.append((t, per_teacher[t][k]))
        try:
            losses = _train_on_batches(
                optimizer, params_by_teacher, interleaved, config, forcing_rng
            )
            epoch_metrics = validate()
        except NumericsError as exc:
            metrics = {
                t: replace(best_metrics[t],
                           train_loss_curve=loss_curves[t],
                           val_accuracy_curve=val_curves[t])
                for t in names
            }
            raise DivergenceError(str(exc), best_params[names[0]], metrics[names[0]]) from exc
        sels = []
        for t in names:
            loss_curves[t].append(losses[t])
            s = selection_metric(t, epoch_metrics[t])
            val_curves[t].append(s)
            sels.append(s)
        # one shared best epoch keeps the processor snapshot common to all tasks
        if float(np.mean(sels)) > best_sel:
            best_sel = float(np.mean(sels))
            best_params = snapshot()
            best_metrics = epoch_metrics

    for t in names:
        best_metrics[t].train_loss_curve = loss_curves[t]
        best_metrics[t].val_accuracy_curve = val_curves[t]
    return MultitaskResult(params=best_params, metrics=best_metrics)


def size_generalisation_eval(
    params: ReasonerParams | None,
    teacher: str,
    sizes=(16, 32, 64),
    count: int = 100,
    seed: int = 0,
    family: str = "erdos_renyi",
    oracle: bool = False,
) -> list[dict]:
    """Fresh seeded datasets at each size; one metrics row per size."""
    rows = []
    for n in sizes:
        dataset = make_trace_dataset(
            teacher, count, int(n), int(n), family, substream(seed, "sizegen", str(n))
        )
        metrics = evaluate(params, teacher, dataset, oracle=oracle)
        row = {"n": int(n), "chance_pred_accuracy": chance_pred_accuracy(dataset)}
        row.update(metrics.to_dict())
        del row["train_loss_curve"], row["val_accuracy_curve"]
        rows.append(row)
    return rows


def write_epoch_csv(path, metrics: Metrics) -> None:
    """One row per epoch: training loss and the validation selection metric."""
    lines = ["epoch,train_loss,val_accuracy"]
    for e, loss in enumerate(metrics.train_loss_curve):
        val = metrics.val_accuracy_curve[e + 1]  # entry 0 is pre-training
        lines.append(f"{e},{loss!r},{val!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
