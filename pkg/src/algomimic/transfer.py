"""Raw-feature routing around a frozen processor, and its competitors.

The task: every edge of an unweighted graph carries a feature vector that is
a noisy, partly-distracting function of a hidden positive weight, and the
label is the shortest-path predecessor tree under those hidden weights.
Three pipelines consume identical datasets:

  transfer  - small natural adapters (edge MLP in, predecessor scorer out)
              trained around the frozen pretrained processor,
  ablation  - the same adapters around a frozen randomly initialized
              processor, isolating what pretraining contributed,
  baseline  - a scalar bottleneck: regress each edge to one number with a
              tree-consistency objective, then hand the numbers to the exact
              classical solver.

The frozen parameters are guarded twice per optimizer step: no gradient may
reach them and their digest may not move.  Comparison rows carry the dataset
hash so an unfair mixture of inputs is an error, not a footnote.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .fsio import canonical_json, read_ndjson, sha256_bytes, write_ndjson
from .graphs import FAMILY_KINDS, Graph, GraphFamily, ensure_source_reaches, generate
from .optim import Adam
from .reasoner import (
    NODE_FEATURES,
    CheckpointError,
    GraphStructure,
    LatentState,
    ReasonerConfig,
    ReasonerParams,
    SoftHintStep,
    candidate_scores,
    glorot_tensors,
    hint_features,
    init_reasoner_params,
    load_tensor_file,
    mlp,
    params_digest,
    process,
    save_tensor_file,
)
from .rng import substream
from .teachers import AbstractInput, bellman_ford_trace, init_step
from .tensor import Tensor
from .training import Metrics, _sorted_mean

NATURAL_SCHEMA = "natural-dataset"
NATURAL_VERSION = 1

# The hidden-weight -> feature map is a fixed property of the task, shared by
# every dataset seed: graphs, weights and noise vary per seed while marginal
# feature statistics stay comparable.
FEATURE_MAP_ROOT = 1405

FEATURE_MAP_KINDS = ("smooth", "linear")
DISTRACTOR_KINDS = ("normal", "uniform")

METHODS = ("transfer", "ablation", "baseline")
DEFAULT_SIZES = (32, 64, 128, 512)


class FrozenProcessorError(RuntimeError):
    """A run mutated, or tried to differentiate, frozen parameters."""


class FairnessError(RuntimeError):
    """Compared methods did not consume byte-identical datasets."""


# -- natural task generation ---------------------------------------------------


@dataclass(frozen=True)
class NaturalGenConfig:
    count: int = 64
    n_lo: int = 8
    n_hi: int = 16
    d_nat: int = 16
    k: int = 4  # informative feature dims; the rest are distractors
    sigma: float = 0.25
    feature_map: str = "smooth"
    distractor: str = "normal"
    family: str = "erdos_renyi"
    weight_lo: float = 0.2
    weight_hi: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"dataset count must be positive, got {self.count}")
        if not 1 <= self.n_lo <= self.n_hi:
            raise ValueError(f"bad graph size range [{self.n_lo}, {self.n_hi}]")
        if not 1 <= self.k <= self.d_nat:
            raise ValueError(f"need 1 <= k <= d_nat, got k={self.k}, d_nat={self.d_nat}")
        if self.sigma < 0:
            raise ValueError(f"noise scale must be >= 0, got {self.sigma}")
        if self.feature_map not in FEATURE_MAP_KINDS:
            raise ValueError(f"unknown feature map {self.feature_map!r}")
        if self.distractor not in DISTRACTOR_KINDS:
            raise ValueError(f"unknown distractor distribution {self.distractor!r}")
        if self.family not in FAMILY_KINDS:
            raise ValueError(f"unknown graph family {self.family!r}")
        if not 0.0 < self.weight_lo <= self.weight_hi:
            raise ValueError(
                f"invalid weight range [{self.weight_lo}, {self.weight_hi}]"
            )


@dataclass
class NaturalSample:
    """Unweighted topology, raw edge features, and the target tree.

    The true weights behind x_edge and y are deliberately absent; recovering
    enough of them to route is the whole problem.
    """

    graph: Graph  # unit weights: topology only
    source: int
    x_edge: np.ndarray  # [E, d_nat] float64
    y: np.ndarray  # [n] int64 predecessor tree under the hidden weights


def _feature_map_coefficients(kind: str, d_nat: int, k: int) -> dict:
    rng = substream(FEATURE_MAP_ROOT, "feature-map", kind, str(int(d_nat)), str(int(k)))
    gain = rng.uniform(0.6, 1.6, size=k)
    sign = np.where(rng.random(k) < 0.5, -1.0, 1.0)
    if kind == "linear":
        return {"slope": gain * sign, "offset": rng.uniform(-1.0, 1.0, size=k)}
    return {
        "amp": gain,
        "freq": rng.uniform(1.0, 5.0, size=k),
        "phase": rng.uniform(0.0, 2.0 * np.pi, size=k),
        "slope": rng.uniform(0.5, 1.5, size=k) * sign,
        "offset": rng.uniform(-1.0, 1.0, size=k),
    }


def _informative_features(kind: str, coef: dict, w: np.ndarray) -> np.ndarray:
    col = w[:, None]
    if kind == "linear":
        return col * coef["slope"][None, :] + coef["offset"][None, :]
    return (
        coef["amp"][None, :] * np.sin(coef["freq"][None, :] * col + coef["phase"][None, :])
        + coef["slope"][None, :] * col
        + coef["offset"][None, :]
    )


def _draw_natural(config: NaturalGenConfig, rng: np.random.Generator) -> tuple[NaturalSample, np.ndarray]:
    """One sample plus its hidden weights (kept internal; tests peek at them)."""
    fam = GraphFamily(config.family, weight_lo=config.weight_lo, weight_hi=config.weight_hi)
    n = int(rng.integers(config.n_lo, config.n_hi + 1))
    g = generate(fam, n, rng)
    source = int(rng.integers(n))
    g = ensure_source_reaches(g, source, fam, rng)
    e = g.num_edges

    coef = _feature_map_coefficients(config.feature_map, config.d_nat, config.k)
    x = np.zeros((e, config.d_nat))
    x[:, : config.k] = _informative_features(config.feature_map, coef, g.weights)
    if config.sigma > 0:
        x[:, : config.k] += rng.normal(0.0, config.sigma, size=(e, config.k))
    rest = config.d_nat - config.k
    if rest:
        if config.distractor == "normal":
            x[:, config.k :] = rng.normal(0.0, 1.0, size=(e, rest))
        else:
            x[:, config.k :] = rng.uniform(-1.0, 1.0, size=(e, rest))

    y = bellman_ford_trace(AbstractInput(graph=g, source=source)).output.pred
    topology = Graph(n=g.n, edges=g.edges, weights=np.ones(e))
    sample = NaturalSample(graph=topology, source=source, x_edge=x, y=y.copy())
    return sample, g.weights


def generate_natural(
    config: NaturalGenConfig, rng: np.random.Generator | None = None
) -> list[NaturalSample]:
    """Seeded natural-input dataset; the hidden weights never leave here."""
    if rng is None:
        rng = substream(config.seed, "natural")
    return [_draw_natural(config, rng)[0] for _ in range(config.count)]


# -- dataset files and hashes ---------------------------------------------------


def _sample_record(s: NaturalSample) -> dict:
    return {
        "n": s.graph.n,
        "edges": s.graph.edges.tolist(),
        "source": int(s.source),
        "x_edge": s.x_edge.tolist(),
        "y": s.y.tolist(),
    }


def _record_sample(r: dict) -> NaturalSample:
    edges = np.asarray(r["edges"], dtype=np.int64).reshape(-1, 2)
    g = Graph(n=int(r["n"]), edges=edges, weights=np.ones(edges.shape[0]))
    x = np.asarray(r["x_edge"], dtype=np.float64).reshape(edges.shape[0], -1)
    return NaturalSample(
        graph=g,
        source=int(r["source"]),
        x_edge=x,
        y=np.asarray(r["y"], dtype=np.int64),
    )


def save_natural_dataset(path, samples: list[NaturalSample], extra_header: dict | None = None) -> None:
    header = {"schema": NATURAL_SCHEMA, "version": NATURAL_VERSION, "count": len(samples)}
    if extra_header:
        header.update(extra_header)
    write_ndjson(path, header, [_sample_record(s) for s in samples])


def load_natural_dataset(path) -> list[NaturalSample]:
    _, records = read_ndjson(path, NATURAL_SCHEMA, NATURAL_VERSION)
    return [_record_sample(r) for r in records]


def natural_dataset_hash(train: list[NaturalSample], val: list[NaturalSample]) -> str:
    """Content hash of exactly what a comparison run consumed."""
    payload = {
        "train": [_sample_record(s) for s in train],
        "val": [_sample_record(s) for s in val],
    }
    return sha256_bytes(canonical_json(payload).encode("utf-8"))


def natural_chance_accuracy(samples: list[NaturalSample]) -> float:
    """Expected accuracy of a uniform guess over {in-neighbors, self}."""
    inv = []
    for s in samples:
        g = s.graph
        indeg = np.bincount(g.edges[:, 1], minlength=g.n) if g.num_edges else np.zeros(g.n)
        inv.append(1.0 / (indeg + 1.0))
    return _sorted_mean(np.concatenate(inv))


# -- natural adapters around a frozen processor ----------------------------------


@dataclass(frozen=True)
class TransferConfig:
    epochs: int = 15
    batch_size: int = 8
    lr: float = 3e-3
    seed: int = 0
    rollout_steps: int = 6  # cap; actual budget is min(n, cap), at least 2
    margin: float = 0.01
    weight_floor: float = 0.02
    gauge_target: float = 0.6  # pins the free scale of the baseline regressor
    baseline_steps: int = 1200
    baseline_lr: float = 0.05

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1, lr > 0")
        if self.rollout_steps < 2:
            raise ValueError(f"rollout budget must be >= 2, got {self.rollout_steps}")
        if self.margin < 0 or self.weight_floor <= 0 or self.gauge_target <= 0:
            raise ValueError("margin must be >= 0; floor and gauge target positive")
        if self.baseline_steps < 0 or self.baseline_lr <= 0:
            raise ValueError("baseline_steps must be >= 0 and baseline_lr > 0")


def natural_adapter_shapes(config: ReasonerConfig, d_nat: int) -> dict[str, tuple]:
    h, m = config.hidden, config.msg_hidden
    return {
        "nat.node_w": (NODE_FEATURES, h),
        "nat.node_b": (h,),
        "nat.edge_w1": (d_nat, m),
        "nat.edge_b1": (m,),
        "nat.edge_w2": (m, h),
        "nat.edge_b2": (h,),
        "nat.score_w1": (3 * h, m),
        "nat.score_b1": (m,),
        "nat.score_w2": (m, 1),
        "nat.score_b2": (1,),
        "nat.self_w": (h, 1),
        "nat.self_b": (1,),
    }


@dataclass
class NaturalAdapters:
    """Trainable feature encoder and predecessor scorer; everything else frozen."""

    config: ReasonerConfig
    d_nat: int
    tensors: dict[str, Tensor]

    def copy(self) -> "NaturalAdapters":
        return NaturalAdapters(
            config=self.config,
            d_nat=self.d_nat,
            tensors={
                k: Tensor(v.data, requires_grad=v.requires_grad, name=k)
                for k, v in self.tensors.items()
            },
        )


def init_natural_adapters(config: ReasonerConfig, d_nat: int, rng: np.random.Generator) -> NaturalAdapters:
    if d_nat < 1:
        raise ValueError(f"d_nat must be positive, got {d_nat}")
    shapes = natural_adapter_shapes(config, d_nat)
    return NaturalAdapters(config=config, d_nat=d_nat, tensors=glorot_tensors(shapes, rng))


def save_adapters(path, adapters: NaturalAdapters) -> None:
    header = {
        "kind": "natural-adapters",
        "config": adapters.config.to_dict(),
        "d_nat": adapters.d_nat,
    }
    save_tensor_file(path, header, adapters.tensors)


def load_adapters(path) -> NaturalAdapters:
    config, arrays = load_tensor_file(path)
    if config.get("kind") != "natural-adapters":
        raise CheckpointError(
            f"{path}: expected a natural-adapters checkpoint, got kind={config.get('kind')!r}"
        )
    rc = ReasonerConfig.from_dict(config["config"])
    d_nat = int(config["d_nat"])
    expected = natural_adapter_shapes(rc, d_nat)
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError(
            f"{path}: adapter names do not match config (missing {missing}, unexpected {extra})"
        )
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arrays[name].shape}, config wants {shape}"
            )
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return NaturalAdapters(config=rc, d_nat=d_nat, tensors=tensors)


def natural_step(
    adapters: NaturalAdapters,
    frozen: ReasonerParams,
    structure: GraphStructure,
    x_edge: Tensor,
    feats: Tensor,
) -> SoftHintStep:
    """One step on natural inputs: trainable encoders and scorer, frozen core.

    The running dist/reached/reach hints come from the frozen decoder heads,
    so the recirculated state has the same layout the processor saw during
    pretraining; only the feature encoder and the predecessor scorer learn.
    """
    a, p = adapters.tensors, frozen.tensors
    c = frozen.config.logit_clip
    z = T.affine(feats, a["nat.node_w"], a["nat.node_b"])
    e = mlp(x_edge, a["nat.edge_w1"], a["nat.edge_b1"], a["nat.edge_w2"], a["nat.edge_b2"])
    state = process(frozen, structure, LatentState(z=z, e=e))
    z2 = state.z
    dist = T.affine(z2, p["decoder.dist_w"], p["decoder.dist_b"])
    reached_logits = T.clip(T.affine(z2, p["decoder.reached_w"], p["decoder.reached_b"]), -c, c)
    reach_logits = T.clip(T.affine(z2, p["decoder.reach_w"], p["decoder.reach_b"]), -c, c)
    scores = candidate_scores(
        structure, z2, state.e,
        a["nat.score_w1"], a["nat.score_b1"], a["nat.score_w2"], a["nat.score_b2"],
        a["nat.self_w"], a["nat.self_b"], c,
    )
    return SoftHintStep(
        dist=dist,
        reached_logits=reached_logits,
        reach_logits=reach_logits,
        pred_scores=scores,
        structure=structure,
    )


def _soft_hint_features(soft: SoftHintStep, source_col: np.ndarray) -> Tensor:
    """Recirculated hint features, kept differentiable.

    Same column layout as the hard hint encoding; probabilities stand in for
    the booleans, and the soft reached mass gates the distance the way the
    hard sentinel zeroes it.  As the heads saturate this converges to the
    interface the processor was pretrained on.
    """
    reached = T.sigmoid(soft.reached_logits)
    dist = T.mul(soft.dist, reached)
    reach = T.sigmoid(soft.reach_logits)
    return T.concat_cols([reached, dist, Tensor(source_col), reach])


@dataclass
class NaturalRollout:
    structure: GraphStructure
    final: SoftHintStep
    transitions: int  # natural_step applications; the budget counts init too


def natural_rollout(
    adapters: NaturalAdapters,
    frozen: ReasonerParams,
    sample: NaturalSample,
    rollout_steps: int,
) -> NaturalRollout:
    """Soft recirculating rollout from the source-only initialization hint.

    Every transition feeds the previous step's soft hints back in, so the
    final scores are one differentiable function of the adapters; hardening
    happens only when a caller wants discrete predictions.
    """
    x = AbstractInput(graph=sample.graph, source=sample.source)
    structure = GraphStructure.build(x)
    x_edge = Tensor(sample.x_edge)
    budget = max(2, min(structure.n, int(rollout_steps)))
    feats = Tensor(hint_features(init_step(x), structure))
    source_col = feats.data[:, 2:3].copy()
    soft = None
    for _ in range(budget - 1):
        if soft is not None:
            feats = _soft_hint_features(soft, source_col)
        soft = natural_step(adapters, frozen, structure, x_edge, feats)
    return NaturalRollout(structure=structure, final=soft, transitions=budget - 1)


def transfer_loss(
    adapters: NaturalAdapters,
    frozen: ReasonerParams,
    sample: NaturalSample,
    rollout_steps: int,
) -> Tensor:
    """Per-node predecessor cross-entropy of the final rollout step."""
    ro = natural_rollout(adapters, frozen, sample, rollout_steps)
    cols = ro.structure.target_columns(sample.y)
    ce = T.softmax_cross_entropy_rows(ro.final.pred_scores, cols, ro.structure.cand_mask)
    return T.mul(T.reduce_sum(ce), Tensor(1.0 / ro.structure.n))


def evaluate_natural(
    adapters: NaturalAdapters,
    frozen: ReasonerParams,
    samples: list[NaturalSample],
    rollout_steps: int,
) -> Metrics:
    if not samples:
        raise ValueError("evaluate_natural needs a non-empty dataset")
    hits = 0
    total = 0
    exact = 0
    with T.no_grad():
        for s in samples:
            ro = natural_rollout(adapters, frozen, s, rollout_steps)
            pred = ro.final.harden().pred
            hits += int((pred == s.y).sum())
            total += s.graph.n
            exact += int((pred == s.y).all())
    return Metrics(
        teacher="natural",
        count=len(samples),
        pred_accuracy=hits / total,
        exact_match_rate=exact / len(samples),
    )


def _frozen_view(params: ReasonerParams) -> ReasonerParams:
    return ReasonerParams(
        config=params.config,
        tensors={
            k: Tensor(v.data, requires_grad=False, name=k) for k, v in params.tensors.items()
        },
    )


def _assert_untouched(frozen: ReasonerParams, digest_before: str) -> None:
    for name, t in frozen.tensors.items():
        if t.grad is not None:
            raise FrozenProcessorError(f"gradient reached frozen parameter {name!r}")
    if params_digest(frozen.tensors) != digest_before:
        raise FrozenProcessorError("frozen parameter bytes changed during adapter training")


def transfer_train(
    frozen_params: ReasonerParams,
    train_samples: list[NaturalSample],
    val_samples: list[NaturalSample],
    config: TransferConfig,
    adapters: NaturalAdapters | None = None,
) -> tuple[NaturalAdapters, Metrics]:
    """Fit adapters by gradient descent; the passed parameters stay frozen.

    Freezing is enforced, not assumed: after every optimizer step the frozen
    tensors must be gradient-free and digest-identical, and the caller's
    parameter bytes are re-checked at the end.
    """
    if not train_samples or not val_samples:
        raise ValueError("transfer training needs non-empty train and validation sets")
    d_nat = int(train_samples[0].x_edge.shape[1])
    for s in list(train_samples) + list(val_samples):
        if s.x_edge.shape[1] != d_nat:
            raise ValueError(
                f"inconsistent feature width: {s.x_edge.shape[1]} vs {d_nat}"
            )
    frozen = _frozen_view(frozen_params)
    digest_before = params_digest(frozen.tensors)
    if adapters is None:
        adapters = init_natural_adapters(frozen.config, d_nat, substream(config.seed, "adapters"))
    optimizer = Adam(dict(adapters.tensors), lr=config.lr)
    shuffle_rng = substream(config.seed, "transfer-shuffle")

    loss_curve: list[float] = []
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(len(train_samples))
        epoch_sum = 0.0
        batches = 0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            optimizer.zero_grad()
            share = 1.0 / len(chunk)
            batch_value = 0.0
            for i in chunk:
                loss = transfer_loss(adapters, frozen, train_samples[int(i)], config.rollout_steps)
                T.mul(loss, Tensor(share)).backward()
                batch_value += loss.data.item() * share
            optimizer.step()
            _assert_untouched(frozen, digest_before)
            epoch_sum += batch_value
            batches += 1
        loss_curve.append(epoch_sum / batches)

    metrics = evaluate_natural(adapters, frozen, val_samples, config.rollout_steps)
    metrics.train_loss_curve = loss_curve
    metrics.val_accuracy_curve = [metrics.pred_accuracy]
    _assert_untouched(frozen, digest_before)
    if params_digest(frozen_params.tensors) != digest_before:
        raise FrozenProcessorError("caller's frozen parameters changed during training")
    return adapters, metrics


def ablation_random_processor(
    reasoner_config: ReasonerConfig,
    train_samples: list[NaturalSample],
    val_samples: list[NaturalSample],
    config: TransferConfig,
    adapters: NaturalAdapters | None = None,
) -> tuple[NaturalAdapters, Metrics]:
    """transfer_train around a never-trained processor from the same init family."""
    random_params = init_reasoner_params(
        reasoner_config, substream(config.seed, "init", "random-processor")
    )
    return transfer_train(random_params, train_samples, val_samples, config, adapters)


# -- scalar bottleneck baseline ---------------------------------------------------


def _stack_baseline(samples: list[NaturalSample]) -> dict:
    """Flatten a sample list into one global constraint system.

    Per-sample terms are pre-weighted (1/n for tree equalities, 1/E for the
    margin inequalities, both over the sample count) so the stacked loss is
    the mean of per-sample losses.
    """
    count = len(samples)
    x_parts = []
    tree_eidx, tree_child, tree_parent, tree_wt = [], [], [], []
    hinge_eidx, hinge_src, hinge_dst, hinge_wt = [], [], [], []
    src_nodes = []
    node_off = 0
    edge_off = 0
    for s in samples:
        g = s.graph
        e = g.num_edges
        x_parts.append(s.x_edge)
        for k2, (u, v) in enumerate(g.edges.tolist()):
            if s.y[v] == u:
                tree_eidx.append(edge_off + k2)
                tree_child.append(node_off + v)
                tree_parent.append(node_off + u)
                tree_wt.append(1.0 / (g.n * count))
            else:
                hinge_eidx.append(edge_off + k2)
                hinge_src.append(node_off + u)
                hinge_dst.append(node_off + v)
                hinge_wt.append(1.0 / (max(e, 1) * count))
        src_nodes.append(node_off + s.source)
        node_off += g.n
        edge_off += e
    return {
        "x": np.concatenate(x_parts, axis=0) if x_parts else np.zeros((0, 1)),
        "nodes": node_off,
        "tree_eidx": np.asarray(tree_eidx, dtype=np.int64),
        "tree_child": np.asarray(tree_child, dtype=np.int64),
        "tree_parent": np.asarray(tree_parent, dtype=np.int64),
        "tree_wt": np.asarray(tree_wt).reshape(-1, 1),
        "hinge_eidx": np.asarray(hinge_eidx, dtype=np.int64),
        "hinge_src": np.asarray(hinge_src, dtype=np.int64),
        "hinge_dst": np.asarray(hinge_dst, dtype=np.int64),
        "hinge_wt": np.asarray(hinge_wt).reshape(-1, 1),
        "src_nodes": np.asarray(src_nodes, dtype=np.int64),
    }


def evaluate_weight_regressor(
    theta: np.ndarray, theta0: float, samples: list[NaturalSample], floor: float = 0.02
) -> float:
    """Predecessor accuracy of the classical solver on regressed weights."""
    hits = 0
    total = 0
    for s in samples:
        w_hat = s.x_edge @ theta.reshape(-1) + theta0
        w_run = np.maximum(w_hat, floor)  # the solver needs positive weights
        g = Graph(n=s.graph.n, edges=s.graph.edges, weights=w_run)
        pred = bellman_ford_trace(AbstractInput(graph=g, source=s.source)).output.pred
        hits += int((pred == s.y).sum())
        total += s.graph.n
    return hits / total


def baseline_bottleneck(
    train_samples: list[NaturalSample],
    val_samples: list[NaturalSample],
    config: TransferConfig,
) -> tuple[dict, Metrics]:
    """Scalar-bottleneck pipeline: linear edge regressor, then the exact solver.

    The hidden weights are never visible, so the regressor is fitted to a
    tree-consistency objective over per-sample node potentials D: along every
    labeled tree edge D must add up exactly (squared term), every other edge
    must not undercut it by more than the margin (squared hinge), regressed
    weights stay positive, and a mean-level gauge pins the free scale.  All
    terms are convex in (theta, D), so the optimizer's job is easy; the
    bottleneck itself is what limits this pipeline.
    """
    if not train_samples or not val_samples:
        raise ValueError("baseline needs non-empty train and validation sets")
    arrs = _stack_baseline(train_samples)
    d_nat = int(train_samples[0].x_edge.shape[1])

    theta = Tensor(np.zeros((d_nat, 1)), requires_grad=True, name="theta")
    theta0 = Tensor(np.zeros(1), requires_grad=True, name="theta0")
    dpot = Tensor(np.zeros((arrs["nodes"], 1)), requires_grad=True, name="dpot")
    optimizer = Adam({"theta": theta, "theta0": theta0, "dpot": dpot}, lr=config.baseline_lr)

    x_t = Tensor(arrs["x"])
    tree_wt = Tensor(arrs["tree_wt"])
    hinge_wt = Tensor(arrs["hinge_wt"])
    n_edges = arrs["x"].shape[0]
    n_src = arrs["src_nodes"].shape[0]

    curve: list[float] = []
    for step in range(config.baseline_steps):
        # step decay: a constant Adam rate limit-cycles around the optimum
        frac = step / max(config.baseline_steps, 1)
        optimizer.lr = config.baseline_lr * (1.0 if frac < 0.5 else 0.1 if frac < 0.8 else 0.01)
        optimizer.zero_grad()
        w_hat = T.affine(x_t, theta, theta0)

        eq = T.add(
            T.add(T.gather_rows(dpot, arrs["tree_child"]),
                  T.neg(T.gather_rows(dpot, arrs["tree_parent"]))),
            T.neg(T.gather_rows(w_hat, arrs["tree_eidx"])),
        )
        loss = T.reduce_sum(T.mul(T.mul(eq, eq), tree_wt))

        if arrs["hinge_eidx"].size:
            viol = T.relu(
                T.add(
                    T.add(T.gather_rows(dpot, arrs["hinge_dst"]),
                          T.neg(T.gather_rows(dpot, arrs["hinge_src"]))),
                    T.add(T.neg(T.gather_rows(w_hat, arrs["hinge_eidx"])),
                          Tensor(float(config.margin))),
                )
            )
            loss = T.add(loss, T.reduce_sum(T.mul(T.mul(viol, viol), hinge_wt)))

        low = T.relu(T.add(T.neg(w_hat), Tensor(float(config.weight_floor))))
        loss = T.add(loss, T.mul(T.reduce_sum(T.mul(low, low)), Tensor(1.0 / n_edges)))

        gap = T.add(T.mul(T.reduce_sum(w_hat), Tensor(1.0 / n_edges)),
                    Tensor(-float(config.gauge_target)))
        loss = T.add(loss, T.mul(gap, gap))

        d_src = T.gather_rows(dpot, arrs["src_nodes"])
        loss = T.add(loss, T.mul(T.reduce_sum(T.mul(d_src, d_src)), Tensor(1.0 / n_src)))

        loss.backward()
        optimizer.step()
        curve.append(loss.data.item())

    theta_np = theta.data.copy()
    theta0_np = float(theta0.data[0])
    accuracy = evaluate_weight_regressor(theta_np, theta0_np, val_samples, config.weight_floor)
    metrics = Metrics(teacher="natural", count=len(val_samples), pred_accuracy=accuracy)
    metrics.train_loss_curve = curve
    metrics.val_accuracy_curve = [accuracy]
    return {"theta": theta_np, "theta0": theta0_np}, metrics


# -- the three-way comparison ------------------------------------------------------


def run_comparison(
    pretrained: ReasonerParams | None,
    gen_config: NaturalGenConfig,
    config: TransferConfig,
    sizes=DEFAULT_SIZES,
    seeds=(0, 1, 2),
    val_size: int = 100,
    methods=METHODS,
    reasoner_config: ReasonerConfig | None = None,
) -> list[dict]:
    """The chosen methods on identical per-seed datasets; one row per run.

    Training sets of different sizes are nested prefixes of one seeded pool,
    so size effects are not confounded with fresh sampling.  pretrained may be
    omitted when "transfer" is not requested; the ablation then shapes its
    random processor from reasoner_config.
    """
    sizes = [int(s) for s in sizes]
    if not sizes or min(sizes) < 1:
        raise ValueError(f"bad training sizes {sizes}")
    if val_size < 1:
        raise ValueError(f"validation size must be positive, got {val_size}")
    methods = list(methods)
    if not methods or len(set(methods)) != len(methods):
        raise ValueError(f"methods must be distinct and non-empty, got {methods}")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choices are {METHODS}")
    if "transfer" in methods and pretrained is None:
        raise ValueError("the transfer method needs pretrained parameters")
    if "ablation" in methods and pretrained is None and reasoner_config is None:
        raise ValueError("the ablation needs a reasoner config when no pretrained parameters are given")
    shape_config = pretrained.config if pretrained is not None else reasoner_config
    rows = []
    for seed in seeds:
        seed = int(seed)
        pool = generate_natural(
            replace(gen_config, count=max(sizes)), substream(seed, "natural", "train")
        )
        val = generate_natural(
            replace(gen_config, count=val_size), substream(seed, "natural", "val")
        )
        for size in sizes:
            train = pool[:size]
            dhash = natural_dataset_hash(train, val)
            run_cfg = replace(config, seed=seed)
            for method in methods:
                t0 = time.perf_counter()
                extras = {}
                if method == "transfer":
                    before = params_digest(pretrained.tensors)
                    _, m = transfer_train(pretrained, train, val, run_cfg)
                    extras = {
                        "processor_digest_before": before,
                        "processor_digest_after": params_digest(pretrained.tensors),
                    }
                elif method == "ablation":
                    rand = init_reasoner_params(
                        shape_config, substream(seed, "init", "random-processor")
                    )
                    before = params_digest(rand.tensors)
                    _, m = transfer_train(rand, train, val, run_cfg)
                    extras = {
                        "processor_digest_before": before,
                        "processor_digest_after": params_digest(rand.tensors),
                    }
                else:
                    _, m = baseline_bottleneck(train, val, run_cfg)
                rows.append(
                    {
                        "method": method,
                        "train_size": size,
                        "seed": seed,
                        "val_accuracy": m.pred_accuracy,
                        "dataset_hash": dhash,
                        "wall_time_s": time.perf_counter() - t0,
                        **extras,
                    }
                )
    return rows


def compare_report(rows: list[dict]) -> tuple[str, dict]:
    """CSV text plus a JSON-ready summary; unfair comparisons are errors.

    Every (train_size, seed) cell must contain all methods with one shared
    dataset hash.  The summary aggregates accuracy only; wall time stays in
    the CSV, where nondeterminism is expected.
    """
    if not rows:
        raise ValueError("compare_report needs at least one row")
    methods = sorted({r["method"] for r in rows})
    cells: dict[tuple, dict] = {}
    for r in rows:
        cell = cells.setdefault((int(r["train_size"]), int(r["seed"])), {})
        if r["method"] in cell:
            raise ValueError(
                f"duplicate row for method {r['method']!r} at train_size={r['train_size']}, seed={r['seed']}"
            )
        cell[r["method"]] = r
    for (size, seed), cell in sorted(cells.items()):
        if set(cell) != set(methods):
            raise ValueError(
                f"missing methods at train_size={size}, seed={seed}: have {sorted(cell)}"
            )
        hashes = {m: cell[m]["dataset_hash"] for m in methods}
        if len(set(hashes.values())) != 1:
            raise FairnessError(
                f"dataset hash mismatch at train_size={size}, seed={seed}: {hashes}"
            )

    header = "method,train_size,seed,val_accuracy,dataset_hash,wall_time_s"
    lines = [header]
    for r in sorted(rows, key=lambda r: (r["method"], int(r["train_size"]), int(r["seed"]))):
        lines.append(
            f"{r['method']},{int(r['train_size'])},{int(r['seed'])},"
            f"{float(r['val_accuracy'])!r},{r['dataset_hash']},{float(r['wall_time_s'])!r}"
        )
    csv_text = "\n".join(lines) + "\n"

    sizes = sorted({int(r["train_size"]) for r in rows})
    seeds = sorted({int(r["seed"]) for r in rows})
    summary: dict = {"sizes": sizes, "seeds": seeds, "methods": {}}
    for m in methods:
        per_size = {}
        for size in sizes:
            accs = np.sort(
                np.asarray(
                    [float(r["val_accuracy"]) for r in rows
                     if r["method"] == m and int(r["train_size"]) == size]
                )
            )
            per_size[str(size)] = {
                "mean": float(accs.sum() / accs.size),
                "min": float(accs[0]),
                "max": float(accs[-1]),
            }
        summary["methods"][m] = per_size
    return csv_text, summary
