"""Encode-process-decode network that executes one algorithm step per call.

The processor is a max-aggregation message passer over edge and node latents;
encoders/decoders are deliberately thin (linear node/edge encoders, small MLP
heads) so the step structure, not the adapters, carries the algorithm.
Distances and edge weights are standardized per graph by (max weight * n)
before encoding so the same parameters transfer across graph sizes.

Checkpoints are a versioned binary format: a JSON config header followed by
named float64 tensors with explicit shapes; round-trips are byte-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import NumericsError, Tensor
from .graphs import Graph
from .teachers import AbstractInput, HintStep, Trace, init_step

CHECKPOINT_MAGIC = b"AMCP"
CHECKPOINT_VERSION = 1

NODE_FEATURES = 4  # [reached, dist_std, is_source, reach]


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReasonerConfig:
    hidden: int = 64  # latent width; shipped configs keep this >= 32
    msg_hidden: int = 64  # hidden width of the message/update/score MLPs
    rounds: int = 1  # processor rounds per algorithm step
    logit_clip: float = 15.0

    def __post_init__(self):
        if self.hidden < 1 or self.msg_hidden < 1 or self.rounds < 1:
            raise ValueError(f"invalid reasoner config {self}")

    def to_dict(self) -> dict:
        return {
            "hidden": self.hidden,
            "msg_hidden": self.msg_hidden,
            "rounds": self.rounds,
            "logit_clip": self.logit_clip,
        }

    @staticmethod
    def from_dict(d: dict) -> "ReasonerConfig":
        return ReasonerConfig(
            hidden=int(d["hidden"]),
            msg_hidden=int(d["msg_hidden"]),
            rounds=int(d["rounds"]),
            logit_clip=float(d["logit_clip"]),
        )


def parameter_shapes(config: ReasonerConfig) -> dict[str, tuple[int, ...]]:
    h, m = config.hidden, config.msg_hidden
    return {
        "encoder.node_w": (NODE_FEATURES, h),
        "encoder.node_b": (h,),
        "encoder.edge_w": (1, h),
        "encoder.edge_b": (h,),
        "processor.msg_w1": (3 * h, m),
        "processor.msg_b1": (m,),
        "processor.msg_w2": (m, h),
        "processor.msg_b2": (h,),
        "processor.upd_w1": (2 * h, m),
        "processor.upd_b1": (m,),
        "processor.upd_w2": (m, h),
        "processor.upd_b2": (h,),
        "processor.default_msg": (h,),
        "decoder.dist_w": (h, 1),
        "decoder.dist_b": (1,),
        "decoder.reached_w": (h, 1),
        "decoder.reached_b": (1,),
        "decoder.reach_w": (h, 1),
        "decoder.reach_b": (1,),
        "decoder.score_w1": (3 * h, m),
        "decoder.score_b1": (m,),
        "decoder.score_w2": (m, 1),
        "decoder.score_b2": (1,),
        "decoder.self_w": (h, 1),
        "decoder.self_b": (1,),
    }


@dataclass
class ReasonerParams:
    config: ReasonerConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def copy(self) -> "ReasonerParams":
        return ReasonerParams(
            config=self.config,
            tensors={
                k: Tensor(v.data, requires_grad=v.requires_grad, name=k)
                for k, v in self.tensors.items()
            },
        )


def glorot_tensors(shapes: dict[str, tuple], rng: np.random.Generator) -> dict[str, Tensor]:
    """Glorot-normal matrices, zero vectors; draws follow dict order."""
    tensors: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if len(shape) == 1:  # biases and the default message start at zero
            data = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            std = np.sqrt(2.0 / (fan_in + fan_out))
            data = rng.normal(0.0, std, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return tensors


def init_reasoner_params(config: ReasonerConfig, rng: np.random.Generator) -> ReasonerParams:
    return ReasonerParams(config=config, tensors=glorot_tensors(parameter_shapes(config), rng))


# -- per-graph structure cache -------------------------------------------------


@dataclass
class GraphStructure:
    """Index arrays shared by every step on one input graph."""

    n: int
    source: int
    src: np.ndarray  # [E]
    dst: np.ndarray  # [E]
    edge_slot: np.ndarray  # [E] candidate column of each edge (>= 1)
    ncols: int  # 1 + max in-degree
    cand_mask: np.ndarray  # [n, ncols] valid candidate slots
    cand_src: np.ndarray  # [n, ncols] candidate node per slot (self in col 0)
    slot_of_edge: dict  # (u, v) -> column
    weights_std: np.ndarray  # [E, 1] weights / scale
    scale: float  # max weight * n

    @staticmethod
    def build(x: AbstractInput) -> "GraphStructure":
        g = x.graph
        e = g.num_edges
        src = g.edges[:, 0].astype(np.int64) if e else np.zeros(0, dtype=np.int64)
        dst = g.edges[:, 1].astype(np.int64) if e else np.zeros(0, dtype=np.int64)
        in_count = np.bincount(dst, minlength=g.n) if e else np.zeros(g.n, dtype=np.int64)
        ncols = int(in_count.max()) + 1 if e else 1
        edge_slot = np.zeros(e, dtype=np.int64)
        fill = np.zeros(g.n, dtype=np.int64)
        slot_of_edge = {}
        for k in range(e):
            v = int(dst[k])
            fill[v] += 1
            edge_slot[k] = fill[v]  # column 0 is the self candidate
            slot_of_edge[(int(src[k]), v)] = fill[v]
        cand_mask = np.zeros((g.n, ncols), dtype=bool)
        cand_mask[:, 0] = True
        cand_src = np.tile(np.arange(g.n, dtype=np.int64)[:, None], (1, ncols))
        for k in range(e):
            cand_mask[dst[k], edge_slot[k]] = True
            cand_src[dst[k], edge_slot[k]] = src[k]
        scale = g.max_weight() * g.n
        weights_std = (g.weights / scale).reshape(-1, 1)
        return GraphStructure(
            n=g.n,
            source=int(x.source),
            src=src,
            dst=dst,
            edge_slot=edge_slot,
            ncols=ncols,
            cand_mask=cand_mask,
            cand_src=cand_src,
            slot_of_edge=slot_of_edge,
            weights_std=weights_std,
            scale=scale,
        )

    def target_columns(self, pred: np.ndarray) -> np.ndarray:
        """Map a predecessor array onto candidate columns (self or in-edge)."""
        cols = np.zeros(self.n, dtype=np.int64)
        for j in range(self.n):
            p = int(pred[j])
            if p == j:
                continue
            try:
                cols[j] = self.slot_of_edge[(p, j)]
            except KeyError:
                raise NumericsError(
                    f"predecessor {p} of node {j} is not an incoming edge"
                ) from None
        return cols


@dataclass
class LatentState:
    z: Tensor  # [n, h]
    e: Tensor  # [E, h]


@dataclass
class SoftHintStep:
    """Differentiable step output plus everything needed to harden it."""

    dist: Tensor  # [n, 1] standardized
    reached_logits: Tensor  # [n, 1]
    reach_logits: Tensor  # [n, 1]
    pred_scores: Tensor  # [n, ncols], masked slots are dead
    structure: GraphStructure

    def pred_distribution(self) -> np.ndarray:
        return T.masked_softmax(self.pred_scores.data, self.structure.cand_mask)

    def harden(self) -> HintStep:
        s = self.structure
        reached = self.reached_logits.data[:, 0] > 0.0  # sigmoid > 0.5
        reach = self.reach_logits.data[:, 0] > 0.0
        dist = self.dist.data[:, 0] * s.scale
        dist = np.where(reached, dist, 0.0)  # sentinel matches teacher states
        masked = np.where(s.cand_mask, self.pred_scores.data, -np.inf)
        cols = masked.argmax(axis=1)
        pred = s.cand_src[np.arange(s.n), cols]
        return HintStep(dist=dist, reached=reached, pred=pred.astype(np.int64), reach=reach)


def hint_features(hint: HintStep, structure: GraphStructure) -> np.ndarray:
    n = structure.n
    is_source = np.zeros(n)
    is_source[structure.source] = 1.0
    return np.stack(
        [
            hint.reached.astype(np.float64),
            hint.dist / structure.scale,
            is_source,
            hint.reach.astype(np.float64),
        ],
        axis=1,
    )


def encode(params: ReasonerParams, structure: GraphStructure, hint: HintStep) -> LatentState:
    """Linear encoders; latent row i depends only on node/edge i."""
    p = params.tensors
    feats = Tensor(hint_features(hint, structure))
    z = T.affine(feats, p["encoder.node_w"], p["encoder.node_b"])
    e = T.affine(Tensor(structure.weights_std), p["encoder.edge_w"], p["encoder.edge_b"])
    return LatentState(z=z, e=e)


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return T.affine(T.relu(T.affine(x, w1, b1)), w2, b2)


def process(params: ReasonerParams, structure: GraphStructure, state: LatentState) -> LatentState:
    """Max-aggregation message passing round(s); edge latents pass through."""
    p = params.tensors
    z = state.z
    for _ in range(params.config.rounds):
        zs = T.gather_rows(z, structure.src)
        zd = T.gather_rows(z, structure.dst)
        m_in = T.concat_cols([zs, zd, state.e])
        msgs = mlp(m_in, p["processor.msg_w1"], p["processor.msg_b1"],
                   p["processor.msg_w2"], p["processor.msg_b2"])
        agg = T.segment_max(msgs, structure.dst, structure.n, p["processor.default_msg"])
        u_in = T.concat_cols([z, agg])
        z = mlp(u_in, p["processor.upd_w1"], p["processor.upd_b1"],
                p["processor.upd_w2"], p["processor.upd_b2"])
    return LatentState(z=z, e=state.e)


def candidate_scores(
    structure: GraphStructure,
    z: Tensor,
    e: Tensor,
    w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
    self_w: Tensor, self_b: Tensor,
    c: float,
) -> Tensor:
    """[n, ncols] predecessor scores: self head in column 0, edge MLP at slots."""
    self_scores = T.clip(T.affine(z, self_w, self_b), -c, c)
    n, ncols = structure.n, structure.ncols
    scores = T.pad_scatter(
        self_scores, np.arange(n, dtype=np.int64), np.zeros(n, dtype=np.int64), (n, ncols)
    )
    if structure.src.size:
        zs = T.gather_rows(z, structure.src)
        zd = T.gather_rows(z, structure.dst)
        s_in = T.concat_cols([zs, zd, e])
        edge_scores = T.clip(mlp(s_in, w1, b1, w2, b2), -c, c)
        scores = T.add(
            scores, T.pad_scatter(edge_scores, structure.dst, structure.edge_slot, (n, ncols))
        )
    return scores


def decode(params: ReasonerParams, structure: GraphStructure, state: LatentState) -> SoftHintStep:
    p = params.tensors
    c = params.config.logit_clip
    z = state.z
    dist = T.affine(z, p["decoder.dist_w"], p["decoder.dist_b"])
    reached_logits = T.clip(T.affine(z, p["decoder.reached_w"], p["decoder.reached_b"]), -c, c)
    reach_logits = T.clip(T.affine(z, p["decoder.reach_w"], p["decoder.reach_b"]), -c, c)
    scores = candidate_scores(
        structure, z, state.e,
        p["decoder.score_w1"], p["decoder.score_b1"],
        p["decoder.score_w2"], p["decoder.score_b2"],
        p["decoder.self_w"], p["decoder.self_b"], c,
    )
    return SoftHintStep(
        dist=dist,
        reached_logits=reached_logits,
        reach_logits=reach_logits,
        pred_scores=scores,
        structure=structure,
    )


def step_model(params: ReasonerParams, structure: GraphStructure, hint: HintStep) -> SoftHintStep:
    """One full encode -> process -> decode algorithm step."""
    return decode(params, structure, process(params, structure, encode(params, structure, hint)))


def rollout(
    params: ReasonerParams,
    x: AbstractInput,
    step_budget: int | None = None,
    structure: GraphStructure | None = None,
    step_fn=None,
) -> Trace:
    """Run hard steps from the initialization hint, feeding each prediction back.

    Stops early once a step reproduces the previous one (a fixed point keeps
    reproducing itself, so later steps add nothing).  step_fn replaces the
    model step when given; tests use it to check the loop against the teacher.
    """
    if structure is None:
        structure = GraphStructure.build(x)
    budget = structure.n if step_budget is None else int(step_budget)
    if budget < 1:
        raise ValueError(f"step budget must be >= 1, got {budget}")
    steps = [init_step(x)]
    with T.no_grad():
        while len(steps) < budget:  # the budget counts the initialization entry
            try:
                if step_fn is not None:
                    nxt = step_fn(steps[-1])
                else:
                    nxt = step_model(params, structure, steps[-1]).harden()
            except NumericsError as exc:
                raise NumericsError(
                    f"non-finite value at rollout step {len(steps)}: {exc}"
                ) from exc
            steps.append(nxt)
            if nxt == steps[-2]:
                break
    return Trace(input=x, steps=steps)


# -- checkpoint serialization ---------------------------------------------------


def save_tensor_file(path, config: dict, tensors: dict[str, Tensor]) -> None:
    """Versioned binary layout: magic, version, JSON config, named tensors."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<Q", len(cfg))
    blob += cfg
    blob += struct.pack("<Q", len(tensors))
    for name in sorted(tensors):
        data = np.asarray(tensors[name].data, dtype=np.float64, order="C")
        raw_name = name.encode("utf-8")
        blob += struct.pack("<Q", len(raw_name))
        blob += raw_name
        blob += struct.pack("<Q", data.ndim)
        for d in data.shape:
            blob += struct.pack("<Q", d)
        blob += data.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_tensor_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    view = memoryview(raw)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint: {p}")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{p}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{p}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<Q", take(8))
    try:
        config = json.loads(bytes(take(cfg_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{p}: corrupt config block: {exc}") from exc
    (count,) = struct.unpack("<Q", take(8))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<Q", take(8))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(size * 8), dtype="<f8").reshape(shape).copy()
        tensors[name] = data
    if off != len(raw):
        raise CheckpointError(f"{p}: {len(raw) - off} trailing bytes")
    return config, tensors


def save_checkpoint(path, params: ReasonerParams) -> None:
    save_tensor_file(path, {"kind": "reasoner", "config": params.config.to_dict()}, params.tensors)


def load_checkpoint(path) -> ReasonerParams:
    config, arrays = load_tensor_file(path)
    if config.get("kind") != "reasoner":
        raise CheckpointError(f"{path}: expected a reasoner checkpoint, got kind={config.get('kind')!r}")
    rc = ReasonerConfig.from_dict(config["config"])
    expected = parameter_shapes(rc)
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError(
            f"{path}: parameter names do not match config (missing {missing}, unexpected {extra})"
        )
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arrays[name].shape}, config wants {shape}"
            )
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return ReasonerParams(config=rc, tensors=tensors)


def params_digest(tensors: dict[str, Tensor], prefix: str = "") -> str:
    """sha256 over name-sorted raw tensor bytes; used to verify frozen parts."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        if not name.startswith(prefix):
            continue
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(tensors[name].data).tobytes())
    return h.hexdigest()
