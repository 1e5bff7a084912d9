"""Command-line front end: generate datasets, train, evaluate, run transfer.

One JSON config file drives each command.  The schema is strict (an unknown
key is rejected by its location) and every path in the file is resolved
relative to the file itself before anything executes.  Outputs land in one
directory together with a manifest naming each file and its content hash;
rerunning a command with the same config and seed reproduces every byte.
The one exception is measured wall time inside the comparison CSV, so the
manifest hashes that file with the timing column zeroed and says so.

Exit codes are stable API: 0 ok, 2 bad config, 3 IO failure, 4 missing
input, 5 training divergence (the best checkpoint so far is still written),
6 checkpoint mismatch, 7 fairness guard tripped.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .fsio import DatasetError, canonical_json, sha256_bytes, sha256_file
from .graphs import FAMILY_KINDS
from .plots import (
    save_size_generalisation,
    save_training_curves,
    save_transfer_comparison,
)
from .reasoner import (
    CheckpointError,
    ReasonerConfig,
    ReasonerParams,
    load_checkpoint,
    save_checkpoint,
)
from .rng import substream
from .teachers import TEACHER_NAMES, load_trace_dataset, save_trace_dataset
from .training import (
    DivergenceError,
    Metrics,
    TrainConfig,
    chance_pred_accuracy,
    evaluate,
    make_trace_dataset,
    selection_metric,
    size_generalisation_eval,
    train,
    train_multitask,
    write_epoch_csv,
)
from .transfer import (
    DEFAULT_SIZES,
    METHODS,
    FairnessError,
    NaturalGenConfig,
    TransferConfig,
    compare_report,
    generate_natural,
    run_comparison,
    save_natural_dataset,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING = 4
EXIT_DIVERGENCE = 5
EXIT_CHECKPOINT = 6
EXIT_FAIRNESS = 7

_TEACHER_CHOICES = tuple(TEACHER_NAMES) + ("both",)


class ConfigError(ValueError):
    """Config file failed parsing or schema validation."""


# -- config parsing --------------------------------------------------------------


def _require_keys(obj, allowed: dict, where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    for key in obj:
        if key not in allowed:
            raise ConfigError(
                f"{where}.{key}: unknown key (allowed: {', '.join(sorted(allowed))})"
            )


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    return value


def _as_float(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _as_str(value, where: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def _as_int_list(value, where: str) -> list[int]:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{where}: expected a non-empty list of integers")
    return [_as_int(v, f"{where}[{i}]") for i, v in enumerate(value)]


def _section(raw: dict, name: str, spec: dict, where: str) -> dict:
    """Typed view of one config section; spec maps key -> (coercer, default)."""
    body = raw.get(name, {})
    _require_keys(body, spec, where)
    out = {}
    for key, (coerce, default) in spec.items():
        out[key] = coerce(body[key], f"{where}.{key}") if key in body else default
    return out


_GRAPHS_SPEC = {
    "family": (_as_str, "erdos_renyi"),
    "count": (_as_int, 1000),
    "val_count": (_as_int, 200),
    "n_lo": (_as_int, 8),
    "n_hi": (_as_int, 16),
}

_REASONER_SPEC = {
    "hidden": (_as_int, 64),
    "msg_hidden": (_as_int, 64),
    "rounds": (_as_int, 1),
    "logit_clip": (_as_float, 15.0),
}

_TRAINING_SPEC = {
    "epochs": (_as_int, 12),
    "batch_size": (_as_int, 8),
    "lr": (_as_float, 3e-3),
    "lr_decay": (_as_float, 1.0),
    "tf_prob": (_as_float, 1.0),
    "w_dist": (_as_float, 1.0),
    "w_pred": (_as_float, 1.0),
    "w_reach": (_as_float, 1.0),
}

_NATURAL_SPEC = {
    "count": (_as_int, 64),
    "n_lo": (_as_int, 8),
    "n_hi": (_as_int, 16),
    "d_nat": (_as_int, 16),
    "k": (_as_int, 4),
    "sigma": (_as_float, 0.25),
    "feature_map": (_as_str, "smooth"),
    "distractor": (_as_str, "normal"),
    "family": (_as_str, "erdos_renyi"),
    "weight_lo": (_as_float, 0.2),
    "weight_hi": (_as_float, 1.0),
}

_FIT_SPEC = {
    "epochs": (_as_int, 15),
    "batch_size": (_as_int, 8),
    "lr": (_as_float, 3e-3),
    "rollout_steps": (_as_int, 6),
    "margin": (_as_float, 0.01),
    "weight_floor": (_as_float, 0.02),
    "gauge_target": (_as_float, 0.6),
    "baseline_steps": (_as_int, 1200),
    "baseline_lr": (_as_float, 0.05),
}

_TRANSFER_SPEC = {
    "sizes": (_as_int_list, list(DEFAULT_SIZES)),
    "seeds": (_as_int_list, [0, 1, 2]),
    "val_size": (_as_int, 100),
    "natural": (None, None),  # nested; handled separately
    "fit": (None, None),
}

_TOP_KEYS = dict.fromkeys(
    ["seed", "out", "data", "checkpoint", "graphs", "teacher", "reasoner",
     "training", "transfer"]
)


@dataclass
class TransferSection:
    sizes: list[int]
    seeds: list[int]
    val_size: int
    natural: NaturalGenConfig
    fit: TransferConfig


@dataclass
class RunConfig:
    """One parsed, path-resolved run description."""

    seed: int
    out: Path | None
    data: Path | None
    checkpoint: Path | None
    teacher: str | None
    graphs: dict
    reasoner: ReasonerConfig
    training: dict
    transfer: TransferSection | None


def load_raw_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return raw


def parse_config(raw: dict, base: Path) -> RunConfig:
    """Validate the raw dict against the strict schema and resolve paths."""
    _require_keys(raw, _TOP_KEYS, "config")
    seed = _as_int(raw.get("seed", 0), "config.seed")

    def path_of(key: str) -> Path | None:
        if key not in raw:
            return None
        return (base / _as_str(raw[key], f"config.{key}")).resolve()

    teacher = None
    if "teacher" in raw:
        body = raw["teacher"]
        _require_keys(body, {"name": None}, "config.teacher")
        if "name" not in body:
            raise ConfigError("config.teacher: missing key 'name'")
        teacher = _as_str(body["name"], "config.teacher.name")
        if teacher not in _TEACHER_CHOICES:
            raise ConfigError(
                f"config.teacher.name: {teacher!r} is not one of {sorted(_TEACHER_CHOICES)}"
            )

    graphs = _section(raw, "graphs", _GRAPHS_SPEC, "config.graphs")
    if graphs["family"] not in FAMILY_KINDS:
        raise ConfigError(
            f"config.graphs.family: {graphs['family']!r} is not one of {sorted(FAMILY_KINDS)}"
        )

    try:
        reasoner = ReasonerConfig(**_section(raw, "reasoner", _REASONER_SPEC, "config.reasoner"))
    except ValueError as exc:
        raise ConfigError(f"config.reasoner: {exc}") from None

    training = _section(raw, "training", _TRAINING_SPEC, "config.training")

    transfer = None
    if "transfer" in raw:
        body = raw["transfer"]
        _require_keys(body, _TRANSFER_SPEC, "config.transfer")
        grid = {
            k: (coerce(body[k], f"config.transfer.{k}") if k in body else default)
            for k, (coerce, default) in _TRANSFER_SPEC.items()
            if coerce is not None
        }
        try:
            natural = NaturalGenConfig(
                seed=seed,
                **_section(body, "natural", _NATURAL_SPEC, "config.transfer.natural"),
            )
            fit = TransferConfig(
                seed=seed, **_section(body, "fit", _FIT_SPEC, "config.transfer.fit")
            )
        except ValueError as exc:
            raise ConfigError(f"config.transfer: {exc}") from None
        if grid["val_size"] < 1:
            raise ConfigError("config.transfer.val_size: must be positive")
        transfer = TransferSection(
            sizes=grid["sizes"], seeds=grid["seeds"], val_size=grid["val_size"],
            natural=natural, fit=fit,
        )

    return RunConfig(
        seed=seed,
        out=path_of("out"),
        data=path_of("data"),
        checkpoint=path_of("checkpoint"),
        teacher=teacher,
        graphs=graphs,
        reasoner=reasoner,
        training=training,
        transfer=transfer,
    )


def _parse_sizes_flag(text: str) -> list[int]:
    try:
        sizes = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--sizes: expected comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise ConfigError(f"--sizes: sizes must be positive, got {text!r}")
    return sizes


# -- output helpers --------------------------------------------------------------


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_manifest(out: Path, command: str, effective_config: dict, seed: int,
                    entries: list[dict]) -> None:
    manifest = {
        "command": command,
        "config_hash": sha256_bytes(canonical_json(effective_config).encode("utf-8")),
        "seed": seed,
        "outputs": sorted(entries, key=lambda e: e["path"]),
    }
    _write_json(out / "manifest.json", manifest)


def _entry(out: Path, name: str, **extra) -> dict:
    return {"path": name, "sha256": sha256_file(out / name), **extra}


def _teacher_list(run: RunConfig, where: str) -> list[str]:
    if run.teacher is None:
        raise ConfigError(f"{where}: needs a teacher section")
    return list(TEACHER_NAMES) if run.teacher == "both" else [run.teacher]


def _require_out(run: RunConfig) -> Path:
    if run.out is None:
        raise ConfigError("no output directory: set 'out' in the config or pass --out")
    run.out.mkdir(parents=True, exist_ok=True)
    return run.out


# -- commands --------------------------------------------------------------------


def cmd_generate(run: RunConfig, effective: dict) -> int:
    out = _require_out(run)
    entries = []
    if run.transfer is not None:
        gen = run.transfer.natural
        train_set = generate_natural(gen, substream(run.seed, "natural", "train"))
        val_set = generate_natural(
            replace(gen, count=run.transfer.val_size),
            substream(run.seed, "natural", "val"),
        )
        for name, samples in (("natural-train.ndjson", train_set),
                              ("natural-val.ndjson", val_set)):
            save_natural_dataset(out / name, samples)
            entries.append(_entry(out, name, records=len(samples)))
    else:
        if run.teacher is None:
            raise ConfigError(
                "config: generate needs either a transfer section (natural data) "
                "or a teacher section (trace data)"
            )
        for t in _teacher_list(run, "config"):
            for split, count in (("train", run.graphs["count"]),
                                 ("val", run.graphs["val_count"])):
                traces = make_trace_dataset(
                    t, count, run.graphs["n_lo"], run.graphs["n_hi"],
                    run.graphs["family"], substream(run.seed, "data", t, split),
                )
                name = f"{t}-{split}.ndjson"
                save_trace_dataset(out / name, t, traces)
                entries.append(_entry(out, name, records=len(traces)))
    _write_manifest(out, "generate", effective, run.seed, entries)
    return EXIT_OK


def _load_split(run: RunConfig, teacher: str, split: str):
    if run.data is None:
        raise ConfigError("config: set 'data' to the directory holding the datasets")
    path = run.data / f"{teacher}-{split}.ndjson"
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    loaded_teacher, traces = load_trace_dataset(path)
    if loaded_teacher != teacher:
        raise DatasetError(f"{path}: holds {loaded_teacher!r} traces, wanted {teacher!r}")
    return traces


def _train_config(run: RunConfig, train_len: int, val_len: int) -> TrainConfig:
    try:
        return TrainConfig(
            train_size=train_len,
            val_size=val_len,
            n_lo=run.graphs["n_lo"],
            n_hi=run.graphs["n_hi"],
            family=run.graphs["family"],
            seed=run.seed,
            reasoner=run.reasoner,
            **run.training,
        )
    except ValueError as exc:
        raise ConfigError(f"config.training: {exc}") from None


def _emit_train_outputs(out: Path, results: dict[str, tuple[ReasonerParams, Metrics]],
                        diverged: str | None) -> list[dict]:
    entries = []
    summary: dict = {"teachers": {}, "diverged": diverged}
    for t, (params, metrics) in results.items():
        save_checkpoint(out / f"checkpoint-{t}.bin", params)
        entries.append(_entry(out, f"checkpoint-{t}.bin"))
        write_epoch_csv(out / f"metrics-{t}.csv", metrics)
        entries.append(_entry(out, f"metrics-{t}.csv"))
        save_training_curves(out / f"curves-{t}.png", metrics, title=t)
        entries.append(_entry(out, f"curves-{t}.png"))
        summary["teachers"][t] = {
            "val_accuracy": selection_metric(t, metrics),
            **metrics.to_dict(),
        }
    _write_json(out / "summary.json", summary)
    entries.append(_entry(out, "summary.json"))
    return entries


def cmd_train(run: RunConfig, effective: dict) -> int:
    out = _require_out(run)
    teachers = _teacher_list(run, "config")
    datasets = {t: (_load_split(run, t, "train"), _load_split(run, t, "val"))
                for t in teachers}
    lens = next(iter(datasets.values()))
    config = _train_config(run, len(lens[0]), len(lens[1]))

    code = EXIT_OK
    diverged = None
    results: dict[str, tuple[ReasonerParams, Metrics]] = {}
    try:
        if len(teachers) == 1:
            t = teachers[0]
            params, metrics = train(t, config, *datasets[t])
            results[t] = (params, metrics)
        else:
            multi = train_multitask(teachers, config, datasets)
            results = {t: (multi.params[t], multi.metrics[t]) for t in teachers}
    except DivergenceError as exc:
        # keep the last good epoch on disk; the exit code reports the failure
        diverged = str(exc)
        results = {exc.metrics.teacher: (exc.params, exc.metrics)}
        code = EXIT_DIVERGENCE
        print(f"divergence: {exc}", file=sys.stderr)

    entries = _emit_train_outputs(out, results, diverged)
    _write_manifest(out, "train", effective, run.seed, entries)
    return code


_EVAL_COLUMNS = [
    "n", "teacher", "count", "chance_pred_accuracy", "pred_accuracy",
    "reached_accuracy", "reach_accuracy", "dist_mae", "exact_match_rate",
    "postcondition_rate",
]


def _eval_csv(rows: list[dict]) -> str:
    lines = [",".join(_EVAL_COLUMNS)]
    for row in rows:
        cells = []
        for col in _EVAL_COLUMNS:
            value = row[col]
            cells.append(repr(value) if isinstance(value, float) else str(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _load_reasoner(run: RunConfig) -> ReasonerParams:
    if run.checkpoint is None:
        raise ConfigError("config: set 'checkpoint' to the trained model file")
    if not run.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {run.checkpoint}")
    return load_checkpoint(run.checkpoint)


def _check_reasoner_match(run: RunConfig, raw: dict, params: ReasonerParams) -> None:
    """A reasoner section in the config must agree with the checkpoint."""
    if "reasoner" not in raw:
        return
    want = run.reasoner.to_dict()
    have = params.config.to_dict()
    bad = sorted(k for k in want if want[k] != have[k])
    if bad:
        detail = ", ".join(f"{k}: checkpoint has {have[k]}, config wants {want[k]}" for k in bad)
        raise CheckpointError(f"{run.checkpoint}: reasoner config mismatch ({detail})")


def cmd_eval(run: RunConfig, effective: dict, sizes: list[int] | None,
             oracle: bool) -> int:
    out = _require_out(run)
    params = _load_reasoner(run)
    _check_reasoner_match(run, effective, params)
    teachers = _teacher_list(run, "config")
    if len(teachers) != 1:
        raise ConfigError("config.teacher: eval works on one teacher at a time")
    teacher = teachers[0]

    entries = []
    if sizes is not None:
        rows = size_generalisation_eval(
            params, teacher, sizes, count=100, seed=run.seed,
            family=run.graphs["family"], oracle=oracle,
        )
        save_size_generalisation(out / "sizegen.png", rows, title=teacher)
        entries.append(_entry(out, "sizegen.png"))
    else:
        dataset = _load_split(run, teacher, "val")
        metrics = evaluate(params, teacher, dataset, oracle=oracle)
        ns = sorted(tr.input.graph.n for tr in dataset)
        span = str(ns[0]) if ns[0] == ns[-1] else f"{ns[0]}-{ns[-1]}"
        row = {"n": span, "chance_pred_accuracy": chance_pred_accuracy(dataset)}
        row.update(metrics.to_dict())
        del row["train_loss_curve"], row["val_accuracy_curve"]
        rows = [row]

    (out / "eval-report.csv").write_text(_eval_csv(rows))
    entries.append(_entry(out, "eval-report.csv"))
    _write_json(out / "eval-summary.json", {"teacher": teacher, "oracle": oracle,
                                            "rows": rows})
    entries.append(_entry(out, "eval-summary.json"))
    _write_manifest(out, "eval", effective, run.seed, entries)
    return EXIT_OK


def _normalized_csv_bytes(csv_text: str) -> bytes:
    """The comparison CSV with wall_time_s zeroed; timing is honest in the
    file itself but cannot take part in byte-identity checks."""
    lines = csv_text.strip("\n").split("\n")
    kept = [lines[0]]
    for line in lines[1:]:
        cells = line.split(",")
        cells[-1] = "0.0"
        kept.append(",".join(cells))
    return ("\n".join(kept) + "\n").encode("utf-8")


def cmd_transfer(run: RunConfig, effective: dict, random_processor: bool) -> int:
    out = _require_out(run)
    if run.transfer is None:
        raise ConfigError("config: transfer command needs a transfer section")
    section = run.transfer

    pretrained = None
    methods = ("ablation",) if random_processor else METHODS
    if not random_processor:
        pretrained = _load_reasoner(run)

    rows = run_comparison(
        pretrained, section.natural, section.fit,
        sizes=section.sizes, seeds=section.seeds, val_size=section.val_size,
        methods=methods, reasoner_config=run.reasoner,
    )
    csv_text, summary = compare_report(rows)

    entries = []
    (out / "compare.csv").write_text(csv_text)
    entries.append({
        "path": "compare.csv",
        "sha256": sha256_bytes(_normalized_csv_bytes(csv_text)),
        "timing_normalized": True,
    })
    _write_json(out / "compare-summary.json", summary)
    entries.append(_entry(out, "compare-summary.json"))
    runs = [{k: v for k, v in row.items() if k != "wall_time_s"} for row in rows]
    _write_json(out / "runs.json", {"rows": runs})
    entries.append(_entry(out, "runs.json"))
    save_transfer_comparison(out / "transfer.png", summary)
    entries.append(_entry(out, "transfer.png"))
    _write_manifest(out, "transfer", effective, run.seed, entries)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="algomimic",
        description="train graph-algorithm imitators and reuse their frozen cores",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "generate": "write seeded trace or natural datasets plus a manifest",
        "train": "imitation-train a reasoner on generated traces",
        "eval": "evaluate a checkpoint, optionally across graph sizes",
        "transfer": "run the frozen-processor comparison grid",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, metavar="PATH",
                       help="JSON run config")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, metavar="N", help="root seed (overrides config)")
        if name == "eval":
            p.add_argument("--oracle", action="store_true",
                           help="replay the teacher instead of the model (metric ceiling)")
            p.add_argument("--sizes", metavar="CSV",
                           help="comma-separated graph sizes for the generalisation table")
        if name == "transfer":
            p.add_argument("--random-processor", action="store_true",
                           help="ablation only: skip the pretrained checkpoint")
            p.add_argument("--sizes", metavar="CSV",
                           help="comma-separated training-set sizes (overrides config)")
    return parser


def _dispatch(args) -> int:
    raw = load_raw_config(args.config)
    effective = dict(raw)
    if args.seed is not None:
        effective["seed"] = args.seed
    if args.out is not None:
        effective["out"] = args.out
    sizes_flag = getattr(args, "sizes", None)
    if args.command == "transfer" and "transfer" in effective:
        # flag overrides become part of the effective config (and its hash)
        section = dict(effective["transfer"])
        if sizes_flag is not None:
            section["sizes"] = _parse_sizes_flag(sizes_flag)
        if args.seed is not None:
            section["seeds"] = [args.seed]
        effective["transfer"] = section

    run = parse_config(effective, Path(args.config).resolve().parent)
    if args.out is not None:
        run.out = Path(args.out).resolve()

    if args.command == "generate":
        return cmd_generate(run, effective)
    if args.command == "train":
        return cmd_train(run, effective)
    if args.command == "eval":
        sizes = _parse_sizes_flag(sizes_flag) if sizes_flag is not None else None
        return cmd_eval(run, effective, sizes, args.oracle)
    if args.command == "transfer":
        return cmd_transfer(run, effective, args.random_processor)
    raise AssertionError(f"unreachable command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FairnessError as exc:
        print(f"fairness guard: {exc}", file=sys.stderr)
        return EXIT_FAIRNESS
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
