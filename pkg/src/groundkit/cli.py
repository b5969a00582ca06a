"""Single command-line entry point.

Subcommands: transform, filter, stats, synth, train, eval, baseline,
gradcheck.  Machine-readable payloads go to stdout; human-readable logs and
tables go to stderr.  Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure.  Errors are reported on stderr as one-line JSON
``{"error": ..., "detail": ...}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import benchkit, numcore as nc, rulekit
from .core import DataError, dataset_stats, read_dataset, read_header, write_dataset
from .grounder import GroundingModel, ModelConfig, TrainSchedule, train
from .grounder.io import load_model, save_model
from .grounder.model import loss_cls, loss_con, parse_config_file, select_context_objects
from .numcore import CheckpointError, NumericError

GRADCHECK_THRESHOLD = 1e-4

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise UsageError(message)


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _emit(payload: object) -> None:
    print(json.dumps(payload, sort_keys=True))


def _resolve_dataset(path: str, default_name: str = "dataset.jsonl") -> Path:
    p = Path(path)
    return p / default_name if p.is_dir() else p


def build_parser() -> _Parser:
    parser = _Parser(prog="groundkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("transform", help="rewrite a QA corpus into grounding datasets")
    p.add_argument("--data", required=True, help="QA corpus .jsonl")
    p.add_argument("--rules", help="rules file (default: built-in rule set)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.add_argument("--split", default="0.8,0.1,0.1",
                   help="train,validation,test fractions")
    p.add_argument("--workers", type=int, default=1,
                   help="parallelism hint; output is identical for any value")

    p = sub.add_parser("filter", help="apply the sample filters to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output dataset .jsonl")

    p = sub.add_parser("stats", help="print corpus statistics as JSON")
    p.add_argument("--data", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--max-persons", type=int, default=5)
    p.add_argument("--d-vis", type=int, default=32)
    p.add_argument("--context-rate", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .jsonl (or directory)")

    p = sub.add_parser("train", help="train the grounding model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="model config file (default config if omitted)")
    p.add_argument("--out", required=True, help="run directory for checkpoint+logs")
    p.add_argument("--steps", type=int, help="override training steps")
    p.add_argument("--lr", type=float, help="override learning rate")
    p.add_argument("--token-budget", type=int, help="override batch token budget")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="override the contrastive loss weight")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--no-context-objects", action="store_true",
                   help="drop detected context objects from the input sequence")

    p = sub.add_parser("eval", help="evaluate a checkpoint or a named baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="run directory produced by train")
    p.add_argument("--name", choices=sorted(benchkit.BASELINES),
                   help="heuristic baseline name")
    p.add_argument("--seed", type=int, default=0, help="seed for the random baseline")
    p.add_argument("--workers", type=int, default=1,
                   help="parallelism hint; output is identical for any value")

    p = sub.add_parser("baseline", help="run a heuristic baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--name", required=True, choices=sorted(benchkit.BASELINES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1,
                   help="parallelism hint; output is identical for any value")

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    p.add_argument("--config", required=True, help="model config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    return parser


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_transform(args) -> int:
    rules = rulekit.load_rules(args.rules) if args.rules else rulekit.default_rules()
    try:
        fractions = [float(x) for x in args.split.split(",")]
        if len(fractions) != 3:
            raise ValueError("need exactly three fractions")
        spec = rulekit.SplitSpec(*fractions, seed=args.seed)
    except ValueError as exc:
        raise UsageError(f"bad --split value: {exc}") from None
    corpus = rulekit.read_qa_corpus(args.data)
    header = read_header(args.data)
    result = rulekit.run_pipeline(corpus, rules, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, samples in (("train", result.train), ("validation", result.validation),
                          ("test", result.test)):
        write_dataset(samples, out / f"{name}.jsonl", header=header)
    report = result.report.to_json()
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2),
                                     encoding="utf-8")
    _emit(report)
    return EXIT_OK


def _cmd_filter(args) -> int:
    samples = read_dataset(_resolve_dataset(args.data), strict=False)
    header = read_header(_resolve_dataset(args.data))
    kept = []
    drops: dict[str, int] = {}
    drop_ids: dict[str, str] = {}
    for sample in samples:
        verdict = rulekit.filter_sample(sample)
        if verdict.keep:
            kept.append(sample)
        else:
            reason = verdict.reason.value
            drops[reason] = drops.get(reason, 0) + 1
            drop_ids[sample.sample_id] = reason
    write_dataset(kept, args.out, header=header)
    _emit({"input": len(samples), "kept": len(kept),
           "drops": dict(sorted(drops.items())),
           "drop_ids": dict(sorted(drop_ids.items()))})
    return EXIT_OK


def _cmd_stats(args) -> int:
    samples = read_dataset(_resolve_dataset(args.data))
    _emit(dataset_stats(samples).to_json())
    return EXIT_OK


def _cmd_synth(args) -> int:
    config = benchkit.SynthConfig(n_samples=args.n, max_persons=args.max_persons,
                                  d_vis=args.d_vis, context_rate=args.context_rate,
                                  seed=args.seed)
    samples = benchkit.synth_generate(config)
    out = Path(args.out)
    if out.suffix != ".jsonl":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "dataset.jsonl"
    write_dataset(samples, out)
    _emit({"path": str(out), "n_samples": len(samples)})
    return EXIT_OK


def _cmd_train(args) -> int:
    samples = read_dataset(_resolve_dataset(args.data))
    config = ModelConfig.from_file(args.config) if args.config else ModelConfig()
    header = read_header(_resolve_dataset(args.data))
    overrides: dict[str, object] = {}
    if config.d_vis != header.d_vis:
        overrides["d_vis"] = header.d_vis
        _log(f"adjusting d_vis {config.d_vis} -> {header.d_vis} to match the dataset")
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.no_context_objects:
        overrides["use_context_objects"] = False
    if overrides:
        config = _replace_config(config, overrides)

    schedule_kwargs = _schedule_from_config(args.config)
    if args.steps is not None:
        schedule_kwargs["steps"] = args.steps
    if args.lr is not None:
        schedule_kwargs["lr"] = args.lr
    if args.token_budget is not None:
        schedule_kwargs["token_budget"] = args.token_budget
    schedule = TrainSchedule(**schedule_kwargs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log_fh:
        def on_step(step: int, loss: float) -> None:
            log_fh.write(json.dumps({"step": step, "loss": loss}) + "\n")
            if step % 25 == 0:
                _log(f"step {step}: loss {loss:.4f}")

        result = train(samples, config, schedule, on_step=on_step)
    ckpt = save_model(result.model, out)
    _emit({"checkpoint": str(ckpt), "steps": len(result.losses),
           "final_loss": result.losses[-1]})
    return EXIT_OK


def _replace_config(config: ModelConfig, overrides: dict[str, object]) -> ModelConfig:
    fields = {**{k: getattr(config, k) for k in (
        "d_model", "n_heads", "n_layers", "d_ff", "d_vis", "tau", "t1", "t2",
        "lam", "contrast_layer", "neutral_names", "seed",
        "normalize_similarity", "use_context_objects", "max_text_len")},
        **overrides}
    return ModelConfig(**fields)  # type: ignore[arg-type]


def _schedule_from_config(config_path: str | None) -> dict[str, object]:
    """Training-schedule keys may sit in the same flat config file."""
    if not config_path:
        return {}
    values = parse_config_file(config_path)
    out: dict[str, object] = {}
    for key, conv in (("steps", int), ("lr", float), ("token_budget", int),
                      ("weight_decay", float), ("beta1", float), ("beta2", float),
                      ("adam_eps", float)):
        if key in values:
            out[key] = conv(values[key])
    return out


def _cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.name):
        raise UsageError("eval needs exactly one of --checkpoint or --name")
    samples = read_dataset(_resolve_dataset(args.data))
    if args.checkpoint:
        model = load_model(args.checkpoint)
        predictions = [model.predict_sample(s) for s in samples]
        label = Path(args.checkpoint).name or "model"
    else:
        predictions = benchkit.run_baseline(args.name, samples, seed=args.seed)
        label = args.name
    report = benchkit.evaluate(predictions, samples)
    text, _payload = benchkit.render_table([(label, report)])
    _log(text)
    _emit(report.to_json())
    return EXIT_OK


def _cmd_baseline(args) -> int:
    samples = read_dataset(_resolve_dataset(args.data))
    predictions = benchkit.run_baseline(args.name, samples, seed=args.seed)
    report = benchkit.evaluate(predictions, samples)
    _emit(report.to_json())
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    config = ModelConfig.from_file(args.config)
    report = run_gradient_suite(config, seed=args.seed, epsilon=args.epsilon)
    _emit(report)
    worst = max(report["max_rel_error"].values())
    if worst > GRADCHECK_THRESHOLD:
        _log(f"gradient check FAILED: {worst:.3e} > {GRADCHECK_THRESHOLD}")
        return EXIT_NUMERIC
    return EXIT_OK


def run_gradient_suite(config: ModelConfig, seed: int = 0, epsilon: float = 1e-5,
                       max_entries_per_param: int = 8) -> dict:
    """grad_check loss_cls / loss_con / loss_total on a seeded toy fixture.

    The model is checked in float64 at a rescaled parameter point (weights
    x10) so that gradient magnitudes are well clear of finite-difference
    noise; gradient correctness is point-independent.
    """
    from .grounder.train import build_vocab

    fixture = benchkit.synth_generate(benchkit.SynthConfig(
        n_samples=2, max_persons=3, d_vis=config.d_vis, context_rate=1.0,
        seed=seed))
    vocab = build_vocab(fixture, config.neutral_names)
    model = GroundingModel.init(config, vocab, dtype=np.float64)
    for p in model.params.values():
        if p.data.ndim == 2:
            p.data = p.data * 10.0
    sample = fixture[0]

    def make_loss(kind: str):
        def loss_fn(params, need_grads=True):
            for p in params.values():
                p.zero_grad()
            with nc.Graph() as graph:
                encoded = model.forward(sample)
                q, link_ids = model.class_logits(encoded)
                labels = [sample.labels[l] for l in link_ids]
                if kind == "cls":
                    loss = loss_cls(q, labels)
                elif kind == "con":
                    sets = select_context_objects(sample, config.t1, config.t2)
                    loss = loss_con(encoded, sets, config.tau, config.contrast_layer,
                                    normalize=config.normalize_similarity)
                else:
                    sets = select_context_objects(sample, config.t1, config.t2)
                    loss = nc.add(loss_cls(q, labels),
                                  nc.scale(loss_con(encoded, sets, config.tau,
                                                    config.contrast_layer,
                                                    normalize=config.normalize_similarity),
                                           config.lam if config.lam > 0 else 1.0))
                if need_grads:
                    graph.backward(loss)
                    grads = {k: (p.grad.copy() if p.grad is not None
                                 else np.zeros_like(p.data))
                             for k, p in params.items()}
                    return float(loss.data), grads
                return float(loss.data), None
        return loss_fn

    errors = {}
    for kind in ("cls", "con", "total"):
        errors[kind] = nc.grad_check(
            make_loss(kind), model.params, epsilon=epsilon,
            max_entries_per_param=max_entries_per_param,
            rng=np.random.default_rng(seed + 17))
    return {"epsilon": epsilon, "seed": seed, "threshold": GRADCHECK_THRESHOLD,
            "max_rel_error": errors}


# ---------------------------------------------------------------------------
# dispatch


_COMMANDS = {
    "transform": _cmd_transform,
    "filter": _cmd_filter,
    "stats": _cmd_stats,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "baseline": _cmd_baseline,
    "gradcheck": _cmd_gradcheck,
}


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("missing subcommand")
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "detail": str(exc)}), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(json.dumps({"error": "data", "detail": str(exc)}), file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(json.dumps({"error": "numeric", "detail": str(exc)}), file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
