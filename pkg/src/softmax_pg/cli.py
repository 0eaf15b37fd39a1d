"""Command-line driver: ``gen``, ``train``, ``eval``, ``sample`` and ``oracle``.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines (keys
are flag names, dashes or underscores); flags given on the command line win.
Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import (MAX_TARGET_LEN, TASK_KINDS, DataError, Dataset, TaskSpec,
                   corpus_stats, generate_task, load_dataset, parse_tsv, save_dataset)
from .estimators import REGIMES, EstimatorConfig
from .model import GRUModel, TabularModel, load_checkpoint
from .oracle import BudgetExceeded, format_report, run_suite
from .rewards import RewardConfig, main_reward
from .samplers import (RamlConfig, RamlSampler, derive_rng, greedy_decode_batch,
                       sample_pg_batch, sample_spg_batch)
from .trainer import TrainConfig, TrainingDiverged, content_tokens, evaluate, metrics_path_for, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
DEFAULT_TAU = 0.85
CHECKPOINT_NAME = "best.npz"
RUN_CONFIG_NAME = "run.cfg"

log = logging.getLogger("softmax_pg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


def _length_range(text: str):
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN:MAX, got {text!r}")
    return lo, hi


def _optional_float(text: str):
    return None if text.lower() in ("", "none") else float(text)


def _optional_int(text: str):
    return None if text.lower() in ("", "none") else int(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="softmax-pg", description=__doc__.split("\n")[0],
                     formatter_class=_Formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity (written to stderr)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="key = value file; command-line flags override it")
        p.add_argument("--seed", type=int, default=0, help="master random seed")

    g = sub.add_parser("gen", help="generate a synthetic task or import a TSV corpus",
                       formatter_class=_Formatter)
    common(g)
    g.add_argument("--task", choices=TASK_KINDS, default="copy", help="transform applied to x")
    g.add_argument("--vocab", type=int, default=20, help="vocabulary size including 3 reserved ids")
    g.add_argument("--len", type=_length_range, default=(4, 8), dest="length", metavar="MIN:MAX",
                   help="input length range")
    g.add_argument("--train", type=int, default=2000, help="training examples")
    g.add_argument("--valid", type=int, default=200, help="validation examples")
    g.add_argument("--test", type=int, default=200, help="test examples")
    g.add_argument("--t-max", type=int, default=15, help="maximum decode length")
    g.add_argument("--distinct", action=argparse.BooleanOptionalAction, default=True,
                   help="draw input tokens without replacement")
    g.add_argument("--from-tsv", type=Path, default=None,
                   help="import this TSV as the training split instead of generating")
    g.add_argument("--valid-tsv", type=Path, default=None, help="validation TSV (with --from-tsv)")
    g.add_argument("--test-tsv", type=Path, default=None, help="test TSV (with --from-tsv)")
    g.add_argument("--max-vocab", type=_optional_int, default=None,
                   help="cap on the imported vocabulary, reserved ids included")
    g.add_argument("--out", type=Path, required=True, help="output dataset directory")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model", formatter_class=_Formatter)
    common(t)
    t.add_argument("--data", type=Path, required=True, help="dataset directory written by gen")
    t.add_argument("--out", type=Path, required=True, help="run directory for metrics and checkpoint")
    t.add_argument("--regime", choices=REGIMES, default="spg", help="training objective")
    t.add_argument("--p-drop", type=float, default=0.4, help="probability that a step weight is 0")
    t.add_argument("--W", type=float, default=10000.0, help="bang-bang weight magnitude")
    t.add_argument("--tau", type=_optional_float, default=None,
                   help=f"RAML temperature (raml only; {DEFAULT_TAU} when omitted)")
    t.add_argument("--j", type=int, default=1, help="targets sampled per example")
    t.add_argument("--dup", action=argparse.BooleanOptionalAction, default=True,
                   help="penalise immediate repeats (training and greedy evaluation)")
    t.add_argument("--eos", action=argparse.BooleanOptionalAction, default=True,
                   help="penalise EOS before the reference length")
    t.add_argument("--reward-weighting", action=argparse.BooleanOptionalAction, default=True,
                   help="scale each SPG target's loss by its main reward")
    t.add_argument("--max-edits", type=int, default=2, help="RAML approximate-mode edit cap")
    t.add_argument("--backend", choices=("gru", "tabular"), default="gru", help="policy model")
    t.add_argument("--emb", type=int, default=32, help="GRU embedding size")
    t.add_argument("--hidden", type=int, default=32, help="GRU hidden size")
    t.add_argument("--contexts", type=int, default=1, help="tabular context classes")
    t.add_argument("--lr", type=float, default=0.2, help="Adagrad learning rate")
    t.add_argument("--clip", type=float, default=4.0, help="global gradient-norm clip")
    t.add_argument("--batch", type=int, default=32, help="examples per optimizer step")
    t.add_argument("--steps", type=int, default=20000, help="maximum optimizer steps")
    t.add_argument("--eval-interval", type=int, default=250, help="steps between evaluations")
    t.add_argument("--eval-limit", type=_optional_int, default=None,
                   help="evaluate on the first N validation examples only")
    t.add_argument("--target", type=_optional_float, default=None,
                   help="stop once validation main reward reaches this value")
    t.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=_Formatter)
    common(e)
    e.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file or run directory")
    e.add_argument("--data", type=Path, required=True, help="dataset directory")
    e.add_argument("--split", default="valid", help="split to evaluate")
    e.add_argument("--W", type=_optional_float, default=None,
                   help="test-time DUP weight (checkpoint's value when omitted)")
    e.add_argument("--dup", action=argparse.BooleanOptionalAction, default=None,
                   help="test-time DUP penalty (checkpoint's setting when omitted)")
    e.add_argument("--dump", type=int, default=0, metavar="N",
                   help="print N examples decoded with and without DUP")
    e.add_argument("--json", action="store_true", help="print metrics as JSON")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="show training targets drawn for one example",
                       formatter_class=_Formatter)
    common(s)
    s.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file or run directory")
    s.add_argument("--data", type=Path, required=True, help="dataset directory")
    s.add_argument("--split", default="train", help="split holding the example")
    s.add_argument("--index", type=int, default=0, help="example index within the split")
    s.add_argument("--n", type=int, default=5, help="number of targets to draw")
    s.add_argument("--regime", choices=("spg", "pg", "raml"), default="spg", help="target sampler")
    s.add_argument("--p-drop", type=float, default=0.4, help="probability that a step weight is 0")
    s.add_argument("--W", type=float, default=10000.0, help="bang-bang weight magnitude")
    s.add_argument("--tau", type=_optional_float, default=None,
                   help=f"RAML temperature (raml only; {DEFAULT_TAU} when omitted)")
    s.add_argument("--dup", action=argparse.BooleanOptionalAction, default=True, help="DUP term")
    s.add_argument("--eos", action=argparse.BooleanOptionalAction, default=True, help="EOS term")
    s.set_defaults(func=cmd_sample)

    o = sub.add_parser("oracle", help="run the brute-force verification suite",
                       formatter_class=_Formatter)
    common(o)
    o.set_defaults(seed=1)
    o.add_argument("--v", type=int, default=4, help="enumeration vocabulary size")
    o.add_argument("--t", type=int, default=3, help="enumeration sequence length")
    o.add_argument("--samples", type=int, default=200000, help="Monte Carlo draws per check")
    o.add_argument("--w-all-zero", action="store_true",
                   help="also check that all-zero weights give an exactly zero gradient")
    o.add_argument("--json", action="store_true", help="one JSON record per line")
    o.set_defaults(func=cmd_oracle)
    return parser


# ---------------------------------------------------------------------------
# config files


def read_config(path: Path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys use - or _."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}")
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _config_argv(sub: argparse.ArgumentParser, config: dict, source) -> list:
    """Translate config entries into flag tokens for ``sub``."""
    actions = {}
    for a in sub._actions:
        if a.option_strings and a.dest not in ("help", "config"):
            actions[a.dest] = a
            for opt in a.option_strings:
                if not opt.startswith("--no-"):
                    actions[opt.lstrip("-").replace("-", "_")] = a
    argv = []
    for key, value in config.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"{source}: unknown key {key!r}")
        if isinstance(action, argparse.BooleanOptionalAction):
            flag = value.lower()
            if flag not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{source}: {key} expects true or false, got {value!r}")
            on = flag in ("true", "1", "yes")
            argv.append(action.option_strings[0] if on else action.option_strings[1])
        elif action.nargs == 0:
            if value.lower() in ("true", "1", "yes"):
                argv.append(action.option_strings[0])
        else:
            argv += [action.option_strings[0], value]
    return argv


def _find_config(argv, commands):
    """(index of the subcommand, config path or None) by scanning argv."""
    pos = next((i for i, tok in enumerate(argv) if tok in commands), None)
    if pos is None:
        return None, None
    config = None
    rest = argv[pos + 1:]
    for i, tok in enumerate(rest):
        if tok == "--config" and i + 1 < len(rest):
            config = rest[i + 1]
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
    return pos, config


def parse_args(argv):
    parser = build_parser()
    commands = parser._subparsers._group_actions[0].choices
    pos, config_path = _find_config(argv, commands)
    if config_path is not None:
        config = read_config(Path(config_path))
        sub = commands[argv[pos]]
        argv = list(argv[:pos + 1]) + _config_argv(sub, config, config_path) + list(argv[pos + 1:])
    return parser.parse_args(argv)


def write_config(path: Path, values: dict) -> None:
    lines = []
    for key, value in values.items():
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (tuple, list)):
            value = ":".join(str(v) for v in value)
        lines.append(f"{key.replace('_', '-')} = {value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def _check_out_dir(path: Path, force: bool):
    if path.exists() and not path.is_dir():
        raise DataError(f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise DataError(f"{path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


def cmd_gen(args) -> int:
    _check_out_dir(args.out, args.force)
    if args.from_tsv is not None:
        train_set, vocab, skipped = parse_tsv(args.from_tsv, None, args.max_vocab)
        splits = {"train": train_set}
        for name, path in (("valid", args.valid_tsv), ("test", args.test_tsv)):
            if path is not None:
                splits[name] = parse_tsv(path, vocab)[0]
        dataset = Dataset(vocab, splits)
    else:
        if args.valid_tsv or args.test_tsv:
            raise UsageError("--valid-tsv and --test-tsv need --from-tsv")
        lo, hi = args.length
        try:
            spec = TaskSpec(kind=args.task, vocab_size=args.vocab, min_len=lo, max_len=hi,
                            n_train=args.train, n_valid=args.valid, n_test=args.test,
                            seed=args.seed, distinct=args.distinct, t_max=args.t_max)
        except ValueError as exc:
            raise UsageError(str(exc))
        dataset = generate_task(spec)
    save_dataset(dataset, args.out)
    stats = {name: corpus_stats(ex, len(dataset.vocab)) for name, ex in dataset.splits.items()}
    print(json.dumps({"out": str(args.out), "vocab_size": len(dataset.vocab), "splits": stats},
                     indent=2, sort_keys=True))
    return EXIT_OK


def _load_data(path: Path) -> Dataset:
    if not path.is_dir():
        raise DataError(f"dataset directory {path} not found")
    return load_dataset(path)


def _t_max(dataset: Dataset) -> int:
    if dataset.spec is not None:
        return dataset.spec.t_max
    longest = max((len(ex.y) for split in dataset.splits.values() for ex in split), default=1)
    return max(longest, MAX_TARGET_LEN + 1)


def _resolve_tau(args) -> float:
    if args.tau is not None and args.regime != "raml":
        raise UsageError(f"--tau only applies to --regime raml, not {args.regime}")
    tau = DEFAULT_TAU if args.tau is None else args.tau
    if not tau > 0:
        raise UsageError("--tau must be positive")
    return tau


def cmd_train(args) -> int:
    tau = _resolve_tau(args)
    if not 0.0 <= args.p_drop <= 1.0:
        raise UsageError("--p-drop must lie in [0, 1]")
    if args.W <= 0 or args.j < 1 or args.steps < 1 or args.eval_interval < 1:
        raise UsageError("--W must be positive; --j, --steps and --eval-interval at least 1")
    dataset = _load_data(args.data)
    for name in ("train", "valid"):
        if not dataset.splits.get(name):
            raise DataError(f"{args.data} has no {name} split")
    _check_out_dir(args.out, args.force)
    V, t_max = len(dataset.vocab), _t_max(dataset)
    if args.backend == "gru":
        model = GRUModel(V, t_max, args.emb, args.hidden)
        params = model.init_params(derive_rng(args.seed, 0xC0FFEE))
    else:
        model = TabularModel(V, t_max, args.contexts)
        params = model.init_params(derive_rng(args.seed, 0xC0FFEE), 0.0)
    reward = RewardConfig(W=args.W, p_drop=args.p_drop, use_dup=args.dup, use_eos=args.eos)
    est = EstimatorConfig(args.regime, J=args.j, reward=reward,
                          raml=RamlConfig(tau=tau, max_edits=args.max_edits),
                          reward_weighting=args.reward_weighting)
    config = TrainConfig(estimator=est, lr=args.lr, clip=args.clip, batch_size=args.batch,
                         max_steps=args.steps, eval_interval=args.eval_interval, seed=args.seed,
                         target_reward=args.target, eval_limit=args.eval_limit)
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "command", "config", "force", "log_level")}
    resolved["tau"] = tau if args.regime == "raml" else None
    write_config(args.out / RUN_CONFIG_NAME, {k: str(v) if isinstance(v, Path) else v
                                              for k, v in resolved.items()})
    try:
        result = train(model, params, config, dataset.splits["train"], dataset.splits["valid"],
                       metrics_path=metrics_path_for(args.out),
                       checkpoint_path=args.out / CHECKPOINT_NAME,
                       dump_path=args.out / "diverged.npz")
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_VERIFY
    print(json.dumps({"best_step": result.best_step, "best_main_reward": result.best_reward,
                      "steps_to_target": result.steps_to_target,
                      "mean_step_ms": round(result.mean_step_ms, 3),
                      "checkpoint": str(args.out / CHECKPOINT_NAME),
                      "metrics": str(metrics_path_for(args.out))}, indent=2))
    return EXIT_OK


def _load_model(path: Path, dataset: Dataset):
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    if not path.is_file():
        raise DataError(f"checkpoint {path} not found")
    try:
        model, params, meta = load_checkpoint(path)
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})")
    if model.vocab_size != len(dataset.vocab):
        raise DataError(f"checkpoint vocabulary size {model.vocab_size} does not match "
                        f"dataset vocabulary size {len(dataset.vocab)}")
    return model, params, meta


def _split(dataset: Dataset, name: str):
    if name not in dataset.splits:
        raise DataError(f"dataset has no {name!r} split (has {sorted(dataset.splits)})")
    return dataset.splits[name]


def _words(vocab, ids) -> str:
    return " ".join(vocab.decode(ids))


def cmd_eval(args) -> int:
    dataset = _load_data(args.data)
    model, params, meta = _load_model(args.checkpoint, dataset)
    examples = _split(dataset, args.split)
    saved = meta.get("extra", {}).get("reward", {})
    W = args.W if args.W is not None else float(saved.get("W", 10000.0))
    dup = args.dup if args.dup is not None else bool(saved.get("use_dup", True))
    reward = RewardConfig(W=W, use_dup=dup)
    metrics = evaluate(model, params, examples, reward)
    metrics.update(split=args.split, checkpoint_step=meta.get("extra", {}).get("step"), dup=dup)
    if args.json:
        print(json.dumps(metrics, sort_keys=True))
    else:
        print(f"split={args.split} n={metrics['n']} rougeL={metrics['rougeL']:.4f} "
              f"main_reward={metrics['main_reward']:.4f} exact_match={metrics['exact_match']:.4f} "
              f"dup={'on' if dup else 'off'}")
    if args.dump > 0:
        shown = examples[:args.dump]
        xs = [ex.x for ex in shown]
        with_dup = greedy_decode_batch(model, params, xs, RewardConfig(W=W, use_dup=True))
        without = greedy_decode_batch(model, params, xs, RewardConfig(W=W, use_dup=False))
        for i, (ex, a, b) in enumerate(zip(shown, without, with_dup)):
            print(f"[{i}] input     : {_words(dataset.vocab, ex.x)}")
            print(f"    reference : {_words(dataset.vocab, ex.y)}")
            print(f"    no DUP    : {_words(dataset.vocab, a)}  (R={main_reward(a, ex.y):.3f})")
            print(f"    with DUP  : {_words(dataset.vocab, b)}  (R={main_reward(b, ex.y):.3f})")
    return EXIT_OK


def cmd_sample(args) -> int:
    tau = _resolve_tau(args)
    dataset = _load_data(args.data)
    model, params, _ = _load_model(args.checkpoint, dataset)
    examples = _split(dataset, args.split)
    if not 0 <= args.index < len(examples):
        raise UsageError(f"--index must lie in [0, {len(examples)})")
    ex = examples[args.index]
    rng = derive_rng(args.seed, args.index)
    vocab = dataset.vocab
    print(f"input     : {_words(vocab, ex.x)}")
    print(f"reference : {_words(vocab, ex.y)}")
    if args.regime == "spg":
        config = RewardConfig(W=args.W, p_drop=args.p_drop, use_dup=args.dup, use_eos=args.eos)
        outs = sample_spg_batch(model, params, [ex.x] * args.n, [ex.y] * args.n, config, rng)
        print("tokens tagged [R] were drawn from the reward-tilted row, [M] from the model")
        for o in outs:
            toks = " ".join(f"{vocab.id_to_token[t]}[{'R' if w else 'M'}]" for t, w in zip(o.z, o.w))
            print(f"  R={o.reward:.3f} log_q={o.log_q_tilde:.3f} : {toks}")
    elif args.regime == "pg":
        for z in sample_pg_batch(model, params, [ex.x] * args.n, rng):
            print(f"  R={main_reward(z, ex.y):.3f} : {_words(vocab, z)}")
    else:
        tokens = content_tokens(examples, model.vocab_size, vocab.eos_id)
        sampler = RamlSampler(RamlConfig(tau=tau), tokens, vocab.eos_id, seed=args.seed)
        for _ in range(args.n):
            z = sampler.sample(ex.y, rng)
            print(f"  R={main_reward(z, ex.y):.3f} : {_words(vocab, z)}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.v < 2 or args.t < 1 or args.samples < 40:
        raise UsageError("need --v >= 2, --t >= 1 and --samples >= 40")
    try:
        records = run_suite(args.v, args.t, args.samples, args.seed, args.w_all_zero)
    except BudgetExceeded as exc:
        raise UsageError(str(exc))
    if args.json:
        for r in records:
            print(r.to_json())
    else:
        print(format_report(records))
    failed = [r.name for r in records if not r.passed]
    if failed:
        log.error("verification failed: %s", ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"softmax-pg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help, --version and argparse usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"softmax-pg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"softmax-pg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
