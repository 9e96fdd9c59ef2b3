"""Command-line entry point: generate, train, finetune, disentangle, eval, selftest.

Every option may also come from a ``--config`` file of ``key=value`` lines
(keys spelled like the long flag, dashes or underscores). Explicit flags win
over the file, which wins over built-in defaults.

Exit codes: 0 success, 1 usage error, 2 data or integrity error, 3 numerical
failure (including a failed selftest).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import __version__
from .data import (
    DataError,
    ResponseSelectionExample,
    ThreadPartition,
    Utterance,
    load_dialogues,
    load_links,
    save_dialogues,
    save_links,
    save_partitions,
)
from .disentangler import DisentangleConfig, disentangle
from .metrics import HEADER, EvaluationError, evaluate
from .model import CapacityError, Model, ModelConfig, VocabError
from .numerics import CheckpointError, NumericalError
from .synthgen import ConfigError, GenConfig, build_selection_set, generate_corpus, read_key_value_file
from .training import (
    TrainConfig,
    check_selection_gradients,
    finetune_links,
    link_examples,
    select_fraction,
    train,
    window_example,
)

log = logging.getLogger("threadlink")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def _range(text: str) -> tuple[int, int]:
    parts = text.replace(",", "-").split("-")
    try:
        lo, hi = (int(parts[0]), int(parts[0])) if len(parts) == 1 else (int(parts[0]), int(parts[1]))
    except (ValueError, IndexError):
        raise argparse.ArgumentTypeError(f"expected N or LO-HI, got {text!r}") from None
    return lo, hi


def _bool(text: str | bool) -> bool:
    if isinstance(text, bool):
        return text
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


@dataclass(frozen=True)
class Opt:
    flag: str
    type: Callable[[str], Any] | None
    default: Any
    help: str
    choices: Sequence[Any] | None = None

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


_MODEL_OPTS = [
    Opt("--vocab-size", _positive, 1000, "token vocabulary size"),
    Opt("--embed-dim", _positive, 64, "token embedding width"),
    Opt("--model-dim", _positive, 32, "pair vector / transformer width"),
    Opt("--heads", _positive, 4, "attention heads in the context transformer"),
    Opt("--max-context", _positive, 8, "longest context the model accepts"),
    Opt("--attn-hidden", _positive, 32, "hidden units of the attention MLP"),
    Opt("--scorer-hidden", _positive, 32, "hidden units of the scorer MLP"),
    Opt("--ff-hidden", _positive, 64, "hidden units of the transformer feed-forward block"),
    Opt("--uniform-pooling", _bool, False, "ablation: average the rows instead of attending"),
    Opt("--train-embeddings", _bool, False, "also train the token embedding table"),
]

_TRAIN_OPTS = [
    Opt("--w", float, 0.25, "weight of the attention loss in [0, 1]"),
    Opt("--lr", float, 1e-3, "Adam learning rate"),
    Opt("--epochs", int, 30, "training epochs"),
    Opt("--batch-size", _positive, 1, "examples per optimizer step"),
    Opt("--eval-every", _positive, 1, "evaluate and checkpoint every N epochs"),
]

_COMMON = [
    Opt("--seed", int, 0, "master random seed"),
    Opt("--jobs", _positive, 1, "worker cap (computation is single-worker)"),
]

SUBCOMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "generate": ("write synthetic entangled dialogues with gold links", [
        Opt("--out", str, None, "output dialogue file"),
        Opt("--dialogues", _positive, 1, "number of dialogues"),
        Opt("--start", int, 0, "index of the first dialogue (for disjoint splits)"),
        Opt("--threads", _positive, 3, "threads per dialogue"),
        Opt("--utterances-per-thread", _range, (8, 10), "utterances per thread, N or LO-HI"),
        Opt("--vocab-size", _positive, 1000, "token vocabulary size"),
        Opt("--topic-tokens", _positive, 5, "topic tokens per thread"),
        Opt("--tokens-per-utterance", _range, (4, 6), "tokens per utterance, N or LO-HI"),
        Opt("--speakers-per-thread", _positive, 2, "speakers per thread"),
        Opt("--topic-purity", float, 1.0, "probability that a token is on-topic"),
    ]),
    "train": ("self-supervised entangled response selection", [
        Opt("--data", str, None, "training dialogues"),
        Opt("--val", str, None, "validation dialogues (default: training R@1 selects the best epoch)"),
        Opt("--out", str, None, "checkpoint directory"),
        Opt("--m", _positive, 10, "candidates per example (1 correct + m-1 negatives)"),
        *_TRAIN_OPTS, *_MODEL_OPTS,
    ]),
    "finetune": ("few-shot supervision of attention with gold reply-to links", [
        Opt("--data", str, None, "dialogues with gold links"),
        Opt("--val", str, None, "validation dialogues for best-checkpoint selection by link F1"),
        Opt("--model", str, None, "pretrained checkpoint (omit to start from scratch)"),
        Opt("--out", str, None, "checkpoint directory"),
        Opt("--data-pct", int, 100, "percentage of dialogues used, taken from the start of the file",
            choices=(1, 10, 100)),
        Opt("--window", _positive, 8, "preceding utterances visible to each link decision"),
        *_TRAIN_OPTS, *_MODEL_OPTS,
    ]),
    "disentangle": ("predict reply-to links and threads", [
        Opt("--model", str, None, "checkpoint file"),
        Opt("--in", str, None, "dialogue file (gold links, if any, are ignored)"),
        Opt("--links", str, None, "output link file"),
        Opt("--partition", str, None, "optional output partition file"),
        Opt("--window", _positive, 8, "preceding utterances visible to each link decision"),
    ]),
    "eval": ("score predicted links against gold dialogues", [
        Opt("--gold", str, None, "dialogues with gold links"),
        Opt("--links", str, None, "predicted link file"),
        Opt("--header", _bool, False, "print a header line before the metric row"),
    ]),
    "selftest": ("gradient checks and metric oracles", [
        Opt("--seeds", _positive, 5, "random models per loss weight"),
    ]),
}

_REQUIRED = {
    "generate": ["out"],
    "train": ["data", "out"],
    "finetune": ["data", "out"],
    "disentangle": ["model", "in", "links"],
    "eval": ["gold", "links"],
    "selftest": [],
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="threadlink", description="Zero-shot dialogue disentanglement.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (text, opts) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="key=value file supplying option values")
        for o in [*opts, *_COMMON]:
            if o.type is _bool:
                p.add_argument(o.flag, nargs="?", const=True, type=_bool, default=argparse.SUPPRESS,
                               help=f"{o.help} (default {o.default})")
            else:
                p.add_argument(o.flag, type=o.type, choices=o.choices, default=argparse.SUPPRESS,
                               help=f"{o.help} (default {o.default})")
    return parser


def resolve_options(command: str, explicit: dict[str, Any], config_path: str | None) -> dict[str, Any]:
    """Merge defaults, then config-file values, then explicit flags."""
    opts = {o.dest: o for o in [*SUBCOMMANDS[command][1], *_COMMON]}
    values = {dest: o.default for dest, o in opts.items()}
    if config_path:
        try:
            raw = read_key_value_file(config_path)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        for key, text in raw.items():
            if key not in opts:
                raise UsageError(f"{config_path}: unknown option {key!r} for {command}")
            o = opts[key]
            try:
                value = o.type(text) if o.type else text
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{config_path}: bad value for {key}: {exc}") from exc
            if o.choices and value not in o.choices:
                raise UsageError(f"{config_path}: {key} must be one of {list(o.choices)}")
            values[key] = value
    values.update(explicit)
    missing = [f"--{k.replace('_', '-')}" for k in _REQUIRED[command] if values.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s) {', '.join(missing)}")
    return values


def _model_config(o: dict[str, Any]) -> ModelConfig:
    return ModelConfig(
        vocab_size=o["vocab_size"], embed_dim=o["embed_dim"], model_dim=o["model_dim"], n_heads=o["heads"],
        max_context=o["max_context"], attn_mlp_hidden=o["attn_hidden"], scorer_mlp_hidden=o["scorer_hidden"],
        ff_hidden=o["ff_hidden"], seed=o["seed"], uniform_pooling=o["uniform_pooling"],
        train_token_embeddings=o["train_embeddings"],
    )


def _train_config(o: dict[str, Any], m: int = 10) -> TrainConfig:
    return TrainConfig(w=o["w"], learning_rate=o["lr"], epochs=o["epochs"], batch_size=o["batch_size"],
                       m_candidates=m, seed=o["seed"], eval_every=o["eval_every"])


# ------------------------------------------------------------ subcommands


def cmd_generate(o: dict[str, Any]) -> int:
    cfg = GenConfig(
        n_threads=o["threads"], utterances_per_thread=o["utterances_per_thread"], vocab_size=o["vocab_size"],
        topic_tokens_per_thread=o["topic_tokens"], tokens_per_utterance=o["tokens_per_utterance"],
        speakers_per_thread=o["speakers_per_thread"], topic_purity=o["topic_purity"], seed=o["seed"],
    )
    save_dialogues(generate_corpus(cfg, o["dialogues"], start=o["start"]), o["out"])
    return EXIT_OK


def _selection_set(path: str, m: int, seed: int, max_context: int):
    dialogues = load_dialogues(path)
    return [window_example(ex, max_context) for ex in build_selection_set(dialogues, m, seed)]


def cmd_train(o: dict[str, Any]) -> int:
    mcfg = _model_config(o)
    data = _selection_set(o["data"], o["m"], o["seed"], mcfg.max_context)
    val = _selection_set(o["val"], o["m"], o["seed"] + 1, mcfg.max_context) if o["val"] else None
    model = Model(mcfg)
    result = train(model, data, _train_config(o, o["m"]), val=val, out_dir=o["out"])
    log.info("best epoch %d", result.best_epoch)
    return EXIT_OK


def cmd_finetune(o: dict[str, Any]) -> int:
    if o["model"]:
        model = Model.load(o["model"])
    else:
        model = Model(_model_config(o))
    window = o["window"]
    if window > model.cfg.max_context:
        raise UsageError(f"--window {window} exceeds the model's max_context {model.cfg.max_context}")
    dialogues = select_fraction(load_dialogues(o["data"]), o["data_pct"])
    examples = link_examples(dialogues, window)
    validate = None
    if o["val"]:
        val = load_dialogues(o["val"])

        def validate(mdl: Model) -> float:
            pred = [disentangle(mdl, d, DisentangleConfig(window))[0] for d in val]
            return evaluate(val, pred).links.link_f1

    finetune_links(model, examples, _train_config(o), validate=validate, out_dir=o["out"])
    return EXIT_OK


def cmd_disentangle(o: dict[str, Any]) -> int:
    model = Model.load(o["model"])
    cfg = DisentangleConfig(window=o["window"])
    if cfg.window > model.cfg.max_context:
        raise UsageError(f"--window {cfg.window} exceeds the model's max_context {model.cfg.max_context}")
    links, parts = [], []
    for d in load_dialogues(o["in"]):
        lk, part = disentangle(model, d.without_links(), cfg)
        links.append(lk)
        parts.append(part)
    save_links(links, o["links"])
    if o["partition"]:
        save_partitions(parts, o["partition"])
    return EXIT_OK


def cmd_eval(o: dict[str, Any]) -> int:
    gold = load_dialogues(o["gold"])
    if any(d.gold_links is None for d in gold):
        raise DataError(f"{o['gold']}: every dialogue needs gold links")
    report = evaluate(gold, load_links(o["links"]))
    if o["header"]:
        print(HEADER)
    print(report.row())
    return EXIT_OK


def selftest_gradients(seeds: int, ws: Sequence[float] = (0.0, 0.25, 1.0)) -> list[tuple[int, float, float]]:
    """Gradient checks on small random models, one random example each."""
    out = []
    for seed in range(seeds):
        for w in ws:
            cfg = ModelConfig(vocab_size=20, embed_dim=8, model_dim=8, n_heads=2, max_context=4,
                              attn_mlp_hidden=6, scorer_mlp_hidden=6, ff_hidden=8, seed=seed)
            model = Model(cfg)
            rng = np.random.default_rng([seed, 1])
            utt = [Utterance(i, "s", tuple(int(t) for t in rng.integers(0, 20, size=4))) for i in range(8)]
            ex = ResponseSelectionExample(tuple(utt[:4]), tuple(utt[4:]), int(rng.integers(4)))
            out.append((seed, w, check_selection_gradients(model, ex, w)))
    return out


def selftest_metrics(n_random: int = 200, seed: int = 0) -> float:
    """Largest disagreement between metric ops and brute-force oracles."""
    from . import metrics, oracles

    parts = [ThreadPartition.from_clusters(p) for p in oracles.set_partitions(list(range(5)))]
    rng = np.random.default_rng(seed)
    pairs = [(a, b) for a in parts for b in parts]
    for _ in range(n_random):
        n = int(rng.integers(1, 11))
        pairs.append((oracles.random_partition(rng, n), oracles.random_partition(rng, n)))
    worst = 0.0
    for a, b in pairs:
        worst = max(worst, abs(metrics.variation_of_information(a, b)[0] - oracles.vi_oracle(a, b)))
        worst = max(worst, abs(metrics.adjusted_rand_index(a, b) - oracles.ari_oracle(a, b)))
        got, ref = metrics.cluster_prf(a, b), oracles.cluster_prf_oracle(a, b)
        worst = max(worst, *(abs(x - y) for x, y in zip(got, ref)))
    return worst


def cmd_selftest(o: dict[str, Any]) -> int:
    ok = True
    t0 = time.perf_counter()
    for seed, w, err in selftest_gradients(o["seeds"]):
        status = "ok" if err < 1e-3 else "FAIL"
        ok &= err < 1e-3
        print(f"grad\tseed={seed}\tw={w}\tmax_rel_err={err:.2e}\t{status}")
    worst = selftest_metrics(seed=o["seed"])
    ok &= worst <= 1e-9
    print(f"metrics\tmax_abs_diff={worst:.2e}\t{'ok' if worst <= 1e-9 else 'FAIL'}")
    print(f"selftest {'passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "finetune": cmd_finetune,
    "disentangle": cmd_disentangle, "eval": cmd_eval, "selftest": cmd_selftest,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("threadlink: a command is required (see --help)")
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        explicit = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
        options = resolve_options(ns.command, explicit, ns.config)
        return COMMANDS[ns.command](options)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, VocabError, CapacityError, CheckpointError, EvaluationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as exc:  # invalid option values caught by config validation
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())

