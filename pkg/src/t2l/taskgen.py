"""Synthetic token-level fine-tuning tasks with templated descriptions.

Token protocol (shared with the base model): 0 = PAD, 1 = SEP, 2 = EOS,
data tokens live in [3, 62]; token 63 is reserved. "Digit" tasks encode the
value v as token 3+v. Every example is generated by a deterministic rule and
re-checked against it before it is admitted.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigError, FormatError

PAD, SEP, EOS = 0, 1, 2
DATA_LO, DATA_HI = 3, 62
DIGIT_LO = 3
LOWER_LO, LOWER_HI = 3, 32
UPPER_OFFSET = 30

_NUMBER_WORDS = {
    0: "zero", 1: "one", 2: "two", 3: "three", 4: "four", 5: "five",
    6: "six", 7: "seven", 8: "eight", 9: "nine", 10: "ten",
    11: "eleven", 12: "twelve",
}

KINDS = (
    "copy",
    "reverse",
    "sort",
    "modular_add",
    "case_map",
    "successor",
    "filter_token",
    "swap_pairs",
)


@dataclass
class ToyTask:
    kind: str
    params: dict
    task_id: str
    train: list  # [(xs, ys)] tuples of token tuples
    test: list
    descriptions: list  # train-split description strings
    eval_descriptions: list = field(default_factory=list)


@dataclass
class TaskSuite:
    training: list  # [ToyTask]
    held_out: list

    def __post_init__(self):
        seen = {(t.kind, _param_key(t.params)) for t in self.training}
        for t in self.held_out:
            if (t.kind, _param_key(t.params)) in seen:
                raise ConfigError(
                    f"held-out task {t.task_id} duplicates a training parameterization"
                )

    def task_by_id(self, task_id: str) -> ToyTask:
        for t in self.training + self.held_out:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)


def _param_key(params: dict) -> tuple:
    return tuple(sorted(params.items()))


# ---------------------------------------------------------------------------
# rules


def apply_rule(kind: str, params: dict, xs: tuple) -> tuple:
    """The deterministic ground-truth mapping for each task kind."""
    if kind == "copy":
        return tuple(xs)
    if kind == "reverse":
        return tuple(reversed(xs))
    if kind == "sort":
        return tuple(sorted(xs))
    if kind == "modular_add":
        k = params["modulus"]
        total = sum(x - DIGIT_LO for x in xs) % k
        return (DIGIT_LO + total,)
    if kind == "case_map":
        return tuple(x + UPPER_OFFSET for x in xs)
    if kind == "successor":
        return tuple(DATA_LO + (x - DATA_LO + 1) % (DATA_HI - DATA_LO + 1) for x in xs)
    if kind == "filter_token":
        target = DIGIT_LO + params["target"]
        return tuple(x for x in xs if x != target)
    if kind == "swap_pairs":
        out = list(xs)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return tuple(out)
    raise ConfigError(f"unsupported task kind: {kind!r}")


def _sample_prompt(kind: str, params: dict, rng: np.random.Generator) -> tuple:
    if kind == "modular_add":
        k = params["modulus"]
        n = int(rng.integers(2, 5))
        return tuple(DIGIT_LO + int(v) for v in rng.integers(0, k, size=n))
    if kind == "filter_token":
        target = DIGIT_LO + params["target"]
        n = int(rng.integers(4, 8))
        xs = [DIGIT_LO + int(v) for v in rng.integers(0, 10, size=n)]
        # rule must be observable and leave a non-empty completion
        xs[int(rng.integers(0, n))] = target
        others = [i for i, x in enumerate(xs) if x != target]
        if not others:
            xs[0] = target + 1 if target < DIGIT_LO + 9 else target - 1
        return tuple(xs)
    if kind == "case_map":
        n = int(rng.integers(3, 7))
        return tuple(int(v) for v in rng.integers(LOWER_LO, LOWER_HI + 1, size=n))
    lo = params.get("lo", DATA_LO)
    hi = params.get("hi", DATA_HI)
    n = int(rng.integers(3, 7))
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


# ---------------------------------------------------------------------------
# descriptions

_SUBJECTS = ("the sequence", "the tokens", "the input", "the symbols")


def _expand(frames, **slots) -> list:
    keys = sorted(slots)
    out = []
    for frame in frames:
        for combo in itertools.product(*(slots[k] for k in keys)):
            out.append(frame.format(**dict(zip(keys, combo))))
    return out


def _description_pool(kind: str, params: dict) -> list:
    if kind == "copy":
        return _expand(
            [
                "{v} {s} exactly as given",
                "{v} {s} in the original order",
                "{v} {s} without any changes",
                "{v} {s} verbatim",
                "{v} every token of {s} unchanged",
            ],
            v=("repeat", "copy", "echo", "reproduce", "duplicate", "restate"),
            s=_SUBJECTS,
        )
    if kind == "reverse":
        return _expand(
            [
                "{v} {s} in reverse order",
                "{v} {s} backwards",
                "{v} {s} from last to first",
                "{v} {s} starting at the end",
                "{v} {s} back to front",
            ],
            v=("write", "output", "return", "give", "produce", "emit"),
            s=_SUBJECTS,
        )
    if kind == "sort":
        lo = params.get("lo", DATA_LO)
        hi = params.get("hi", DATA_HI)
        if (lo, hi) == (DATA_LO, DATA_HI):
            tails = ("", " ascending", " from smallest to largest", " in increasing order")
        elif lo > (DATA_LO + DATA_HI) // 2:
            tails = (
                " drawn from the high half of the alphabet",
                " taken from the upper range",
                " using only high symbols",
                " restricted to the top of the alphabet",
            )
        else:
            tails = (
                " drawn from the low half of the alphabet",
                " taken from the lower range",
                " using only low symbols",
                " restricted to the bottom of the alphabet",
            )
        return _expand(
            ["{v} {s}{t}", "{v} {s} in ascending order{t}"],
            v=("sort", "arrange", "order", "rank", "organize", "rearrange"),
            s=_SUBJECTS[:3],
            t=tails,
        )
    if kind == "modular_add":
        w = _NUMBER_WORDS[params["modulus"]]
        return _expand(
            [
                "add {s} together modulo {w}",
                "sum {s} modulo {w}",
                "compute the total of {s} mod {w}",
                "wrap the sum of {s} around at {w}",
                "reduce the sum of {s} modulo {w}",
                "report the remainder of the sum of {s} divided by {w}",
            ],
            s=("the numbers", "the digits", "the values", "the entries"),
            w=(w,),
        )
    if kind == "case_map":
        return _expand(
            [
                "convert {s} to uppercase",
                "map {s} to the uppercase partners",
                "shift {s} into the upper alphabet",
                "replace {s} with the capital forms",
                "promote {s} to the upper range",
                "uppercase {s}",
            ],
            s=_SUBJECTS,
        )
    if kind == "successor":
        return _expand(
            [
                "replace each token of {s} with its successor",
                "advance {s} by one step",
                "shift {s} one position up the alphabet",
                "increment every value of {s} by one",
                "move {s} to the next symbols",
                "step {s} forward by one",
            ],
            s=_SUBJECTS,
        )
    if kind == "filter_token":
        w = _NUMBER_WORDS[params["target"]]
        return _expand(
            [
                "remove every occurrence of {w} from {s}",
                "delete all {w} tokens in {s} and keep the rest",
                "drop each {w} from {s} and output what remains",
                "filter the {w} entries out of {s}",
                "keep every token of {s} except {w}",
                "discard all copies of {w} in {s}",
            ],
            s=_SUBJECTS,
            w=(w,),
        )
    if kind == "swap_pairs":
        return _expand(
            [
                "swap every adjacent pair in {s}",
                "exchange {s} two tokens at a time",
                "flip each neighbouring pair of {s}",
                "switch every pair of adjacent tokens in {s}",
                "trade places between consecutive tokens of {s}",
            ],
            s=_SUBJECTS,
        )
    raise ConfigError(f"no description templates for kind {kind!r}")


def description_variants(task: ToyTask, split: str, n: int, seed: int) -> list:
    """Draw ``n`` distinct descriptions from the disjoint train/eval pools."""
    pool = _description_pool(task.kind, task.params)
    if split == "train":
        pool = pool[0::2]
    elif split == "eval":
        pool = pool[1::2]
    else:
        raise ConfigError(f"unknown description split {split!r}")
    if n > len(pool):
        raise CapacityError(
            f"{task.kind}: {n} descriptions requested, {split} pool holds {len(pool)}"
        )
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


def unaligned_descriptions(suite: TaskSuite, task: ToyTask, n: int, seed: int) -> list:
    """Training descriptions sampled from tasks other than ``task``."""
    donors = [t for t in suite.training if t.task_id != task.task_id]
    pool = [d for t in donors for d in t.descriptions]
    if not donors or not pool:
        raise CapacityError("unaligned sampling needs at least two tasks with descriptions")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=n, replace=n > len(pool))
    return [pool[i] for i in idx]


def random_string_descriptions(n: int, seed: int) -> list:
    """Uniform random letter strings; the unaligned control arm."""
    rng = np.random.default_rng(seed)
    letters = "abcdefghijklmnopqrstuvwxyz"
    out = []
    for _ in range(n):
        words = []
        for _ in range(int(rng.integers(3, 7))):
            k = int(rng.integers(2, 8))
            words.append("".join(letters[i] for i in rng.integers(0, 26, size=k)))
        out.append(" ".join(words))
    return out


# ---------------------------------------------------------------------------
# task and suite construction


def default_task_id(kind: str, params: dict) -> str:
    if not params:
        return kind
    suffix = "_".join(f"{k}{v}" for k, v in sorted(params.items()))
    return f"{kind}_{suffix}"


def make_task(
    kind: str,
    params: dict | None,
    n_train: int,
    n_test: int,
    n_descriptions: int,
    seed: int,
) -> ToyTask:
    if kind not in KINDS:
        raise ConfigError(f"unsupported task kind: {kind!r} (supported: {', '.join(KINDS)})")
    if min(n_train, n_test, n_descriptions) <= 0:
        raise ConfigError("n_train, n_test and n_descriptions must be positive")
    params = dict(params or {})
    rng = np.random.default_rng(seed)

    prompts: dict[tuple, None] = {}
    budget = 200 * (n_train + n_test)
    while len(prompts) < n_train + n_test and budget:
        prompts[_sample_prompt(kind, params, rng)] = None
        budget -= 1
    if len(prompts) < n_train + n_test:
        raise CapacityError(
            f"{kind}{params}: cannot draw {n_train + n_test} distinct prompts"
        )
    examples = []
    for xs in prompts:
        ys = apply_rule(kind, params, xs)
        assert apply_rule(kind, params, xs) == ys  # self-check at generation
        examples.append((xs, ys))

    task = ToyTask(
        kind=kind,
        params=params,
        task_id=default_task_id(kind, params),
        train=examples[:n_train],
        test=examples[n_train:],
        descriptions=[],
    )
    task.descriptions = description_variants(task, "train", n_descriptions, seed)
    eval_cap = len(_description_pool(kind, params)[1::2])
    task.eval_descriptions = description_variants(
        task, "eval", min(n_descriptions, eval_cap), seed + 1
    )
    return task


DEFAULT_TRAINING = (
    ("copy", {}),
    ("reverse", {}),
    ("sort", {}),
    ("case_map", {}),
    ("successor", {}),
    ("modular_add", {"modulus": 5}),
    ("modular_add", {"modulus": 7}),
    ("filter_token", {"target": 4}),
)

DEFAULT_HELD_OUT = (
    ("sort", {"lo": 33, "hi": 62}),
    ("modular_add", {"modulus": 6}),
    ("swap_pairs", {}),
)

EXTRA_MENU = (
    ("modular_add", {"modulus": 3}),
    ("modular_add", {"modulus": 4}),
    ("modular_add", {"modulus": 8}),
    ("modular_add", {"modulus": 9}),
    ("filter_token", {"target": 7}),
    ("filter_token", {"target": 2}),
    ("sort", {"lo": 3, "hi": 32}),
    ("filter_token", {"target": 9}),
)


def make_suite(
    seed: int,
    n_train: int = 96,
    n_test: int = 32,
    n_descriptions: int = 8,
    n_training_tasks: int | None = None,
) -> TaskSuite:
    """Default suite: 8 training tasks (extendable to 16), 3 held-out tasks."""
    menu = list(DEFAULT_TRAINING)
    if n_training_tasks is not None:
        if n_training_tasks > len(DEFAULT_TRAINING) + len(EXTRA_MENU):
            raise CapacityError(f"at most {len(DEFAULT_TRAINING) + len(EXTRA_MENU)} training tasks")
        menu = (list(DEFAULT_TRAINING) + list(EXTRA_MENU))[:n_training_tasks]
    training = [
        make_task(kind, params, n_train, n_test, n_descriptions, seed + 101 * i)
        for i, (kind, params) in enumerate(menu)
    ]
    held_out = [
        make_task(kind, params, n_train, n_test, n_descriptions, seed + 9001 + 101 * i)
        for i, (kind, params) in enumerate(DEFAULT_HELD_OUT)
    ]
    return TaskSuite(training=training, held_out=held_out)


def pretrain_mixture_batch(rng: np.random.Generator, n: int, kinds=None) -> list:
    """Unlabeled rule mixture for generic base-model pretraining.

    Random per-sample parameters, no task identifiers: the model can learn
    the format and generic circuits but must hedge over the actual rule.
    The extra "shift" arm (token-wise rotation by a per-sample offset that
    is inferable in context after one completion token) pushes the copy and
    remap circuits toward exactness without un-hedging any fixed rule.
    """
    kinds = kinds or ("copy", "reverse", "sort", "modular_add", "case_map",
                      "successor", "filter_token", "shift")
    span = DATA_HI - DATA_LO + 1
    out = []
    for _ in range(n):
        kind = kinds[int(rng.integers(0, len(kinds)))]
        if kind == "shift":
            delta = int(rng.integers(0, 10))
            m = int(rng.integers(3, 7))
            xs = tuple(int(v) for v in rng.integers(DATA_LO, DATA_HI + 1, size=m))
            ys = tuple(DATA_LO + (x - DATA_LO + delta) % span for x in xs)
            out.append((xs, ys))
            continue
        if kind == "modular_add":
            params = {"modulus": int(rng.integers(3, 11))}
        elif kind == "filter_token":
            params = {"target": int(rng.integers(0, 10))}
        elif kind == "sort" and rng.random() < 0.5:
            lo = int(rng.integers(DATA_LO, DATA_HI - 10))
            params = {"lo": lo, "hi": int(rng.integers(lo + 8, DATA_HI + 1))}
        else:
            params = {}
        xs = _sample_prompt(kind, params, rng)
        out.append((xs, apply_rule(kind, params, xs)))
    return out


# ---------------------------------------------------------------------------
# plain-text dump/load


def _dump_task(lines: list, task: ToyTask):
    lines.append(f"task {task.task_id}")
    lines.append(f"kind {task.kind}")
    params = ",".join(f"{k}={v}" for k, v in sorted(task.params.items())) or "-"
    lines.append(f"params {params}")
    for label, descs in (("train_descriptions", task.descriptions),
                         ("eval_descriptions", task.eval_descriptions)):
        lines.append(f"{label} {len(descs)}")
        lines.extend(descs)
    for label, split in (("train", task.train), ("test", task.test)):
        lines.append(f"{label} {len(split)}")
        for xs, ys in split:
            lines.append(" ".join(map(str, xs)) + "\t" + " ".join(map(str, ys)))
    lines.append("end")


def dump_suite(suite: TaskSuite, path):
    lines = ["t2l-suite v1", f"training {len(suite.training)}"]
    for t in suite.training:
        _dump_task(lines, t)
    lines.append(f"heldout {len(suite.held_out)}")
    for t in suite.held_out:
        _dump_task(lines, t)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, lines):
        self.lines = lines
        self.pos = 0

    def next(self) -> str:
        if self.pos >= len(self.lines):
            raise FormatError("unexpected end of suite file")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def expect(self, prefix: str) -> str:
        line = self.next()
        if not line.startswith(prefix):
            raise FormatError(f"expected {prefix!r}, got {line!r}")
        return line[len(prefix):].strip()


def _parse_params(text: str) -> dict:
    if text == "-":
        return {}
    out = {}
    for pair in text.split(","):
        k, _, v = pair.partition("=")
        out[k] = int(v)
    return out


def _load_task(reader: _LineReader) -> ToyTask:
    task_id = reader.expect("task ")
    kind = reader.expect("kind ")
    params = _parse_params(reader.expect("params "))
    descs = []
    for label in ("train_descriptions", "eval_descriptions"):
        n = int(reader.expect(f"{label} "))
        descs.append([reader.next() for _ in range(n)])
    splits = []
    for label in ("train", "test"):
        n = int(reader.expect(f"{label} "))
        rows = []
        for _ in range(n):
            left, _, right = reader.next().partition("\t")
            xs = tuple(int(v) for v in left.split())
            ys = tuple(int(v) for v in right.split())
            if apply_rule(kind, params, xs) != ys:
                raise FormatError(f"example fails the {kind} rule check: {xs} -> {ys}")
            rows.append((xs, ys))
        splits.append(rows)
    if reader.next() != "end":
        raise FormatError("missing task terminator")
    return ToyTask(kind, params, task_id, splits[0], splits[1], descs[0], descs[1])


def load_suite(path) -> TaskSuite:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    reader = _LineReader(lines)
    if reader.next() != "t2l-suite v1":
        raise FormatError("not a task-suite file")
    training = [_load_task(reader) for _ in range(int(reader.expect("training ")))]
    held_out = [_load_task(reader) for _ in range(int(reader.expect("heldout ")))]
    return TaskSuite(training=training, held_out=held_out)
