"""Datasets: piano-roll files, synthetic sequence tasks and standardisation.

Every split is a tuple of ``(inputs, targets)`` pairs with ``inputs`` of shape
``(T, M)``. Targets are class indices ``(T,)`` for framewise classification
and binary arrays ``(T, K)`` for the sigmoid-headed tasks.

Piano-roll container (JSON)::

    {"name": "jsb",
     "n_pitches": 88,
     "splits": {"train": [[[60, 64, 67], [62], ...], ...],
                "valid": [...],
                "test": [...]}}

Each sequence is a list of frames and each frame lists its active pitch
indices (possibly none). Genuine piano-rolls stored as lists of MIDI note
numbers can be converted by subtracting the lowest note used and setting
``n_pitches`` accordingly. Sequences need at least two frames, because the
task predicts frame ``t + 1`` from frames ``1..t``.
"""

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigurationError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
FILE_SPLITS = {"train": "train", "valid": "val", "test": "test"}


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    name: str
    task: str
    n_inputs: int
    n_outputs: int
    train: tuple
    val: tuple
    test: tuple
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for split in SPLITS:
            for k, (x, t) in enumerate(getattr(self, split)):
                if len(x) == 0:
                    raise ConfigurationError(f"{split}[{k}] is empty")
                if len(x) != len(t):
                    raise ConfigurationError(f"{split}[{k}]: inputs and targets differ in length")

    def split(self, name):
        return getattr(self, name)

    def sizes(self):
        return {s: len(getattr(self, s)) for s in SPLITS}


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray


def _split_counts(n, fractions):
    if n < len(fractions):
        raise ConfigurationError(f"need at least {len(fractions)} sequences, got {n}")
    counts = [int(round(n * f)) for f in fractions[1:]]
    counts = [max(1, c) for c in counts]
    return [n - sum(counts)] + counts


def _assemble(name, task, n_inputs, n_outputs, pairs, fractions, meta):
    counts = _split_counts(len(pairs), fractions)
    out, start = [], 0
    for c in counts:
        out.append(tuple(pairs[start:start + c]))
        start += c
    return Dataset(name, task, n_inputs, n_outputs, *out, meta=meta)


# ---------------------------------------------------------------- piano rolls

def rolls_to_pairs(rolls, n_pitches):
    """Binary next-step pairs ``(frames[:-1], frames[1:])`` from active-pitch lists."""
    pairs = []
    for seq in rolls:
        roll = np.zeros((len(seq), n_pitches))
        for t, frame in enumerate(seq):
            roll[t, list(frame)] = 1.0
        pairs.append((roll[:-1], roll[1:]))
    return tuple(pairs)


def pairs_to_rolls(pairs):
    rolls = []
    for x, t in pairs:
        roll = np.vstack([x, t[-1:]])
        rolls.append([[int(p) for p in np.flatnonzero(frame)] for frame in roll])
    return rolls


def _line_of(text, path):
    """Line number of the JSON value at ``path`` (object keys and list indices), or None."""
    stack = []
    i, n = 0, len(text)

    def here():
        return [e[1] for e in stack] == path

    while i < n:
        c = text[i]
        if c in "[{":
            if here():
                return text.count("\n", 0, i) + 1
            stack.append(["a", 0] if c == "[" else ["o", None])
        elif c in "]}":
            if stack:
                stack.pop()
        elif c == "," and stack and stack[-1][0] == "a":
            stack[-1][1] += 1
        elif c == '"':
            value, end = json.decoder.scanstring(text, i + 1)
            j = end
            while j < n and text[j] in " \t\r\n":
                j += 1
            if stack and stack[-1][0] == "o" and j < n and text[j] == ":":
                stack[-1][1] = value
            elif here():
                return text.count("\n", 0, i) + 1
            i = end
            continue
        elif c not in " \t\r\n:,":
            if here():
                return text.count("\n", 0, i) + 1
            while i < n and text[i] not in " \t\r\n,]}":
                i += 1
            continue
        i += 1
    return None


def _validate_rolls(rolls, n_pitches, where, text=None, path=()):
    def fail(msg, *idx):
        line = _line_of(text, list(path) + list(idx)) if text is not None else None
        loc = "".join(f"[{k}]" for k in idx)
        at = f" (line {line})" if line is not None else ""
        raise DatasetFormatError(f"{where}{loc}{at}: {msg}")

    if not isinstance(rolls, list):
        fail("expected a list of sequences")
    for s, seq in enumerate(rolls):
        if not isinstance(seq, list) or len(seq) == 0:
            fail("empty or malformed sequence", s)
        if len(seq) < 2:
            fail("next-step prediction needs >= 2 frames", s)
        for t, frame in enumerate(seq):
            if not isinstance(frame, list):
                fail("frame must be a list of pitches", s, t)
            for k, p in enumerate(frame):
                if not isinstance(p, int) or isinstance(p, bool) or not 0 <= p < n_pitches:
                    fail(f"pitch {p!r} outside [0, {n_pitches})", s, t, k)


def parse_pianoroll(text, source="<string>"):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{source}: line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise DatasetFormatError(f"{source}: top level must be an object")
    for key in ("name", "n_pitches", "splits"):
        if key not in doc:
            raise DatasetFormatError(f"{source}: missing field {key!r}")
    n_pitches = doc["n_pitches"]
    if not isinstance(n_pitches, int) or n_pitches < 1:
        raise DatasetFormatError(f"{source}: n_pitches must be a positive integer")
    splits = {}
    for file_key, key in FILE_SPLITS.items():
        if file_key not in doc["splits"]:
            raise DatasetFormatError(f"{source}: missing split {file_key!r}")
        rolls = doc["splits"][file_key]
        _validate_rolls(rolls, n_pitches, f"{source}: splits.{file_key}", text,
                        ("splits", file_key))
        splits[key] = rolls_to_pairs(rolls, n_pitches)
    return Dataset(str(doc["name"]), "nextstep_prediction", n_pitches, n_pitches,
                   splits["train"], splits["val"], splits["test"],
                   meta={"format": "pianoroll", "source": source})


def load_pianoroll(path):
    with open(path) as fh:
        return parse_pianoroll(fh.read(), source=str(path))


def dump_pianoroll(dataset):
    doc = {
        "name": dataset.name,
        "n_pitches": dataset.n_inputs,
        "splits": {fk: pairs_to_rolls(dataset.split(k)) for fk, k in FILE_SPLITS.items()},
    }
    return json.dumps(doc)


def save_pianoroll(dataset, path):
    with open(path, "w") as fh:
        fh.write(dump_pianoroll(dataset))


def generate_pianoroll(rng, n_sequences, n_pitches=24, n_voices=3, min_len=30, max_len=60,
                       fractions=(0.7, 0.15, 0.15)):
    """Synthetic polyphonic rolls: each voice random-walks over the pitch range.

    A voice holds its pitch with probability 0.7 and otherwise steps by one or
    two semitones, so the next frame is largely predictable from the current.
    """
    steps = np.array([0, -1, 1, -2, 2])
    probs = np.array([0.7, 0.1, 0.1, 0.05, 0.05])
    rolls = []
    for _ in range(n_sequences):
        T = int(rng.integers(min_len, max_len + 1))
        voices = rng.integers(0, n_pitches, size=n_voices)
        seq = []
        for _t in range(T):
            seq.append(sorted({int(v) for v in voices}))
            voices = np.clip(voices + rng.choice(steps, size=n_voices, p=probs), 0, n_pitches - 1)
        rolls.append(seq)
    pairs = list(rolls_to_pairs(rolls, n_pitches))
    return _assemble("synthetic-pianoroll", "nextstep_prediction", n_pitches, n_pitches, pairs,
                     fractions, {"format": "pianoroll", "generator": "voice-walk"})


# --------------------------------------------------------- embedded Reber

REBER_SYMBOLS = "BTPSXVE"
_SYM = {s: k for k, s in enumerate(REBER_SYMBOLS)}
# inner Reber automaton: state -> [(symbol, next state)]; state 6 emits the final E
_REBER = {
    0: [("B", 1)],
    1: [("T", 2), ("P", 3)],
    2: [("S", 2), ("X", 4)],
    3: [("T", 3), ("V", 5)],
    4: [("X", 3), ("S", 6)],
    5: [("P", 4), ("V", 6)],
    6: [("E", None)],
}


def reber_episode(rng):
    """One embedded Reber string and, per symbol, the set of legal successors."""
    symbols, legal = [], []
    outer = "T" if rng.random() < 0.5 else "P"
    symbols.append("B")
    legal.append({"T", "P"})
    symbols.append(outer)
    legal.append({"B"})
    state = 0
    while state is not None:
        options = _REBER[state]
        sym, state = options[int(rng.integers(len(options)))]
        symbols.append(sym)
        legal.append({s for s, _ in _REBER[state]} if state is not None else {outer})
    symbols.append(outer)
    legal.append({"E"})
    symbols.append("E")
    legal.append(set())
    return symbols, legal


def encode_symbols(symbols):
    x = np.zeros((len(symbols), len(REBER_SYMBOLS)))
    x[np.arange(len(symbols)), [_SYM[s] for s in symbols]] = 1.0
    return x


def reber_sequence(rng, continual=False, episodes=8):
    n = episodes if continual else 1
    symbols, legal = [], []
    for k in range(n):
        s, l = reber_episode(rng)
        if k < n - 1:
            l[-1] = {"B"}
        symbols += s
        legal += l
    targets = np.zeros((len(symbols), len(REBER_SYMBOLS)))
    for t, nxt in enumerate(legal):
        for s in nxt:
            targets[t, _SYM[s]] = 1.0
    return symbols, encode_symbols(symbols), targets


def generate_embedded_reber(rng, n_sequences, continual=False, episodes=8,
                            fractions=(0.7, 0.15, 0.15)):
    """One-hot embedded Reber strings with multi-label "legal next symbol" targets.

    With ``continual`` each sequence chains ``episodes`` strings back to back
    and the network never gets a state reset between them.
    """
    if n_sequences < 1:
        raise ConfigurationError("n_sequences must be >= 1")
    pairs, strings = [], []
    for _ in range(n_sequences):
        symbols, x, t = reber_sequence(rng, continual, episodes)
        pairs.append((x, t))
        strings.append("".join(symbols))
    meta = {"format": "sequences", "generator": "embedded-reber", "continual": continual,
            "episodes": episodes if continual else 1, "strings": strings}
    name = "reber-continual" if continual else "reber"
    K = len(REBER_SYMBOLS)
    if n_sequences < 3:
        # too few to split; every split sees the same strings
        split = tuple(pairs)
        return Dataset(name, "multilabel_prediction", K, K, split, split, split, meta=meta)
    return _assemble(name, "multilabel_prediction", K, K, pairs, fractions, meta)


# ------------------------------------------------ framewise classification

def generate_frame_classification(rng, n_sequences, n_features=8, n_classes=4, seq_len=30,
                                  delay=5, noise_std=0.1, fractions=(0.7, 0.15, 0.15)):
    """Noisy one-hot token streams labelled by the token seen ``delay`` frames earlier.

    Tokens are i.i.d. uniform, so a frame carries no information about its own
    label; the label is ``token[t - delay] % n_classes`` where the first
    ``delay`` reference tokens are drawn but never shown.
    """
    if min(n_sequences, n_features, n_classes, seq_len) < 1:
        raise ConfigurationError("sizes must be >= 1")
    pairs = []
    for _ in range(n_sequences):
        tokens = rng.integers(0, n_features, size=seq_len + delay)
        shown = tokens[delay:]
        x = np.zeros((seq_len, n_features))
        x[np.arange(seq_len), shown] = 1.0
        x += rng.normal(0.0, noise_std, size=x.shape)
        labels = tokens[:seq_len] % n_classes
        pairs.append((x, labels.astype(np.int64)))
    meta = {"format": "sequences", "generator": "delayed-token", "delay": delay,
            "noise_std": noise_std}
    return _assemble("frame-classification", "framewise_classification", n_features, n_classes,
                     pairs, fractions, meta)


# ------------------------------------------------------------ standardise

def standardize(dataset):
    """Z-score inputs with training-split statistics; binary inputs are left alone."""
    X = np.vstack([x for x, _ in dataset.train])
    if np.all((X == 0.0) | (X == 1.0)):
        M = dataset.n_inputs
        return dataset, StandardizationStats(np.zeros(M), np.ones(M))
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    constant = std <= 0.0
    if constant.any():
        warnings.warn(f"constant input features {np.flatnonzero(constant).tolist()}; using std 1")
        std = np.where(constant, 1.0, std)

    def apply(split):
        return tuple(((x - mean) / std, t) for x, t in split)

    out = Dataset(dataset.name, dataset.task, dataset.n_inputs, dataset.n_outputs,
                  apply(dataset.train), apply(dataset.val), apply(dataset.test),
                  meta={**dataset.meta, "standardized": True})
    return out, StandardizationStats(mean, std)


# ------------------------------------------------------ generic container

def dump_sequences(dataset):
    """Serialise any dataset to the generic sequence container (JSON)."""
    def enc(split):
        return [{"inputs": x.tolist(), "targets": np.asarray(t).tolist()} for x, t in split]

    meta = {k: v for k, v in dataset.meta.items() if k != "strings"}
    doc = {"format": "sequences", "name": dataset.name, "task": dataset.task,
           "n_inputs": dataset.n_inputs, "n_outputs": dataset.n_outputs, "meta": meta,
           "splits": {fk: enc(dataset.split(k)) for fk, k in FILE_SPLITS.items()}}
    return json.dumps(doc)


def load_dataset(path):
    """Load either container format, detected by its ``format`` field."""
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
    if isinstance(doc, dict) and doc.get("format") == "sequences":
        try:
            softmax = doc["task"] == "framewise_classification"
            splits = {}
            for fk, k in FILE_SPLITS.items():
                splits[k] = tuple(
                    (np.asarray(s["inputs"], dtype=np.float64),
                     np.asarray(s["targets"], dtype=np.int64 if softmax else np.float64))
                    for s in doc["splits"][fk])
            return Dataset(doc["name"], doc["task"], doc["n_inputs"], doc["n_outputs"],
                           splits["train"], splits["val"], splits["test"],
                           meta={**doc.get("meta", {}), "source": str(path)})
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"{path}: malformed sequence container: {e}") from e
    return parse_pianoroll(text, source=str(path))


def save_dataset(dataset, path):
    text = dump_pianoroll(dataset) if dataset.meta.get("format") == "pianoroll" \
        else dump_sequences(dataset)
    with open(path, "w") as fh:
        fh.write(text)
