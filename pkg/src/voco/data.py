"""Synthetic grid images and question/answer text for the compression experiments.

An image is a ``g x g`` grid of patch symbols, fed to the model row-major as
``g*g`` vision tokens. Every question is four text tokens
``[question-type, arg1, arg2, answer]`` so batches never need padding; the
answer is predicted from the logits at ``arg2``.

Question kinds:

* ``cell``   ``Q_CELL SEP CELL_k -> SYM``         symbol at cell k = r*g + c of frame 0
* ``count``  ``Q_COUNT ROW_r SYM_s -> COUNT_c``   occurrences of s in row r of frame 0
* ``frame``  ``Q_FRAME SYM_s SEP -> FRAME_t``     the only frame containing s
* ``change`` ``Q_CHANGE ROW_r COL_c -> YES/NO``   did (r, c) differ between frames 0 and 1
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from voco.errors import FormatError, UsageError
from voco.model import stable_hash

QUESTION_KINDS = ("cell", "count", "frame", "change")
TOKENS_PER_QUESTION = 4


@dataclass(frozen=True)
class GridTask:
    grid_side: int = 4
    patch_vocab: int = 16
    kinds: tuple[str, ...] = ("cell",)
    frames: int = 1
    questions: int = 4
    max_frames: int = 8
    mutations: int = 4  # cells rewritten between consecutive frames for "change" questions

    def __post_init__(self):
        bad = set(self.kinds) - set(QUESTION_KINDS)
        if bad or not self.kinds:
            raise UsageError(f"unknown question kinds {sorted(bad)}")
        if not 1 <= self.frames <= self.max_frames:
            raise UsageError(f"frames must be in [1, {self.max_frames}]")
        if self.frames < 2 and ({"frame", "change"} & set(self.kinds)):
            raise UsageError("frame/change questions need at least two frames")
        if "frame" in self.kinds and self.questions >= self.patch_vocab:
            raise UsageError("frame questions need more symbols than questions")
        if self.grid_side < 1 or self.patch_vocab < 2 or self.questions < 1:
            raise UsageError("grid_side, patch_vocab and questions must be positive")

    @property
    def num_vision(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def text_len(self) -> int:
        return TOKENS_PER_QUESTION * self.questions

    @property
    def chance(self) -> dict[str, float]:
        return {"cell": 1 / self.patch_vocab, "count": 1 / (self.grid_side + 1),
                "frame": 1 / self.frames, "change": 0.5}

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.grid_side, self.patch_vocab, self.max_frames)

    def with_frames(self, frames: int, kinds: tuple[str, ...] | None = None) -> GridTask:
        return GridTask(self.grid_side, self.patch_vocab, kinds or self.kinds, frames,
                        self.questions, self.max_frames, self.mutations)


class Vocab:
    """Text token ids for a grid task."""

    SPECIAL = ("SEP", "Q_CELL", "Q_COUNT", "Q_FRAME", "Q_CHANGE", "YES", "NO")

    def __init__(self, grid_side: int, patch_vocab: int, max_frames: int):
        names = list(self.SPECIAL)
        names += [f"SYM_{i}" for i in range(patch_vocab)]
        names += [f"ROW_{i}" for i in range(grid_side)]
        names += [f"COL_{i}" for i in range(grid_side)]
        names += [f"COUNT_{i}" for i in range(grid_side + 1)]
        names += [f"FRAME_{i}" for i in range(max_frames)]
        names += [f"CELL_{i}" for i in range(grid_side * grid_side)]
        self.names = names
        self.ids = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> int:
        return self.ids[name]

    def name(self, token_id: int) -> str:
        return self.names[token_id] if 0 <= token_id < len(self.names) else f"<{token_id}>"

    def encode(self, words: str) -> list[int]:
        try:
            return [self.ids[w] for w in words.split()]
        except KeyError as exc:
            raise UsageError(f"unknown token {exc.args[0]!r}") from None


def parse_question(task: GridTask, text: str) -> list[int]:
    """Turn ``"cell 1 2"``, ``"count 0 5"``, ``"frame 3"`` or ``"change 1 1"`` into the three prompt ids."""
    voc, parts = task.vocab, text.split()
    if not parts:
        raise UsageError("empty question")
    kind, args = parts[0], [int(a) for a in parts[1:]]
    if kind == "cell" and len(args) == 2:
        return [voc["Q_CELL"], voc["SEP"], voc[f"CELL_{args[0] * task.grid_side + args[1]}"]]
    if kind == "count" and len(args) == 2:
        return [voc["Q_COUNT"], voc[f"ROW_{args[0]}"], voc[f"SYM_{args[1]}"]]
    if kind == "frame" and len(args) == 1:
        return [voc["Q_FRAME"], voc[f"SYM_{args[0]}"], voc["SEP"]]
    if kind == "change" and len(args) == 2:
        return [voc["Q_CHANGE"], voc[f"ROW_{args[0]}"], voc[f"COL_{args[1]}"]]
    raise UsageError(f"cannot parse question {text!r}")


@dataclass
class Batch:
    """``vision[N, frames, g*g]`` patch ids, ``text[N, 4*q]`` token ids, ``kinds[N, q]`` index into QUESTION_KINDS."""

    vision: np.ndarray
    text: np.ndarray
    kinds: np.ndarray

    def __len__(self) -> int:
        return self.vision.shape[0]

    def __getitem__(self, idx) -> Batch:
        return Batch(self.vision[idx], self.text[idx], self.kinds[idx])

    @property
    def answer_slots(self) -> np.ndarray:
        """Text-relative positions whose logits predict an answer."""
        q = self.text.shape[1] // TOKENS_PER_QUESTION
        return np.arange(q) * TOKENS_PER_QUESTION + TOKENS_PER_QUESTION - 2

    @property
    def answers(self) -> np.ndarray:
        return self.text[:, self.answer_slots + 1]

    def grid_hashes(self) -> list[int]:
        return [stable_hash(np.ascontiguousarray(v, dtype="<i4").tobytes()) for v in self.vision]


@dataclass
class Dataset:
    task: GridTask
    train: Batch
    eval: Batch
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def eval_hash(self) -> int:
        return stable_hash(self.eval.vision.astype("<i4").tobytes() + self.eval.text.astype("<i4").tobytes())


def _frames(task: GridTask, rng: np.random.Generator) -> np.ndarray:
    n, P = task.num_vision, task.patch_vocab
    if "change" not in task.kinds:
        return rng.integers(0, P, size=(task.frames, n))
    out = np.empty((task.frames, n), dtype=np.int64)
    out[0] = rng.integers(0, P, size=n)
    for t in range(1, task.frames):
        out[t] = out[t - 1]
        cells = rng.choice(n, size=task.mutations, replace=False)
        out[t, cells] = (out[t, cells] + rng.integers(1, P, size=task.mutations)) % P
    return out


def _example(task: GridTask, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    voc, g, P = task.vocab, task.grid_side, task.patch_vocab
    frames = _frames(task, rng)
    kind_names = [task.kinds[k] for k in rng.integers(0, len(task.kinds), size=task.questions)]
    kinds = np.array([QUESTION_KINDS.index(k) for k in kind_names], dtype=np.int64)

    n_frame_q = kind_names.count("frame")
    if n_frame_q:
        targets = rng.choice(P, size=n_frame_q, replace=False)
        fillers = np.setdiff1d(np.arange(P), targets)
        homes = rng.integers(0, task.frames, size=n_frame_q)
        for s, home in zip(targets, homes):
            for t in range(task.frames):
                hit = frames[t] == s
                if t != home and hit.any():
                    frames[t, hit] = rng.choice(fillers, size=int(hit.sum()))
            if not (frames[home] == s).any():
                free = np.flatnonzero(~np.isin(frames[home], targets))
                frames[home, rng.choice(free)] = s
        frame_q = iter(zip(targets, homes))

    text = []
    for kind in kind_names:
        if kind == "cell":
            k = int(rng.integers(0, g * g))
            text += [voc["Q_CELL"], voc["SEP"], voc[f"CELL_{k}"], voc[f"SYM_{frames[0, k]}"]]
        elif kind == "count":
            r = int(rng.integers(0, g))
            row = frames[0, r * g:(r + 1) * g]
            s = int(rng.choice(row)) if rng.random() < 0.5 else int(rng.integers(0, P))
            text += [voc["Q_COUNT"], voc[f"ROW_{r}"], voc[f"SYM_{s}"], voc[f"COUNT_{int((row == s).sum())}"]]
        elif kind == "frame":
            s, home = next(frame_q)
            text += [voc["Q_FRAME"], voc[f"SYM_{s}"], voc["SEP"], voc[f"FRAME_{home}"]]
        else:
            changed = frames[0] != frames[1]
            pool = np.flatnonzero(changed if rng.random() < 0.5 and changed.any() else ~changed)
            cell = int(rng.choice(pool)) if pool.size else int(rng.integers(0, g * g))
            r, c = divmod(cell, g)
            text += [voc["Q_CHANGE"], voc[f"ROW_{r}"], voc[f"COL_{c}"], voc["YES" if changed[cell] else "NO"]]
    return frames, np.array(text, dtype=np.int64), kinds


def generate(task: GridTask, count: int, rng: np.random.Generator, exclude: set[int] | None = None) -> Batch:
    """``count`` examples; grids whose hash is in ``exclude`` are redrawn."""
    vision, text, kinds = [], [], []
    while len(vision) < count:
        f, t, k = _example(task, rng)
        if exclude and stable_hash(np.ascontiguousarray(f, dtype="<i4").tobytes()) in exclude:
            continue
        vision.append(f)
        text.append(t)
        kinds.append(k)
    return Batch(np.stack(vision), np.stack(text), np.stack(kinds))


def gen_dataset(task: GridTask, count: int, seed: int, eval_count: int = 512) -> Dataset:
    """Deterministic train/eval split with disjoint image grids."""
    if count < 1 or eval_count < 1:
        raise UsageError("count and eval_count must be >= 1")
    eval_batch = generate(task, eval_count, np.random.default_rng([seed, 1]))
    held_out = set(eval_batch.grid_hashes())
    train_batch = generate(task, count, np.random.default_rng([seed, 0]), exclude=held_out)
    return Dataset(task, train_batch, eval_batch, seed)


# ---------------------------------------------------------------- dataset file
#
# One record per question:  <frame0 symbols>|<frame1 symbols>...\t<3 prompt ids>\t<answer id>
# Symbols and ids are space-separated decimal integers. Lines starting with '#' are comments.


def write_dataset(batch: Batch, path: str | Path, task: GridTask | None = None) -> None:
    lines = []
    if task is not None:
        lines.append(f"# grid_side={task.grid_side} patch_vocab={task.patch_vocab} frames={task.frames}")
    for vision, text in zip(batch.vision, batch.text):
        grids = "|".join(" ".join(map(str, f)) for f in vision)
        for q in text.reshape(-1, TOKENS_PER_QUESTION):
            lines.append(f"{grids}\t{' '.join(map(str, q[:3]))}\t{q[3]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path: str | Path, questions: int) -> Batch:
    """Inverse of :func:`write_dataset`; consecutive records are grouped ``questions`` at a time."""
    vision, text = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        try:
            grids, prompt, answer = line.split("\t")
            frames = [list(map(int, f.split())) for f in grids.split("|")]
            ids = list(map(int, prompt.split())) + [int(answer)]
        except ValueError as exc:
            raise FormatError(f"malformed record on line {lineno}: {exc}") from None
        if len(ids) != TOKENS_PER_QUESTION:
            raise FormatError(f"line {lineno}: expected 3 prompt ids")
        vision.append(frames)
        text.append(ids)
    if len(vision) % questions:
        raise FormatError(f"{len(vision)} records is not a multiple of {questions} questions")
    v = np.array(vision[::questions], dtype=np.int64)
    t = np.array(text, dtype=np.int64).reshape(-1, questions * TOKENS_PER_QUESTION)
    # question-type tokens Q_CELL..Q_CHANGE are ids 1..4, in QUESTION_KINDS order
    kinds = t[:, ::TOKENS_PER_QUESTION] - 1
    if kinds.min() < 0 or kinds.max() >= len(QUESTION_KINDS):
        raise FormatError("record does not start with a question-type token")
    return Batch(v, t, kinds)
