"""Tic-tac-toe positions labeled with a preferred move and the rule that chose it.

Cells are row-major, ``0`` empty, ``1`` X, ``2`` O::

    0 | 1 | 2
    3 | 4 | 5
    6 | 7 | 8
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .dataset import SpaceDescriptor, TripleDataset, cartesian_encode

EMPTY, X, O = 0, 1, 2

LINES = (
    (0, 1, 2), (3, 4, 5), (6, 7, 8),
    (0, 3, 6), (1, 4, 7), (2, 5, 8),
    (0, 4, 8), (2, 4, 6),
)
LINES_THROUGH = tuple(tuple(line for line in LINES if cell in line) for cell in range(9))

# center, corners, middles
EMPTY_RULE_ORDER = (4, 0, 2, 6, 8, 1, 3, 5, 7)

N_MOVES = 9
TIE_BREAKS = ("preference", "index")
MODES = ("move-only", "move-and-explanation")


class Reason(enum.IntEnum):
    WIN = 0
    BLOCK = 1
    THREAT = 2
    EMPTY = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()


REASON_NAMES = tuple(r.label for r in Reason)
MOVE_NAMES = tuple(f"cell{i}" for i in range(N_MOVES))


def winner(cells) -> int:
    """Return X or O if that side has three in a row, else EMPTY."""
    for a, b, c in LINES:
        if cells[a] != EMPTY and cells[a] == cells[b] == cells[c]:
            return cells[a]
    return EMPTY


@dataclass(frozen=True)
class Board:
    cells: tuple[int, ...]
    side_to_move: int = None

    def __post_init__(self):
        cells = tuple(int(c) for c in self.cells)
        if len(cells) != 9 or any(c not in (EMPTY, X, O) for c in cells):
            raise ValueError(f"board needs 9 cells in {{0,1,2}}, got {self.cells}")
        nx, no = cells.count(X), cells.count(O)
        if nx - no not in (0, 1):
            raise ValueError(f"illegal mark counts X={nx}, O={no}")
        expected = X if nx == no else O
        if self.side_to_move is not None and self.side_to_move != expected:
            raise ValueError("side to move inconsistent with mark counts")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "side_to_move", expected)

    @classmethod
    def from_marks(cls, xs=(), os=()) -> "Board":
        cells = [EMPTY] * 9
        for i in xs:
            cells[i] = X
        for i in os:
            cells[i] = O
        return cls(tuple(cells))

    @property
    def opponent(self) -> int:
        return O if self.side_to_move == X else X

    def empty_cells(self) -> list[int]:
        return [i for i, c in enumerate(self.cells) if c == EMPTY]

    def play(self, cell: int) -> "Board":
        if self.cells[cell] != EMPTY:
            raise ValueError(f"cell {cell} is occupied")
        cells = list(self.cells)
        cells[cell] = self.side_to_move
        return Board(tuple(cells))

    @property
    def is_terminal(self) -> bool:
        return winner(self.cells) != EMPTY or EMPTY not in self.cells

    def __str__(self):
        sym = {EMPTY: ".", X: "X", O: "O"}
        rows = ["".join(sym[c] for c in self.cells[r : r + 3]) for r in (0, 3, 6)]
        return "\n".join(rows)


@dataclass(frozen=True)
class LabeledPosition:
    board: Board
    move: int
    reason: Reason


@dataclass(frozen=True)
class EncodedPosition:
    features: np.ndarray
    label9: int
    label36: int


def enumerate_positions(include_terminal: bool = False) -> list[Board]:
    """All positions reachable from the empty board with X moving first.

    Breadth-first over the game tree; play stops at terminal positions.
    Sorted lexicographically on cells.
    """
    start = Board((EMPTY,) * 9)
    seen = {start.cells: start}
    queue = deque([start])
    while queue:
        board = queue.popleft()
        if board.is_terminal:
            continue
        for cell in board.empty_cells():
            child = board.play(cell)
            if child.cells not in seen:
                seen[child.cells] = child
                queue.append(child)
    boards = [b for b in seen.values() if include_terminal or not b.is_terminal]
    boards.sort(key=lambda b: b.cells)
    return boards


def enumerate_legal_nonterminal() -> list[Board]:
    return enumerate_positions(include_terminal=False)


def _completes_line(cells, cell, side) -> bool:
    return any(all(cells[i] == side for i in line if i != cell) for line in LINES_THROUGH[cell])


def _creates_threat(cells, cell, side) -> bool:
    # lines through the new mark: it plus one more own mark, third cell empty
    for line in LINES_THROUGH[cell]:
        others = [cells[i] for i in line if i != cell]
        if sorted(others) == [EMPTY, side]:
            return True
    return False


def label_position(board: Board, tie_break: str = "preference") -> tuple[int, Reason]:
    """Preferred move by the first rule that fires: Win, Block, Threat, Empty.

    When several cells satisfy the same rule, ``tie_break="preference"``
    takes the first in center, corners, middles order (the Empty rule's
    order); ``"index"`` takes the lowest cell index for rules 1-3.
    """
    if tie_break not in TIE_BREAKS:
        raise ValueError(f"tie_break must be one of {TIE_BREAKS}")
    cells, me, them = board.cells, board.side_to_move, board.opponent
    order = EMPTY_RULE_ORDER if tie_break == "preference" else range(9)
    empty = [c for c in order if cells[c] == EMPTY]
    if not empty:
        raise ValueError("board has no empty cell")
    for cell in empty:
        if _completes_line(cells, cell, me):
            return cell, Reason.WIN
    for cell in empty:
        if _completes_line(cells, cell, them):
            return cell, Reason.BLOCK
    for cell in empty:
        if _creates_threat(cells, cell, me):
            return cell, Reason.THREAT
    for cell in EMPTY_RULE_ORDER:
        if cells[cell] == EMPTY:
            return cell, Reason.EMPTY
    raise AssertionError("unreachable")


def labeled_positions(tie_break: str = "preference") -> Iterator[LabeledPosition]:
    for board in enumerate_legal_nonterminal():
        move, reason = label_position(board, tie_break)
        yield LabeledPosition(board, move, reason)


def encode_position(board: Board, tie_break: str = "preference") -> EncodedPosition:
    """19 binary features: X plane, O plane, then 1 if X is to move."""
    cells = np.asarray(board.cells)
    features = np.concatenate([cells == X, cells == O, [board.side_to_move == X]]).astype(np.float64)
    move, reason = label_position(board, tie_break)
    return EncodedPosition(features, move, cartesian_encode(move, int(reason), N_MOVES, len(Reason)))


def build_ttt_dataset(mode: str = "move-and-explanation", tie_break: str = "preference") -> TripleDataset:
    """The 4,520-row tic-tac-toe triple dataset.

    Both modes carry the same rows; ``mode`` only documents whether the
    consumer trains on moves alone or on the joint move/reason class (see
    :meth:`TripleDataset.joint_labels`).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    boards = enumerate_legal_nonterminal()
    feats = np.empty((len(boards), 19))
    moves = np.empty(len(boards), dtype=np.int64)
    reasons = np.empty(len(boards), dtype=np.int64)
    ids = []
    for i, board in enumerate(boards):
        enc = encode_position(board, tie_break)
        feats[i] = enc.features
        moves[i], reasons[i] = divmod(enc.label36, len(Reason))
        ids.append("".join(".XO"[c] for c in board.cells))
    return TripleDataset(
        features=feats,
        labels=moves,
        explanations=reasons,
        y_space=SpaceDescriptor.categorical(N_MOVES, MOVE_NAMES),
        e_space=SpaceDescriptor.categorical(len(Reason), REASON_NAMES),
        ids=ids,
        feature_names=[f"f{i}" for i in range(19)],
    )
