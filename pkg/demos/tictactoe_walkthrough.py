"""
Tic-tac-toe: learning a move together with the reason for it
=============================================================

Every legal, unfinished board is labelled with a preferred move and the rule
that picked it (win, block, threat, or the first free cell in the
centre/corner/side order). We train two networks on the same split:

* a move-only classifier over the 9 cells;
* a 36-way classifier over (move, reason) pairs, decoded back into a move
  and a reason.

Run from the repository root:  python3 demos/tictactoe_walkthrough.py
"""

import json
import os

import numpy as np

from ted.dataset import SplitSpec
from ted.experiments import ExperimentConfig, load_artifact, load_source, net_predictions, prepare, run_experiment
from ted.tictactoe import Board, Reason, enumerate_legal_nonterminal, label_position

HERE = os.path.dirname(os.path.abspath(__file__))


def show(board):
    marks = {0: ".", 1: "X", 2: "O"}
    for r in range(3):
        print("   " + " ".join(marks[c] for c in board.cells[3 * r : 3 * r + 3]))


# %% The data: every board a game can reach, minus finished ones
boards = enumerate_legal_nonterminal()
print(f"{len(boards)} legal non-terminal positions")

reasons = np.bincount([int(label_position(b)[1]) for b in boards], minlength=4)
for r in Reason:
    print(f"  {r.name:<6} {reasons[r]:>5}")

# %% A few labelled boards
for board in (Board.from_marks(xs=[0, 8], os=[1, 3]), Board.from_marks(xs=[0, 5], os=[1, 4]), Board((0,) * 9)):
    move, reason = label_position(board)
    print(f"\n{'X' if board.side_to_move == 1 else 'O'} to move -> cell {move} ({reason.name})")
    show(board)

# %% Train both models on the same 90/10 split
def load(name):
    with open(os.path.join(HERE, "configs", name), encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


move_cfg, joint_cfg = load("ttt_move_only.json"), load("ttt_cartesian.json")
move = run_experiment(move_cfg).results[0].test
joint_dir = os.path.join(HERE, "runs", "ttt_cartesian")
joint = run_experiment(joint_cfg, joint_dir).results[0].test
print(f"\nmove-only net      move accuracy   {move.y_accuracy:.4f}")
print(f"(move, reason) net move accuracy   {joint.y_accuracy:.4f}")
print(f"                   reason accuracy {joint.e_accuracy:.4f}")
print(f"                   pair accuracy   {joint.joint_accuracy:.4f}")

# %% Where does the joint model get the reason wrong?
# Reload the saved network and rebuild the same split to look at individual predictions.
prep = prepare(joint_cfg, load_source(joint_cfg))
net = load_artifact(os.path.join(joint_dir, "model.json"))
pred = net_predictions("cartesian", net, prep.test.features, prep.test.y_space, prep.test.e_space)
confusion = np.zeros((4, 4), int)
np.add.at(confusion, (prep.test.explanations, pred["e"]), 1)
print("\nreason confusion on the test split (rows: true, columns: predicted)")
print("        " + " ".join(f"{r.name:>6}" for r in Reason))
for r in Reason:
    print(f"{r.name:<7} " + " ".join(f"{v:>6}" for v in confusion[r]))

# %% The split is seeded, so a different seed gives a different test set
other = run_experiment(move_cfg.replace(split=SplitSpec((0.9, 0.0, 0.1), 2), seed=2)).results[0].test
print(f"\nmove-only accuracy with split seed 2: {other.y_accuracy:.4f}")
