"""
Aggregating annotator votes
===========================

Each pair is rated by three annotators who may each pick several methods.
A method counts for a pair only if a strict majority picked it; a pair
with k such methods gives each of them 1 / k**alpha. Pairs where a
single method wins by unique 2-of-3 majority also define a preference
used to score automatic metrics.
"""

import tempfile
from pathlib import Path

from geoscene.evalkit import (aggregate_votes, human_preferences, pairwise_accuracy,
                              read_scores, read_votes, vote_weight)

tmp = Path(tempfile.mkdtemp(prefix="geoscene-votes-"))
HEADER = "pair_id,annotator_id,method,selected\n"


def ballots(rows):
    """rows: (pair, annotator, set of picked methods, all methods)"""
    lines = [f"{p},{a},{m},{int(m in picked)}" for p, a, picked, methods in rows for m in methods]
    return HEADER + "\n".join(lines) + "\n"


# p1: only A has a majority. p2: both A and B have one.
(tmp / "votes.csv").write_text(ballots([
    ("p1", "a1", {"A", "B"}, "AB"), ("p1", "a2", {"A"}, "AB"), ("p1", "a3", {"A"}, "AB"),
    ("p2", "a1", {"A"}, "AB"), ("p2", "a2", {"A", "B"}, "AB"), ("p2", "a3", {"B"}, "AB"),
]))

# k = 2 methods share a pair: each gets 2**-0.8
print("w(1) = %.6f  w(2) = %.6f" % (vote_weight(1), vote_weight(2)))

summary = aggregate_votes(read_votes(tmp / "votes.csv"), alpha=0.8)
for method, pct in summary.percentages.items():
    print(f"{method}: {pct:.2f}%")

# A metric agrees with people on a pair when it ranks the preferred method higher.
both = ("ours", "base")
(tmp / "pref.csv").write_text(ballots([
    ("q1", "a1", {"ours"}, both), ("q1", "a2", {"ours"}, both), ("q1", "a3", {"base"}, both),
    ("q2", "a1", {"base"}, both), ("q2", "a2", {"base"}, both), ("q2", "a3", {"ours"}, both),
]))
# the metric agrees with people on q1 and not on q2
(tmp / "scores.csv").write_text("pair_id,method,score\n"
                                "q1,ours,0.9\nq1,base,0.4\nq2,ours,0.7\nq2,base,0.2\n")
prefs = human_preferences(read_votes(tmp / "pref.csv"))
print("preferences:", prefs)
print("pairwise accuracy: %.1f" % pairwise_accuracy(read_scores(tmp / "scores.csv"), prefs))
