"""Reward scoring, text-rendering metrics and an Elo leaderboard.

R_a = max(0, 1 - edit_distance / N) * 100 and R_h = LCS / N * 100 over the
target's N characters; availability is the share of records flagged usable.
"""

import numpy as np

from mmflow.evaluation import (BattleRecord, TextEvalRecord, YesNoRewardHead, arena_replay, availability,
                               generative_reward, text_accuracy, text_hit_rate)

print(f"reward(yes=ln 2, no=0) = {generative_reward((np.log(2.0), 0.0)):.4f}")

rng = np.random.default_rng(0)
good, bad = rng.normal(1.0, 1.0, (200, 8)), rng.normal(-1.0, 1.0, (200, 8))
head = YesNoRewardHead(8, seed=0).fit(good, bad)
print(f"fitted reward head: preferred {head.score(good[0]):.2f} vs rejected {head.score(bad[0]):.2f}")

pairs = [("HELLO", "HELO"), ("OPEN 24 HOURS", "OPEN 24 HOUR5"), ("SALE", "SALE"), ("AB", "XYZWV")]
for target, rendered in pairs:
    print(f"{target!r:>16} -> {rendered!r:<16} R_a={text_accuracy(target, rendered):5.1f} "
          f"R_h={text_hit_rate(target, rendered):5.1f}")
flags = [TextEvalRecord("x", "x", available=i % 17 != 0) for i in range(50)]
print(f"availability over {len(flags)} records: {availability(flags):.1f}%")

strength = {"alpha": 1.0, "beta": 0.3, "gamma": -0.5}
names = list(strength)
battles = []
for step in range(3000):
    a, b = rng.choice(3, 2, replace=False)
    p = 1 / (1 + np.exp(strength[names[b]] - strength[names[a]]))
    battles.append(BattleRecord(names[a], names[b], "a" if rng.random() < p else "b", float(step)))
for name, rating, games in arena_replay(battles).leaderboard():
    print(f"{name:>6} {rating:7.1f} ({games} battles)")
