"""Walk through the reward engine on a handful of toy sequences.

Run with ``python3 notebooks/01_reward_increments.py``.
"""
import numpy as np

from softmax_pg.rewards import (EOS_ID, RewardConfig, RewardTracker, has_unique_increment_argmax,
                                increment_row, main_reward, prefix_rewards, rouge_l_f1, rouge_n_f1)

np.set_printoptions(precision=4, suppress=True)
a, b, c, d = 3, 4, 5, 6
y = (a, b, c, d, EOS_ID)

# ROUGE-n per order, then the main reward (their mean)
for z in [(a,), (a, b), (a, b, c), (a, c, b, d), (d, c, b, a), y]:
    per_order = [rouge_n_f1(z, y, n) for n in (1, 2, 3)]
    print(f"z={z!s:22} R1..R3={np.round(per_order, 4)} main={main_reward(z, y):.4f} "
          f"rougeL={rouge_l_f1(z, y):.4f}")

# the reward of every prefix; differences are the per-step increments
z = (a, b, d, c, EOS_ID)
pr = prefix_rewards(z, y)
print("\nprefix rewards", pr)
print("increments    ", np.diff(pr), "sum", np.diff(pr).sum(), "=", main_reward(z, y))

# an increment row only stores reference words, EOS and the previous token;
# every other word shares one default value
cfg = RewardConfig(W=1.0)
for prefix in [(), (a,), (a, b), (a, 9)]:
    row = increment_row(prefix, y, len(prefix) + 1, cfg, 1.0)
    cells = ", ".join(f"{k}:{v:+.3f}" for k, v in sorted(row.per_token.items()))
    print(f"prefix={prefix!s:8} default={row.default_value:+.3f}  {cells}")

# With a copy target of distinct words, every reference word gains the same
# unigram credit at the first step, so the argmax is a tie.  A one-word
# reference, or a repeated word without the DUP term, has a unique argmax.
for ref, cfg in [(y, RewardConfig()), ((a, EOS_ID), RewardConfig()),
                 ((a, a, a, EOS_ID), RewardConfig(use_dup=False))]:
    print(f"unique argmax for y={ref}: {has_unique_increment_argmax(ref, cfg, 10)}")
print("first-step row for the copy target:",
      increment_row((), y, 1, RewardConfig(W=1.0), 1.0).dense(8))

# after a tie is broken, bigram credit makes the reference successor the
# clear winner, which is why later steps follow y once the first word is set
tr = RewardTracker(y)
tr.append(c)
print("row after choosing c:", tr.increment_row(RewardConfig(W=1.0), 1.0).dense(8))
