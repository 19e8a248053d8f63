"""Find the first step budget at which the toy encoder overfits 5 synthetic utterances.

This is the run that fixed the budget used by the acceptance test.  Each budget
is a fresh run (the warmup length depends on the budget).

    python scripts/toy_step_budget.py [--budgets 50,100,150,200,300]
"""

import argparse

import numpy as np

from uconv.bench import synthetic_utterance
from uconv.model import PRESETS
from uconv.trainer import Utterance, decode_all, train_toy


def dataset():
    out = []
    for i in range(5):
        u = synthetic_utterance(1.0, 4, vocab_size=10, seed=100 + i)
        out.append(Utterance(u.features, u.labels, f"utt{i}"))
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--budgets", default="50,100,150,200,300")
    a = ap.parse_args()
    data = dataset()
    for inter in (False, True):
        cfg = PRESETS["toy"].replace(intermediate_ctc=inter)
        for steps in map(int, a.budgets.split(",")):
            res = train_toy(cfg, data, steps, seed=42)
            exact = sum(h == u.labels for h, u in zip(decode_all(res.encoder, data), data))
            finite = np.all(np.isfinite(res.losses))
            print(f"intermediate_ctc={inter} steps={steps}: {exact}/5 exact, "
                  f"final loss {res.losses[-1]:.4f}, finite={finite}")
            if exact == 5:
                break
