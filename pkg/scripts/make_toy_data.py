"""Write a small synthetic dataset in the layout ``uconv train-toy`` expects.

    python scripts/make_toy_data.py out_dir [--utterances 5] [--seconds 1.0] [--labels 4]

Produces FEAT feature files, one transcript per utterance, manifest.tsv and vocab.txt.
"""

import argparse
from pathlib import Path

from uconv.bench import synthetic_utterance
from uconv.ctc import Vocabulary
from uconv.frontend import write_feat

TOKENS = ["▁a", "b", "c", "d", "▁e", "f", "g", "h", "i"]


def make(out_dir, utterances=5, seconds=1.0, labels=4, seed=100):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary(TOKENS)
    vocab.save(out / "vocab.txt")
    rows = []
    for i in range(utterances):
        utt = synthetic_utterance(seconds, labels, vocab_size=len(vocab), seed=seed + i)
        write_feat(out / f"utt{i}.feat", utt.features)
        (out / f"utt{i}.txt").write_text(" ".join(vocab.decode(utt.labels)) + "\n", encoding="utf-8")
        rows.append(f"utt{i}.feat\tutt{i}.txt\n")
    (out / "manifest.tsv").write_text("".join(rows), encoding="utf-8")
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--utterances", type=int, default=5)
    ap.add_argument("--seconds", type=float, default=1.0)
    ap.add_argument("--labels", type=int, default=4)
    ap.add_argument("--seed", type=int, default=100)
    a = ap.parse_args()
    print(make(a.out_dir, a.utterances, a.seconds, a.labels, a.seed))
