"""Speaker similarity as the prompt loses questions.

Keeps a seeded third, two thirds, or all of each eval speaker's phrases and
reports mean cosine similarity to the ground-truth embedding, one row per
system and portion.

    python demos/partial_prompts.py [--quick]
"""

import argparse

from promptspk.prompt import load_schema
from promptspk.synthdata import generate_corpus
from promptspk.systems import ABLATION_PORTIONS, SYSTEMS, RunConfig, ablation_similarity, train_system

parser = argparse.ArgumentParser()
parser.add_argument("--quick", action="store_true")
args = parser.parse_args()

schema = load_schema()
config = RunConfig()
if args.quick:
    config.disc.epochs, config.flow.epochs = 40, 120
corpus = generate_corpus(config.world, schema)
records, targets = corpus.split("eval")

print(f"{'system':<16}" + "".join(f"{p:>8.2f}" for p in ABLATION_PORTIONS))
for name in SYSTEMS:
    system = train_system(name, corpus, config, schema)
    means = ablation_similarity(system, schema, records, targets)
    print(f"{name:<16}" + "".join(f"{m:>8.3f}" for m in means))
