"""One prompt, two kinds of speaker.

Every synthetic speaker sits in one of two modes that the prompt cannot
distinguish. A deterministic head has to pick a single point and lands
between the modes; a flow-matching head samples both.

    python demos/one_to_many.py [--quick]
"""

import argparse

import numpy as np

from promptspk.metrics import gaussian_ball_radius
from promptspk.prompt import build_prompt, load_schema
from promptspk.synthdata import SynthWorld, generate_corpus
from promptspk.systems import RunConfig, corpus_features, train_system

parser = argparse.ArgumentParser()
parser.add_argument("--quick", action="store_true", help="fewer epochs, rougher numbers")
args = parser.parse_args()

schema = load_schema()
config = RunConfig()
if args.quick:
    config.disc.epochs, config.flow.epochs = 40, 120
corpus = generate_corpus(config.world, schema)
world = SynthWorld(config.world, schema)

disc = train_system("disc_lora", corpus, config, schema)
flow = train_system("flow_lora", corpus, config, schema)

rec = corpus.records["eval"][0]
print("prompt:", build_prompt(schema, rec).text)
means = world.mode_means(rec)
feats = corpus_features(disc.encoder, schema, [rec])
radius = config.world.noise * gaussian_ball_radius(3.0, config.world.d)

e_tilde = disc.generate(feats)[0]
print(f"\nmode separation {np.linalg.norm(means[0] - means[1]):.2f}, 3-sigma ball radius {radius:.2f}")
print("discriminative prediction, distance to each mode:", np.round(np.linalg.norm(means - e_tilde, axis=1), 2))

samples = flow.generate(feats, 1000, seed=1)
dist = np.linalg.norm(samples[:, None] - means[None], axis=2)
nearest = dist.argmin(axis=1)
inside = dist.min(axis=1) <= radius
print(f"flow samples within 3 sigma of a mode: {inside.mean():.1%}")
for k in range(len(means)):
    print(f"  mode {k}: {np.mean(inside & (nearest == k)):.1%} of samples")
