"""Train a small capsule network on the synthetic shapes and print the
accuracy on the five test suites.

Run: python walkthroughs/train_synthetic.py   (a few minutes on one core)
"""
import logging

from icrcaps.data import TestSuiteSpec, gen_synthetic, make_test_suites
from icrcaps.network import Model, ModelConfig, TrainConfig, evaluate
from icrcaps.routing import ICRConfig
from icrcaps.trainer import fit

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = ModelConfig(block_widths=(8, 8, 16, 16), block_strides=(1, 2, 1, 2), primary_types=4, primary_dim=4,
                  hidden=((4, 4),), class_dim=4, icr=(ICRConfig(2, 2), ICRConfig(2, 2)))
model = Model(cfg)
print(f"{model.num_parameters()} parameters")

train = gen_synthetic(4, 300, 16, seed=0)
spec = TestSuiteSpec()
suites = make_test_suites(gen_synthetic(4, 25, 16, seed=1000), spec, seed=7)
fit(model, train, TrainConfig(epochs=12, batch_size=32, lr=3e-3), suites, suite_labels=spec.labels)

for label, s in zip(spec.labels, suites):
    print(f"{label:>10s}  {evaluate(model, s).accuracy:.3f}")
