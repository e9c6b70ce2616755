"""tesbench: a desk-scale benchmark of transferred evolutionary-strategy
attacks on fine-tuned classifiers, with FGSM / PGD / generator-transfer /
unguided latent-search baselines."""

__version__ = "0.1.0"
