"""Learning with in-distribution and out-of-distribution label noise on synthetic data.

Contrastive pretraining, KNN-based OOD filtering, a loss GMM for the
clean/noisy split and MixEMatch training, all in numpy.
"""

__version__ = "0.1.0"
