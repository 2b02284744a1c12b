"""Gaze-latent attention: structured discrete latents, direct-optimization
gradients, and a soft-attention classifier, with exact-enumeration oracles."""

__all__ = ["GazeAttentionClassifier"]
__version__ = "0.1.0"


def __getattr__(name):
    if name == "GazeAttentionClassifier":
        from gazelatent.estimator import GazeAttentionClassifier

        return GazeAttentionClassifier
    raise AttributeError(name)
