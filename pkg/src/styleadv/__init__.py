"""Style-adversarial episodic meta-training on a from-scratch autodiff core."""

__version__ = "0.1.0"
