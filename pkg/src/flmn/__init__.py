"""Feature-label memory network (FLMN) and the single-matrix LRUA baseline
for episodic one-shot classification, on a small numpy autodiff engine."""

__version__ = "0.1.0"
