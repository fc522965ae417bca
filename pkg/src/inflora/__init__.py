"""Low-rank branches for continual learning that stay out of old-task input subspaces, in numpy."""

__version__ = "0.1.0"
