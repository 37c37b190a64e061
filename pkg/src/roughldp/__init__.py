"""Step-2 rough paths, skeleton flows, action minimisation and Monte Carlo
checks of small-noise asymptotics for pinned diffusions."""

__version__ = "0.1.0"
