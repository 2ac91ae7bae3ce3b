"""Knowledge-graph-guided diffusion synthesis of clinical event trajectories."""

__version__ = "0.1.0"
