"""Real-time CNN detect-and-track on synthetic video, in plain numpy."""
__version__ = "0.1.0"
