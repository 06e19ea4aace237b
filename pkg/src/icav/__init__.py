"""In-context audio-video diffusion with identity guidance, at toy scale."""

__version__ = "0.1.0"
