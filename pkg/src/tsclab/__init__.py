"""Traffic signal control with language-model controllers: simulator, baselines, critic and fine-tuning data."""

__version__ = "0.1.0"
