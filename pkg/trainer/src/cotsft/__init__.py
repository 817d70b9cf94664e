"""Two-stage supervised fine-tuning on complexity-tiered training manifests:
plain SFT on regular rows, then chain-of-thought targets on hard rows."""

__version__ = "0.1.0"
