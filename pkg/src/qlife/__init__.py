"""Quality-model lifecycle toolkit: novelty detection, few-shot incremental learning and domain adaptation."""

__version__ = "0.1.0"
