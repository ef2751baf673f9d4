"""Self-supervised pretraining, evaluation and explanation for brain-MRI tumour classification."""

__version__ = "0.1.0"
