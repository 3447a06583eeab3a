"""Data-to-model distillation: compress a labelled image set into a conditional generator."""

__version__ = "0.1.0"
