"""Computational imaging toolbox and zero-shot LLM harness for glioma IDH genotyping."""

__version__ = "0.1.0"
