"""Episodic few-shot fine-tuning of vision transformers with
parameter-efficient methods, on a self-contained numpy autodiff engine."""

__version__ = "0.1.0"
