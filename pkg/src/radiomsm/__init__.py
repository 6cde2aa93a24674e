"""Masked spectrogram modeling for radio spectrograms: data synthesis,
sentence corpora, a ConvLSTM backbone with task heads, and evaluation."""

__version__ = "0.1.0"
