"""Desk-scale direct speech-to-speech translation on synthetic toy languages.

The package covers the whole pipeline: a float64 autodiff core (`tensor`),
Conformer/Transformer building blocks (`nn`), training objectives
(`objectives`), the model families and parameter transfer (`models`),
synthetic corpus generation with a deterministic TTS oracle (`datagen`),
BLEU evaluation and published-table fixtures (`evalkit`), and the config,
training-loop, and CLI layers (`config`, `training`, `cli`).
"""

__version__ = "0.1.0"
