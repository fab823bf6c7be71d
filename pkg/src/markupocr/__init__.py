"""Image-to-markup OCR with standard, hierarchical, and coarse-to-fine attention.

A self-contained numpy library: autodiff tensor core, CNN + row-encoder
image encoder, attention-based LSTM decoder, REINFORCE training for hard
attention, and the TinyTeX mini markup language with a deterministic
bitmap compiler used to generate and score synthetic corpora.
"""

__version__ = "0.1.0"
