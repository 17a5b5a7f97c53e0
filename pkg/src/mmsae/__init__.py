"""Sparse autoencoders for paired multimodal embeddings.

Standard TopK SAEs, group-sparse SAEs and masked group-sparse SAEs, trained
with hand-written gradients and Adam on NumPy, plus the evaluation and
interpretability tooling around them.
"""

__version__ = "0.1.0"
