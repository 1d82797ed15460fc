"""Block-online recursive source separation, speaker counting and diarization.

The pipeline consumes two-channel audio in fixed-length blocks, recursively
peels one source per iteration off a residual attention mask (noise always
first), carries speaker embeddings across blocks to keep extraction order
stable, and scores the result with overlap-aware DER and projection SDR.
"""

__version__ = "0.1.0"
