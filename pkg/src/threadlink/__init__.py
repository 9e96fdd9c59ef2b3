"""Zero-shot dialogue disentanglement by entangled response selection.

A hierarchical scorer ranks candidate next utterances for a multi-thread
context. Its attention over (context utterance, candidate) pairs doubles as a
reply-to predictor; connected components of the predicted links give threads.
"""

__version__ = "0.1.0"
