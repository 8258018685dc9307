"""Cross-view multi-instance multi-label learning for weakly supervised re-identification.

Bags are untrimmed sequences of instance feature vectors tagged with
bag-level identity labels only. The trainer alternates between selecting
seed instances / alignment structures and running SGD on a composite
loss; the retrieval side ranks gallery bags by a min-distance rule and
scores CMC / mAP.
"""

__version__ = "0.1.0"
