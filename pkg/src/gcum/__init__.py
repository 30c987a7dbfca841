"""Group re-identification over synthetic group-appearance embeddings.

The package trains and evaluates a retrieval model for groups of people
observed across cameras.  Group views are rendered as small sets of member
appearance vectors; the model aggregates them into a single unit-norm group
feature, optionally hardened against membership changes (random member
dropout during training, a learned member-count refinement term) and
sharpened by a cross-attention refinement head.  Training runs in two
stages: text-prompt learning against frozen encoders, then refinement-head
learning against frozen prompts.

Everything is double precision and deterministic: a run is a pure function
of its config and seed.
"""

__version__ = "0.1.0"
