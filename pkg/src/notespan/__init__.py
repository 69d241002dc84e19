"""Character-span extraction for clinical-style patient notes.

A desk-scale pipeline: a small disentangled-attention encoder trained from
scratch (MLM pretraining, then per-token span fine-tuning with BCE), extended
with pseudo labeling, served through padding-aware batch planning, and scored
with micro-averaged character F1.
"""

__version__ = "0.1.0"
