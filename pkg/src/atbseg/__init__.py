"""Air-tissue-boundary segmentation toolkit.

Pretrain multi-head encoder-decoder segmenters on varying subject/video
budgets, adapt them to unseen subjects or corpora with a handful of
annotated frames, and quantify the gap to matched-condition benchmarks.
"""

__version__ = "0.1.0"
