"""Expert finding for CQA sites via personalized pre-training and fine-tuning.

Pipeline: ingest (or synthesize) a corpus of questions/answers, build expert
profiles with normalized vote scores, pre-train a compact transformer encoder
over target-aware expert sequences with three objectives, fine-tune it as an
expert-question ranker, and evaluate with MRR / Precision@K / NDCG@20.
"""

__version__ = "0.1.0"
