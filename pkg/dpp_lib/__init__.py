"""Library for learning k-out-of-n pruning masks jointly with network weights.

Modules:
    tensor: Dense tensors with tape-based reverse-mode differentiation
    optim: Adam and SGD-with-momentum updates
    gumbel_topk: Gumbel top-K mask sampling and its relaxed backward path
    dpp_mask: Pruning granularities, logit tying and masked layers
    quant: Weight binarization and uniform quantization
    models: LeNet300-100 and LeNet5-Caffe built from masked layers
    sparsity_metrics: Mask marginals, pruning entropy and diversity
    sparse_format: Structured-sparse model files and compression rates
    mnist: IDX file loading
    config: YAML run configuration
    metrics: Per-epoch metric logs
    trainer: Training loop, evaluation and state files

For architecture details, see: docs/ARCHITECTURE.md
"""

__version__ = "0.1.0"
