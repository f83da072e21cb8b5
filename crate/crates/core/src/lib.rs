//! Compression of dense weight tensors by probabilistic magnitude pruning,
//! truncated SVD and annealed low-rank factorization, with the bookkeeping
//! and latency harness needed to measure what each one buys.

pub mod archive;
pub mod bench;
pub mod decompose;
pub mod error;
pub mod factorize;
pub mod linalg;
pub mod pipeline;
pub mod prune;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use archive::{read_archive, write_archive, TensorArchive};
pub use bench::{
    dense_matvec, factored_matvec, masked_matvec, run_bench, BenchConfig, BenchResult, CsrMatrix,
    Variant,
};
pub use decompose::{reconstruct, svd, svd_tensor, truncate, SvdFactors};
pub use error::{ArchiveError, Error, Result};
pub use factorize::{
    anneal_factorize, compressed_matrix, frobenius_loss, loss_gradient, AnnealConfig, FactorPair,
};
pub use pipeline::{
    compress_archive, compress_layer, verify_report, CompressOptions, CompressedLayer,
    CompressionReport, LayerConfig, LayerReport, PipelineConfig, Stage,
};
pub use prune::{
    calibrate_threshold, entangle, importance, iterative_prune, retain_mask, softmax_probs,
    PruneConfig, PruneResult, Threshold,
};
pub use synth::{generate_archive, LayerSpec};
pub use tensor::{flatten_conv, unflatten_conv, DenseTensor, RetainMask};
