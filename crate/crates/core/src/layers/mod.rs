//! Forward and backward kernels for every layer primitive.
//!
//! Each kernel is a pure function of its inputs. Standalone layer structs
//! (`ConvLayer`, `DenseLayer`, ...) own their parameters; the network graph
//! stores parameters in a registry and calls the same kernels.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod init;
pub mod pool;
pub mod softmax;

pub use activation::{activation_backward, activation_forward, Activation};
pub use batchnorm::{BatchNormCache, BatchNormLayer};
pub use conv::{conv2d_backward, conv2d_forward, ConvCache, ConvGrads, ConvLayer, Padding};
pub use dense::{dense_backward, dense_forward, DenseGrads, DenseLayer};
pub use dropout::{dropout, dropout_backward, DropoutLayer};
pub use pool::{
    global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, PoolCache,
};
pub use softmax::softmax;
