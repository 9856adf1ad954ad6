//! Dense 3D neural-network primitives with forward and backward passes.

pub mod activation;
pub mod concat;
pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod norm;
pub mod optim;
pub mod param;
pub mod pool;
pub mod tensor;

pub use activation::{relu, relu_backward};
pub use concat::{concat_channels, split_channels};
pub use conv::{conv3d, conv3d_backward, conv3d_input_grad, conv3d_weight_grad, deconv3d, deconv3d_backward, ConvGrads};
pub use gradcheck::{gradcheck, relative_error, GradCheckOptions, GradCheckReport, LayerObjective, Objective};
pub use init::{xavier_bound, xavier_init, ConvParams};
pub use layers::{BatchNorm3d, Conv3d, Deconv3d, GlobalAvgPool, Linear, MaxPool3d, MaxUnpool3d, Relu};
pub use norm::{batchnorm3d_backward, batchnorm3d_infer, batchnorm3d_train, BatchNormCache, BatchStats};
pub use optim::{sgd_step, Sgd, SgdConfig};
pub use param::{export_params, import_params, Layer, Mode, NamedTensor, Param, Parameterized};
pub use pool::{avgpool3d, avgpool3d_backward, max_unpool3d, max_unpool3d_backward, maxpool3d, maxpool3d_backward, PoolIndices};
pub use tensor::{Shape5, Tensor5};
