//! Kernels the point-flow module and network are built from. Each kernel
//! has an eager form over [`Tensor`](crate::Tensor) and a differentiable
//! form on [`Tape`](crate::Tape).

mod conv;
mod norm;
mod pool;
mod sample;
mod select;

pub use conv::{conv2d, ConvGeometry, ConvParams};
pub use norm::{channel_norm, NORM_EPS};
pub use pool::{adaptive_avg_pool, adaptive_max_pool, adaptive_range, box_avg_pool};
pub use sample::{bilinear_point_sample, bilinear_resize, scatter_points, NormalizedPoint};
pub use select::topk_select;
