//! Building segmentation with fused U-Net ensembles.

pub mod geometry;
pub mod tilestore;
pub mod segnet;
pub mod jaccard;
pub mod fusion;
pub mod trainer;
pub mod polygonize;
pub mod scorer;
pub mod overlay;
