//! Fiber-cluster shape measures computed two ways: a voxel-grid oracle and
//! a Siamese point-cloud regressor trained against it.

pub mod autodiff;
pub mod geometry;
pub mod lasso;
pub mod model;
pub mod oracle;
pub mod sampler;
pub mod seeding;
pub mod synth;
pub mod tract_io;
pub mod trainer;
