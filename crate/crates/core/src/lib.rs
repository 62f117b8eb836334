pub mod audio;
pub mod bench;
pub mod autodiff;
pub mod dataset;
pub mod evaluate;
pub mod features;
pub mod loss;
pub mod masking;
pub mod metrics;
pub mod net;
pub mod separate;
pub mod train;
