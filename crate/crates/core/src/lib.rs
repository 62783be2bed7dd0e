pub mod areal;
pub mod changepoint;
pub mod cluster;
pub mod fpca;
pub mod pipeline;
pub mod series_model;
pub mod simulate;
