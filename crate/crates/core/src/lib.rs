pub mod autodiff;
pub mod config;
pub mod data;
pub mod model;
pub mod propagation;
pub mod training;
