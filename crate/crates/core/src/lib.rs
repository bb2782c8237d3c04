pub mod cellspace;
pub mod domain;
pub mod engine;
pub mod jsord;
pub mod lp;
pub mod nmac;
pub mod topology;
pub mod workload;
