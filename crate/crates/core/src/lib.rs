pub mod config;
pub mod detector;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod occlusion;
pub mod pipeline;
pub mod planning;
pub mod scene;
pub mod seed;
pub mod skeleton;
pub mod triangulation;
