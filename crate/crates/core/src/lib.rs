pub mod adapter;
pub mod checkpoint;
pub mod datagen;
pub mod emissions;
pub mod eval;
pub mod graph;
pub mod lm;
pub mod numerics;
pub mod optim;
pub mod pipeline;
