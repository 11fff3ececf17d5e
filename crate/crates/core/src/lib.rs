pub mod corpus;
pub mod textnorm;
pub mod tokenizer;
pub mod numerics;
pub mod model;
pub mod eval;
pub mod train;
