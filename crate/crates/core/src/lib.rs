pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod flexmlp;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod pooler;
pub mod rope;
pub mod tensor;
pub mod text;
pub mod trainer;
