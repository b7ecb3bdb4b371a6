pub mod ndnum;
pub mod env;
pub mod nets;
pub mod replay;
pub mod trainer;
