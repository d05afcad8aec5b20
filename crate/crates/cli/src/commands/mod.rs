pub mod ablate;
pub mod bench;
pub mod decode;
pub mod eval;
pub mod gen_toy;
