//! Symbolic execution of MVM-32 microcontroller firmware with automatic
//! interrupt modeling.

pub mod expr;
pub mod image;
pub mod isa;
pub mod memory;
pub mod nvic;
pub mod solver;
pub mod cfg;
pub mod machine;
pub mod mmio;
pub mod asm;
pub mod symex;
pub mod slice;
pub mod ident;
pub mod fixtures;
pub mod jit;
pub mod driver;
