pub mod analytical;
pub mod config;
pub mod gantt;
pub mod isa;
pub mod mem;
pub mod sim;
pub mod tensorcore;
pub mod tma;
pub mod tracegen;
