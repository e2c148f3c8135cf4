pub mod decode;
pub mod harness;
pub mod mahdpo;
pub mod numcore;
pub mod policy;
pub mod prmlab;
pub mod synthtasks;
