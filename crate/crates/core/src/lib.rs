pub mod autodiff;
pub mod cli;
pub mod config;
pub mod decode;
pub mod dyck;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod stack;
pub mod train;
pub mod treebank;
pub mod util;
