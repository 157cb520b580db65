pub mod binding;
pub mod cases;
pub mod constraints;
pub mod diff;
pub mod dynamics;
pub mod error;
pub mod friction;
pub mod io;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod row;
pub mod sensitivity;
pub mod spatial;
