pub mod checkpoint;
pub mod data;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod netspec;
pub mod training;
