pub mod analysis;
pub mod connectors;
pub mod model;
pub mod params;
pub mod tensor;
pub mod vision;
