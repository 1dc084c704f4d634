//! Evidential occupancy pipeline: masses and Dempster's rule, synthetic
//! worlds, the LiDAR inverse sensor model, and episode generation.

pub mod episode;
pub mod masses;
pub mod sensor;
pub mod world;

pub use episode::{generate_episode, reproject, BoxRecord, Episode, EpisodeConfig};
pub use masses::{age, classify, combine, pignistic, pignistic_free, BeliefGrid, CellClass, ClassGrid, Mass};
pub use sensor::{cast_rays, inverse_sensor, traverse, GridSpec, RayCells, SensorConfig};
pub use world::{BoxShape, Pose, Scenario, Segment, World};
