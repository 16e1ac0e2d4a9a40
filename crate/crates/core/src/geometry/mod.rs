//! Point clouds, rigid transforms, perturbations, synthetic families and file formats.

pub mod cloud;
pub mod io;
pub mod perturb;
pub mod rigid;
pub mod synth;

pub use cloud::{chamfer_error, nearest_sq_distances, pairwise_sq_distances, PointCloud};
pub use perturb::{add_noise, partial_view, sample_misalignment, view_directions, PartialView};
pub use rigid::{apply_rigid, Pose, PoseRecord, RigidTransform};
pub use synth::{generate_instance, generate_labeled, CategorySpec, Family, ParamRange};
