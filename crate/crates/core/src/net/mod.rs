//! Small background-conditioned matting networks with hand-written
//! reverse-mode gradients.

pub mod adam;
pub mod arch;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;

pub use adam::{adam_step, adam_update, AdamHyper, AdamState};
pub use arch::{Activation, ArchRole, ArchSpec, LayerSpec};
pub use checkpoint::Checkpoint;
pub use graph::{backward, forward, Trace};
pub use layers::{BilinearOp, FeatureMap};
pub use model::{
    backward_student, forward_student, forward_teacher, matte_input, Network, StudentPass,
    COARSE_PREFIX, REFINER_PREFIX, STUDENT_SCALE,
};
pub use params::{init_params, Frozen, ParamSet, Tensor};
