//! Population tissue probability maps: accumulation of subject
//! responsibilities in template space and the Dirichlet-regularized
//! template updates.

mod atlas;
mod push;
mod smooth;
mod update;

pub use atlas::{TissueAtlas, WarpedAtlasSample};
pub use push::{push_responsibilities, PushedStats, SubjectPush};
pub use smooth::smooth_template;
pub use update::{
    template_objective, update_template_unit_weights, update_template_weighted,
    TemplateUpdateOutcome,
};
