//! Measurements on trained networks: error-signal alignment, sign
//! concordance, representational similarity and channel attribution.

pub mod alignment;
pub mod cka;
pub mod dump;
pub mod importance;

pub use alignment::{angle_degrees, concordance_report, gradient_angle, sign_concordance, AngleReport, LayerValue};
pub use cka::{cka_grid, linear_cka, ActivationSource, CenteredGram, CkaMatrix, InMemoryActivations, Subset};
pub use dump::{write_activation_dump, ActivationDump, DumpMeta};
pub use importance::{
    channel_alpha, channel_importance, importance_scores, montage_ppm, top_exemplars, write_montage,
    ChannelImportance, Exemplar,
};
