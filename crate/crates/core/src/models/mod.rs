//! Encoders, pretext and downstream heads, and GradCAM.

mod gradcam;
mod heads;
mod params;
mod resnet;

pub use gradcam::{
    gradcam, gradcam_downstream, gradcam_from_activations, gradcam_pair, overlay, upsample,
};
pub use heads::{AnyModel, DownstreamModel, ForwardPass, HeadKind, ModelBinding, ModelInput, PretextModel};
pub use params::{Binding, ParamStore};
pub use resnet::{
    BnUpdate, Encoder, EncoderPass, EncoderSpec, EncoderVariant, Mode, BN_EPS, BN_MOMENTUM,
    LATENT_DIM, MIN_INPUT_SIDE, STAGE_WIDTHS,
};
