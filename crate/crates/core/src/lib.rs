//! Interactive PET/CT lesion segmentation: volumes, click guidance, a residual 3D U-Net,
//! tracer classification, inference with test-time mirroring, metrics and synthetic phantoms.

pub mod classifier;
pub mod edt;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod render;
pub mod session;
pub mod train;
pub mod util;
pub mod volume;

pub use classifier::{
    compute_mip, train_classifier, ClassifierConfig, ClassifierSample, MipAxis, MipPair, TracerClassifier,
    TracerPrediction,
};
pub use error::{Error, Result};
pub use guidance::{
    render_clicks, simulate_clicks, take_first_k, Click, ClickKind, ClickList, CurriculumPreset, GuidanceConfig,
    SamplingDistribution, MAX_CLICKS_PER_KIND,
};
pub use harness::{fingerprint_cases, run_desk_experiment, DeskExperimentConfig, DeskExperimentReport, ExperimentConfig, RunManifest};
pub use inference::{
    plan_tta, select_model, sliding_window_predict, suv_threshold_postprocess, tta_predict, CasePrediction,
    HybridPolicy, InferenceConfig, MirrorAxis, ModelRegistry, Pipeline, PostprocessMode, Provenance, TtaMode, TtaPlan,
};
pub use io::{load_label_volume, load_volume, save_volume, CaseData, CaseEntry, DatasetManifest};
pub use metrics::{
    connected_components, dice, false_negative_volume, false_positive_volume, interactive_sweep, CasePredictor,
    Connectivity, SegMetrics, SweepConfig, SweepReport,
};
pub use model::{build_network, dice_ce_loss, DualHeadOutput, LossWeights, NetworkConfig, OrganSchema, SegNet};
pub use phantom::{generate_dataset, generate_phantom, DatasetConfig, PhantomCase, PhantomSpec};
pub use render::{encode_png, render_slice, Overlays, Plane, SliceChannel, SliceRequest, Window};
pub use session::{ClickRequest, PredictResponse, SessionState, SessionStore};
pub use train::{train, AugmentConfig, TrainConfig, TrainReport};
pub use volume::{
    DatasetFingerprint, ImageGrid, LabelVolume, Modality, MultiChannelVolume, ScalarVolume, Tracer,
};
