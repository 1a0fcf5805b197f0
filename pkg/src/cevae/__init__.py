"""Unsupervised anomaly detection on 2D slices with a context-encoding VAE.

Train on healthy slices only; detect anomalous slices by the approximated
evidence lower bound and localize them by fusing reconstruction error with
smoothed guided input-gradients of the KL term.
"""

from .corruption import (
    AugmentSpec,
    MaskSpec,
    apply_mask,
    augment,
    augment_batch,
    gaussian_corrupt,
    mask_batch,
    sample_augment_spec,
    sample_mask_spec,
)
from .data import (
    DatasetManifest,
    DegenerateInputError,
    ManifestEntry,
    PhantomConfig,
    SliceFormatError,
    SliceSample,
    generate_phantoms,
    load_manifest,
    preprocess_patient,
    read_slice,
    resample,
    save_manifest,
    write_slice,
    zscore_normalize,
)
from .evaluation import (
    EvalReport,
    RunMetrics,
    UndefinedMetricError,
    aggregate_runs,
    dice,
    dice_cv,
    evaluate_run,
    pixel_roc_auc,
    render_report_table,
    report_from_json,
    report_to_json,
    roc_auc,
    slice_labels,
)
from .model import (
    CevaeNet,
    LatentPosterior,
    ModelConfig,
    add_coord_channels,
    guided_backprop,
    init_weights,
    load_checkpoint,
    rectify,
    reparameterize,
    save_checkpoint,
)
from .objectives import (
    LossBreakdown,
    baseline_loss,
    cevae_loss,
    combine_losses,
    kl_std_normal,
    kl_std_normal_per_sample,
    l1_per_sample,
    l1_reconstruction,
    mse_per_sample,
    mse_reconstruction,
)
from .scoring import (
    AttributionConfig,
    PixelScoreMap,
    SampleScore,
    backprop_to_input,
    gaussian_smooth,
    pixel_score,
    read_score_csv,
    sample_score,
    sample_scores,
    score_dataset,
    smoothgrad,
    write_score_csv,
)
from .seeding import derive_seed, numpy_rng, torch_generator
from .trainer import (
    AdamState,
    RunRecord,
    TrainConfig,
    adam_step,
    evaluate_checkpoint,
    factor_sweep,
    train,
)

__version__ = "0.1.0"
