"""On-the-fly synthetic tumor augmentation and lesion-wise evaluation for brain tumor MRI."""

__version__ = "0.1.0"

from .volume import (  # noqa: E402
    ET, NETC, RC, SNFH, MODALITIES, REGIONS, Dims, IntensityVolume, LabelVolume,
    MultiModalCase, Phase, Region, load_nifti, region_mask, save_nifti,
)
from .augment import (  # noqa: E402
    AugmentConfig, AugmentOutcome, Donor, LabelPool, RandomStream, adapt_classes,
    augment_case, find_placement, insert_noise, procedural_synthesize, sample_scale, scale_mask,
)
from .metrics import (  # noqa: E402
    CaseScores, connected_components, dice, dilate, evaluate_case, lesion_wise_dice,
    lesion_wise_nsd, nsd, surface_voxels,
)
from .postproc import (  # noqa: E402
    ThresholdSet, apply_thresholds, ensemble, ensemble_predict, suppress_rc,
)
from .stats import ScoreMatrix, aggregate_scores, paired_t, rank_models  # noqa: E402
from .phantom import LesionSpec, PhantomSpec, make_case, make_probability  # noqa: E402
