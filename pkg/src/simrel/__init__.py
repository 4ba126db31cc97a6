"""simrel: learn, certify, and deploy neural simulation relations between
black-box discrete-time control systems."""

__version__ = "0.1.0"

from .boxes import Box, box
from .certify import (CertReport, ConditionResult, check_classification,
                      check_init, check_step, check_validity, full_certificate,
                      precheck, report_from_text, report_to_text)
from .cover import (GridCover, JointDataset, build_joint_dataset, cover,
                    joint_pair_counts, nearest_center, stream_joint_pairs)
from .nets import (Gradients, Mlp, TrainState, backward, forward,
                   forward_cached, init_mlp, lipschitz_upper_bound, load_mlp,
                   optimizer_step, project_lipschitz, save_mlp,
                   spectral_product)
from .systems import (BUILTIN_CONTROLLERS, BUILTIN_SYSTEMS, ControllerDef,
                      SystemDef, builtin_controller, builtin_system,
                      register_dynamics, sample_lipschitz_check,
                      system_from_config)
from .training import (DatasetLabels, LossBreakdown, TrainConfig, TrainResult,
                       algorithm1, label_dataset, loss_K, loss_V)
from .transfer import (MatchError, MonteCarloReport, Trace, match_initial,
                       monte_carlo_soundness, run_transfer, trace_to_csv)
