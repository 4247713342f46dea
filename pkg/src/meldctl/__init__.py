"""Meld-based switching feedback linearization for control-affine systems."""

import jax

# Lie derivatives and Newton inversions need double precision.
jax.config.update("jax_enable_x64", True)

from .errors import *  # noqa: E402,F401,F403
from .lie import (  # noqa: E402
    ControlAffineSystem,
    DeckEvaluator,
    JetValue,
    RelativeDegreeReport,
    deck_relative_degrees,
    drift_vector,
    full_interaction_matrix,
    interaction_matrix,
    lie_f,
    lie_g_lie_f,
    lie_tower,
    relative_degree,
)
from .melds import Choice, certify_meld, enumerate_melds, square_choices  # noqa: E402
from .models import build_model  # noqa: E402
from .control import GainProfile, dwell_times, estimate_assumption_constants, meld_constants  # noqa: E402
from .references import JointPath, ReferenceBundle  # noqa: E402
from .schedule import SwitchSchedule, shared_outputs  # noqa: E402
from .scenario import SimTrace, run_scenario  # noqa: E402

__version__ = "0.1.0"
