from .env import (
    Contact,
    InsertionEnv,
    Observation,
    PerturbationMode,
    SimConfig,
    SimError,
    WorldState,
    contact_wrench,
    find_contacts,
    is_success,
    peg_polygon,
    socket_polygons,
)
from .expert import ScriptedExpert, rollout_expert
from .render import rasterize, render_views
from .evaluate import EpisodeLog, EvalResult, RandomPolicy, ReplayPolicy, episode_seed, evaluate
