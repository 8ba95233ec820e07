from .router import (N_INTERVALS, LoadCurve, RouterTrace, TraceError, TraceRecord, curve_from_csv,
                     curve_to_csv, curve_to_png, curve_to_svg, emit_curves, episode_load,
                     interval_bounds, percentile_load, token_attribution)
from .tables import (EPISODE_HEADER, MISSING, Cell, EvalRun, SuccessTable, TableError,
                     aggregate_eval, episodes_from_csv, episodes_to_csv, write_table)
