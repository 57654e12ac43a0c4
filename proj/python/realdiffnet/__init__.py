"""Disease progression forecasting on irregular visits.

Thin wrapper over the compiled ``_core`` module: control-path interpolation,
gradient checking, synthetic cohorts, training runs and the ablation grid.
"""

try:
    from ._core import (
        ControlPath,
        RealDiffError,
        build_path,
        compute_metrics,
        default_config,
        emit_plot_data,
        generate_cohort,
        grad_check_suite,
        run_ablation,
        run_metrics,
        train_run,
        version_string,
    )
except ImportError:
    # build-tree layout: the extension sits directly on sys.path
    from _core import (
        ControlPath,
        RealDiffError,
        build_path,
        compute_metrics,
        default_config,
        emit_plot_data,
        generate_cohort,
        grad_check_suite,
        run_ablation,
        run_metrics,
        train_run,
        version_string,
    )

__version__ = version_string.split()[-1]

__all__ = [
    "ControlPath",
    "RealDiffError",
    "build_path",
    "compute_metrics",
    "default_config",
    "emit_plot_data",
    "generate_cohort",
    "grad_check_suite",
    "run_ablation",
    "run_metrics",
    "train_run",
    "version_string",
    "__version__",
]
