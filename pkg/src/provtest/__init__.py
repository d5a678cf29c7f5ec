"""Black-box model provenance testing from first-token agreement."""

from .errors import (
    BackendError,
    BackendUnreachable,
    CacheMiss,
    ConfigurationError,
    MalformedResponse,
    RateLimited,
)
from .modelio import ModelHandle, SyntheticModelSpec, query_first_token, synth_token
from .stats import bai_confidence_radius, holm_bonferroni, z_test_one_sided
from .tester import Verdict, identify_parent, identify_parent_bai, test_pair

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "BackendUnreachable",
    "CacheMiss",
    "ConfigurationError",
    "MalformedResponse",
    "ModelHandle",
    "RateLimited",
    "SyntheticModelSpec",
    "Verdict",
    "bai_confidence_radius",
    "holm_bonferroni",
    "identify_parent",
    "identify_parent_bai",
    "query_first_token",
    "synth_token",
    "test_pair",
    "z_test_one_sided",
]
