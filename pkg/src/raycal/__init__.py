"""Indoor mmWave ray-tracing channel simulator with channel-sounder emulation,
multipath extraction, large-scale statistics and two-offset calibration."""

from importlib import resources

from .scene import (
    Envelope,
    Material,
    RadioNode,
    Scene,
    SceneError,
    SceneParseError,
    SceneValidationError,
    Surface,
    Wedge,
    classify_visibility,
    envelope_attenuation,
    load_scene,
    material_permittivity,
    scene_from_dict,
)
from .tracer import (
    Interaction,
    InteractionKind,
    PropPath,
    TraceConfig,
    diffract_coeff,
    path_gain,
    path_power_dbm,
    reflect_coeff,
    scatter_paths,
    trace,
)

__version__ = "0.1.0"


def bundled_scene_path(name: str = "machine_room"):
    """Filesystem path of a scenario shipped with the package."""
    return resources.files(__package__) / "scenes" / f"{name}.json"
