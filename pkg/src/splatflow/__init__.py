"""Feed-forward dynamic scene reconstruction with deformable Gaussian splats."""

__version__ = "0.1.0"

from .cameras import (
    Camera,
    GeometryError,
    RayTimeMap,
    SceneScale,
    load_cameras,
    normalize_scene,
    plucker_encode,
    save_cameras,
    unproject,
)
from .gaussians import (
    KeyframeGaussians,
    WarpedSet,
    canonicalize_flow,
    load_bundle,
    momentary_flow,
    save_bundle,
    tracks_from_flow,
    warp,
)
from .render import RenderOutput, RenderRequest, gradient_check, rasterize
from .tracks import TrackSet
