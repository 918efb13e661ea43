"""Hybrid rendering of textured meshes and 3D Gaussian splats with stable depth sorting."""
from .errors import (AssetError, BehindCamera, DegenerateFacet, DuplicateName, HeraError, InvalidParameter,
                     MissingForwardState, MissingUVs, NonOrthonormalRotation, NumericalFailure, ParseError,
                     ShapeMismatch, SizeMismatch, TopologyMismatch, UnsupportedAscii)
from .geometry import Camera, eval_sh, project_covariance, project_point
from .hybrid import RenderOptions, Scene, render, render_forward, set_threads
from .mesh import TexturedMesh, front_depth, rasterize_mesh
from .rigging import RiggedSplats, bind_splats, facet_frames, pose_scene, pose_splats
from .splats import SplatSet, rasterize_splats

__version__ = "0.1.0"
