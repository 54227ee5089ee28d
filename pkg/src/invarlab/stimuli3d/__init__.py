"""3D stimuli: meshes, procedural primitives, cameras and rendering."""

from invarlab.stimuli3d.mesh import Mesh, load_obj, normalize_mesh
from invarlab.stimuli3d.primitives import (
    DEFAULT_NOVEL_CLASSES,
    DEFAULT_TRAIN_CLASSES,
    PROCEDURAL_CLASSES,
    ShapeClass,
    make_class_objects,
    make_primitive,
)
from invarlab.stimuli3d.render import (
    DEFAULT_LIGHT,
    IMAGE_SIZE,
    Camera,
    Light,
    camera_grid,
    render,
    save_views,
    view_filename,
)

__all__ = [
    "Mesh", "load_obj", "normalize_mesh", "make_primitive", "ShapeClass", "PROCEDURAL_CLASSES",
    "DEFAULT_TRAIN_CLASSES", "DEFAULT_NOVEL_CLASSES", "make_class_objects",
    "Camera", "Light", "DEFAULT_LIGHT", "IMAGE_SIZE", "camera_grid", "render", "save_views", "view_filename",
]
