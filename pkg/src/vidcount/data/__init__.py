from .annotations import (
    AnnotationBoundsError,
    AnnotationParseError,
    Frame,
    FrameSequence,
    PointAnnotationSet,
    SequenceMeta,
    dumps_annotations,
    load_annotations,
    save_annotations,
)
from .density import crop_density, generate_pseudo_density, save_density_pgm
from .imageio import frame_filename, read_ppm, write_ppm
from .patches import PatchGrid, crop_patches
from .splits import split_dataset
from .store import load_split, read_manifest, read_sequence, write_manifest, write_sequence
from .synthetic import SceneConfigError, SyntheticSceneConfig, synthesize_sequence

__all__ = [
    "AnnotationBoundsError", "AnnotationParseError", "Frame", "FrameSequence",
    "PatchGrid", "PointAnnotationSet", "SceneConfigError", "SequenceMeta",
    "SyntheticSceneConfig", "crop_density", "crop_patches", "dumps_annotations",
    "frame_filename", "generate_pseudo_density", "load_annotations", "read_ppm",
    "save_annotations", "save_density_pgm", "split_dataset", "synthesize_sequence",
    "write_ppm", "load_split", "read_manifest", "read_sequence", "write_manifest",
    "write_sequence",
]
