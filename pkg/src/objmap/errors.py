"""Exception types shared across the mapping pipeline."""


class ObjmapError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(ObjmapError):
    """A text input (trajectory, detections) could not be parsed."""


class FormatError(ObjmapError):
    """A binary input (PGM, PLY) is malformed or unsupported."""


class ValidationError(ObjmapError):
    """An input value violates a documented constraint."""


class ConsistencyError(ObjmapError):
    """Map state and trajectory disagree (e.g. missing keyframe pose)."""


class RegistryError(ObjmapError):
    """A class id is unknown to the class registry."""


class LandmarkNotFoundError(ObjmapError):
    """Requested landmark id does not exist in the map."""


class ExportError(ObjmapError):
    """An artifact could not be written."""


class PipelineError(ObjmapError):
    """A keyframe failed mid-pipeline; the map was rolled back."""

    def __init__(self, keyframe_id: int, message: str):
        super().__init__(f"keyframe {keyframe_id}: {message}")
        self.keyframe_id = keyframe_id
