"""Exception hierarchy shared by every osmforge module."""


class ForgeError(Exception):
    """Base class for all osmforge errors."""


class ParseError(ForgeError):
    """Input bytes are not valid UTF-8 JSON."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SchemaError(ForgeError):
    """A JSON document parsed but does not follow the expected layout."""

    def __init__(self, message, index=None):
        where = f"element {index}: " if index is not None else ""
        super().__init__(where + message)
        self.index = index


class RangeError(ForgeError, ValueError):
    """A coordinate or index lies outside its valid domain."""


class MissingNodeError(ForgeError):
    def __init__(self, node_id, way_id=None):
        msg = f"node {node_id} is not present in the document"
        if way_id is not None:
            msg += f" (referenced by way {way_id})"
        super().__init__(msg)
        self.node_id = node_id
        self.way_id = way_id


class GeometryError(ForgeError):
    """An element cannot be assembled into a valid geometry."""


class EditError(ForgeError):
    def __init__(self, message, op_index):
        super().__init__(f"edit op {op_index}: {message}")
        self.op_index = op_index


class ShapeError(ForgeError, ValueError):
    """Array or grid dimensions do not agree."""


class ScheduleError(ForgeError, ValueError):
    pass


class PolicyError(ForgeError, ValueError):
    pass


class DateError(ForgeError, ValueError):
    pass


class WeightsError(ForgeError):
    """Weight or embedding file is malformed or fails its checksum."""


class ConfigError(ForgeError):
    pass


class FetchError(ForgeError):
    """Network failure that persisted through every retry."""


class FixtureMissError(FetchError):
    """Offline mode was requested and neither cache nor fixtures hold the target."""


class HttpError(FetchError):
    def __init__(self, code, url=""):
        super().__init__(f"HTTP {code} from {url}" if url else f"HTTP {code}")
        self.code = code
        self.url = url
