"""Exception hierarchy shared across the package."""


class AirlabelError(Exception):
    """Base class for all package errors."""


class TreeError(AirlabelError, ValueError):
    pass


class MultipleRoots(TreeError):
    def __init__(self, ids):
        self.ids = tuple(ids)
        super().__init__(f"multiple root nodes: {list(self.ids)}")


class CycleDetected(TreeError):
    def __init__(self, ids):
        self.ids = tuple(ids)
        super().__init__(f"parent links form a cycle through nodes {list(self.ids)}")


class DisconnectedNode(TreeError):
    def __init__(self, ids):
        self.ids = tuple(ids)
        super().__init__(f"nodes not reachable from root: {list(self.ids)}")


class DegenerateBranch(TreeError):
    def __init__(self, node_id):
        self.ids = (node_id,)
        super().__init__(f"node {node_id} has zero length (start == end)")


class UnknownCategory(AirlabelError, ValueError):
    pass


class ParseError(AirlabelError, ValueError):
    pass


class SchemaVersionMismatch(ParseError):
    pass


class ConfigError(AirlabelError, ValueError):
    pass


class ConfigInfeasible(ConfigError):
    pass


class DomainError(AirlabelError, ValueError):
    pass


class MaskOutOfRange(DomainError):
    pass


class ShapeMismatch(AirlabelError, ValueError):
    pass


class NonFiniteActivation(AirlabelError, ArithmeticError):
    def __init__(self, block):
        self.block = block
        super().__init__(f"non-finite activation after block {block!r}")


class NonFiniteLoss(AirlabelError, ArithmeticError):
    def __init__(self, epoch, step, last_checkpoint=None):
        self.epoch = epoch
        self.step = step
        self.last_checkpoint = last_checkpoint
        msg = f"non-finite loss at epoch {epoch}, step {step}"
        if last_checkpoint is not None:
            msg += f"; last good checkpoint: {last_checkpoint}"
        super().__init__(msg)
