from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numeric_grad, relative_error
from .tensor import ContractError, Graph, ShapeError, Tensor, as_tensor, parameter


def backward(graph: Graph, loss: Tensor):
    return graph.backward(loss)


__all__ = [
    "ContractError", "Graph", "ShapeError", "Tensor", "as_tensor", "backward",
    "check_gradients", "load_checkpoint", "numeric_grad", "ops", "parameter",
    "relative_error", "save_checkpoint",
]
