"""Tensors, the recording tape and reverse-mode accumulation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from ..errors import ContractError, NumericOverflowError, ShapeError


class Tensor:
    """Dense float64 array, optionally bound to a node on a `Tape`."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Optional["Tape"] = None, node_id: Optional[int] = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        where = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{where})"


@dataclass
class TapeNode:
    op_kind: str
    input_ids: tuple  # node id per input, None for constants
    output: Tensor
    saved_context: Any = None
    attrs: dict = field(default_factory=dict)
    input_data: tuple = ()


class Tape:
    """Eagerly built record of one forward pass.

    Parameters enter as leaf nodes via :meth:`parameter`. A tape may be
    differentiated once; :func:`backward` frees its nodes afterwards.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.params: dict[str, int] = {}
        self.consumed = False

    def parameter(self, name: str, value) -> Tensor:
        if self.consumed:
            raise ContractError("tape already consumed by backward()")
        if name in self.params:
            raise ContractError(f"parameter '{name}' registered twice")
        t = Tensor(value)
        t.tape = self
        t.node_id = self._record(TapeNode("leaf", (), t, attrs={"name": name}))
        self.params[name] = t.node_id
        return t

    def _record(self, node: TapeNode) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def __len__(self):
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(op_kind: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Run primitive `op_kind` and record it when any input lives on a tape."""
    from .prims import PRIMITIVES

    try:
        prim = PRIMITIVES[op_kind]
    except KeyError:
        raise ContractError(f"unknown op kind '{op_kind}'") from None
    attrs = dict(attrs or {})
    tensors = [as_tensor(x) for x in inputs]
    if len(tensors) not in prim.arity:
        raise ContractError(f"{op_kind} takes {prim.arity} inputs, got {len(tensors)}")

    tapes = {id(t.tape): t.tape for t in tensors if t.tape is not None}
    if len(tapes) > 1:
        raise ContractError(f"{op_kind}: inputs recorded on different tapes")
    tape = next(iter(tapes.values()), None)
    if tape is not None and tape.consumed:
        raise ContractError("tape already consumed by backward()")

    arrays = [t.data for t in tensors]
    prim.check(op_kind, arrays, attrs)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out, ctx = prim.forward(arrays, attrs)
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(op_kind)
    result = Tensor(out)
    if tape is not None:
        result.tape = tape
        ids = tuple(t.node_id if t.tape is tape else None for t in tensors)
        result.node_id = tape._record(TapeNode(op_kind, ids, result, ctx, attrs, tuple(arrays)))
    return result


def backward(tape: Tape, loss: Tensor, trainable_ids: Sequence[str]) -> dict:
    """Reverse-mode gradients of scalar `loss` w.r.t. named leaf parameters.

    Returns a mapping name -> ndarray shaped like the parameter; parameters
    the loss does not depend on map to zeros.
    """
    from .prims import PRIMITIVES

    if tape.consumed:
        raise ContractError("tape already consumed by backward()")
    if loss.tape is not tape or loss.node_id is None:
        raise ContractError("loss is not recorded on this tape")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    for name in trainable_ids:
        if name not in tape.params:
            raise KeyError(f"unknown trainable id '{name}'")

    cot: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        node = tape.nodes[nid]
        if node.op_kind == "leaf":
            continue
        g = cot.pop(nid, None)
        if g is None:
            continue
        prim = PRIMITIVES[node.op_kind]
        needs = tuple(i is not None for i in node.input_ids)
        grads = prim.backward(g, node.saved_context, node.input_data, node.attrs, needs)
        for i, gi in zip(node.input_ids, grads):
            if i is None or gi is None:
                continue
            if i in cot:
                cot[i] = cot[i] + gi
            else:
                cot[i] = gi

    out = {}
    for name in trainable_ids:
        nid = tape.params[name]
        g = cot.get(nid)
        shape = tape.nodes[nid].output.shape
        out[name] = np.zeros(shape) if g is None else np.array(g, dtype=np.float64).reshape(shape)
    tape.consumed = True
    tape.nodes = []
    return out
